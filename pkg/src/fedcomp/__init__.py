"""Federated-learning simulator with synthetic-features gradient compression."""

from .models import Batch, ModelSpec, ParamVector
from .data import Dataset, dirichlet_partition, load_idx, make_blobs
from .compressors import (
    EfState,
    IdentityCompressor,
    SignCompressor,
    StcCompressor,
    TopKCompressor,
    compress_with_ef,
    compression_rate,
    decompress,
)
from .sfc import SfcCompressor, SfcConfig, SyntheticDataset, sfc_decode, sfc_encode
from .federation import RunConfig, cosine_efficiency, evaluate, run, run_round

__all__ = [
    "Batch",
    "ModelSpec",
    "ParamVector",
    "Dataset",
    "dirichlet_partition",
    "load_idx",
    "make_blobs",
    "EfState",
    "IdentityCompressor",
    "SignCompressor",
    "StcCompressor",
    "TopKCompressor",
    "compress_with_ef",
    "compression_rate",
    "decompress",
    "SfcCompressor",
    "SfcConfig",
    "SyntheticDataset",
    "sfc_decode",
    "sfc_encode",
    "RunConfig",
    "cosine_efficiency",
    "evaluate",
    "run",
    "run_round",
]
