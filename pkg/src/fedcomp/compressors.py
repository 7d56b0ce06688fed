"""Gradient compressors with error feedback: identity, top-k, sign, STC, 3SFC.

Byte accounting assumes 32-bit payload entries (indices and values 4 bytes,
sign bitmaps 1 bit per entry rounded up to bytes) even though everything is
float64 in-process. `reported_payload_bytes` counts payload fields only; the
serialized form adds a 1-byte tag and, for some variants, a small header.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .models import ParamVector

TAG_DENSE = 0
TAG_SPARSE = 1
TAG_SIGN = 2
TAG_SPARSE_SIGN = 3
TAG_SFC = 4


class CompressorError(Exception):
    pass


def _bitmap_bytes(n_bits):
    return (n_bits + 7) // 8


@dataclass
class DenseMessage:
    values: np.ndarray
    tag: int = TAG_DENSE

    @property
    def reported_payload_bytes(self):
        return 4 * self.values.size

    def serialize(self):
        return bytes([self.tag]) + self.values.astype("<f4").tobytes()

    header_bytes = 1


@dataclass
class SparseMessage:
    indices: np.ndarray
    values: np.ndarray
    dim: int
    tag: int = TAG_SPARSE

    @property
    def reported_payload_bytes(self):
        return 8 * self.values.size  # 4-byte index + 4-byte value each

    def serialize(self):
        head = struct.pack("<BII", self.tag, self.dim, self.values.size)
        return head + self.indices.astype("<u4").tobytes() + self.values.astype("<f4").tobytes()

    header_bytes = 9


@dataclass
class SignMessage:
    signs: np.ndarray  # +-1.0 per coordinate
    scale: float
    tag: int = TAG_SIGN

    @property
    def reported_payload_bytes(self):
        return _bitmap_bytes(self.signs.size) + 4

    def serialize(self):
        bits = np.packbits((self.signs > 0).astype(np.uint8))
        head = struct.pack("<BI", self.tag, self.signs.size)
        return head + bits.tobytes() + struct.pack("<f", self.scale)

    header_bytes = 5


@dataclass
class SparseSignMessage:
    indices: np.ndarray
    signs: np.ndarray  # +-1.0 per kept coordinate
    scale: float
    dim: int
    tag: int = TAG_SPARSE_SIGN

    @property
    def reported_payload_bytes(self):
        return 4 * self.indices.size + _bitmap_bytes(self.indices.size) + 4

    def serialize(self):
        bits = np.packbits((self.signs > 0).astype(np.uint8))
        head = struct.pack("<BII", self.tag, self.dim, self.indices.size)
        return (
            head
            + self.indices.astype("<u4").tobytes()
            + bits.tobytes()
            + struct.pack("<f", self.scale)
        )

    header_bytes = 9


@dataclass
class SfcMessage:
    """Synthetic dataset payload: inputs, label logits and a scale factor."""

    inputs: np.ndarray  # [m, input_dim]
    label_logits: np.ndarray  # [m, classes]
    scale: float
    tag: int = TAG_SFC

    @property
    def scalar_count(self):
        return self.inputs.size + self.label_logits.size + 1

    @property
    def reported_payload_bytes(self):
        return 4 * self.scalar_count

    def serialize(self):
        m, input_dim = self.inputs.shape
        classes = self.label_logits.shape[1]
        head = struct.pack("<BIII", self.tag, m, input_dim, classes)
        return (
            head
            + self.inputs.astype("<f4").tobytes()
            + self.label_logits.astype("<f4").tobytes()
            + struct.pack("<f", self.scale)
        )

    header_bytes = 13


@dataclass
class EfState:
    """Per-client error-feedback residual."""

    residual: ParamVector

    @classmethod
    def zeros(cls, spec):
        return cls(ParamVector.zeros(spec))


def _topk_indices(v, k):
    """Indices of the k largest-magnitude entries; ties keep the lower index."""
    d = v.size
    if not 1 <= k <= d:
        raise CompressorError(f"k={k} out of range for dim {d}")
    order = np.lexsort((np.arange(d), -np.abs(v)))
    return np.sort(order[:k])


class IdentityCompressor:
    """No compression; dense float payload."""

    name = "none"

    def get_params(self):
        return {}

    def compress(self, v, context=None):
        return DenseMessage(v.copy())


class TopKCompressor:
    """Keep the k largest-magnitude coordinates as index/value pairs."""

    name = "topk"

    def __init__(self, k):
        self.k = int(k)

    def get_params(self):
        return {"k": self.k}

    def compress(self, v, context=None):
        idx = _topk_indices(v, self.k)
        return SparseMessage(idx, v[idx].copy(), dim=v.size)


class SignCompressor:
    """signSGD with the standard mean-magnitude scale."""

    name = "sign"

    def get_params(self):
        return {}

    def compress(self, v, context=None):
        signs = np.where(v < 0, -1.0, 1.0)  # sign(0) = +1
        return SignMessage(signs, float(np.mean(np.abs(v))))


class StcCompressor:
    """Sparse ternary: top-k support, per-coordinate signs, one shared magnitude."""

    name = "stc"

    def __init__(self, k):
        self.k = int(k)

    def get_params(self):
        return {"k": self.k}

    def compress(self, v, context=None):
        idx = _topk_indices(v, self.k)
        kept = v[idx]
        mu = float(np.mean(np.abs(kept)))
        signs = np.where(kept < 0, -1.0, 1.0)
        return SparseSignMessage(idx, signs, mu, dim=v.size)


def decompress(message, context=None):
    """Reconstruct a dense vector from a message.

    The Sfc variant needs `context` (an object with a `decode(message)`
    method holding the current global weights); all others are local.
    """
    if isinstance(message, DenseMessage):
        return message.values.copy()
    if isinstance(message, SparseMessage):
        out = np.zeros(message.dim)
        out[message.indices] = message.values
        return out
    if isinstance(message, SignMessage):
        return message.scale * message.signs
    if isinstance(message, SparseSignMessage):
        out = np.zeros(message.dim)
        out[message.indices] = message.scale * message.signs
        return out
    if isinstance(message, SfcMessage):
        if context is None:
            raise CompressorError("Sfc messages need a decode context with model weights")
        return context.decode(message)
    raise CompressorError(f"malformed or unknown message {type(message).__name__}")


def compress_with_ef(compressor, g, ef, context=None):
    """Compress the EF-corrected target g + residual; return (message, new EF).

    The bookkeeping identity decompress(msg) + residual' == g + residual
    holds exactly in float64 for the default residual rule.
    """
    spec = g.spec
    if ef.residual.values.shape != g.values.shape:
        raise CompressorError("EF residual length differs from gradient length")
    target = g.values + ef.residual.values
    message = compressor.compress(target, context=context)
    residual_fn = getattr(compressor, "ef_residual", None)
    if residual_fn is not None:
        new_res = residual_fn(target, message, context)
    else:
        new_res = target - decompress(message, context)
    return message, EfState(ParamVector(new_res, spec))


def compression_rate(message, param_count):
    """Payload bytes over the 32-bit dense size (Comp. Rate; ratio is 1/rate)."""
    if param_count <= 0:
        raise CompressorError("param_count must be positive")
    return message.reported_payload_bytes / (4.0 * param_count)
