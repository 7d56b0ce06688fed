"""The end-to-end round loop: local training, compression, aggregation, eval."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import compressors as comp
from . import models, sfc
from .data import Dataset, dirichlet_partition
from .models import Batch, ModelSpec, ParamVector


class FederationError(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelSpec
    n_clients: int = 10
    alpha: float = 0.5
    compressor: str = "none"  # none | topk | sign | stc | 3sfc
    topk: int = None
    sfc: sfc.SfcConfig = None
    rounds: int = 1
    local_iters: int = 5
    lr: float = 0.01
    batch_size: int = 256
    aggregation: str = "weighted"  # uniform | weighted
    error_feedback: bool = True
    seed: int = 0
    min_per_client: int = None

    def __post_init__(self):
        if self.rounds < 1 or self.local_iters < 1 or self.n_clients < 1:
            raise FederationError("rounds, local_iters and n_clients must be >= 1")
        if self.aggregation not in ("uniform", "weighted"):
            raise FederationError(f"unknown aggregation {self.aggregation!r}")
        if self.compressor in ("topk", "stc") and not self.topk:
            raise FederationError(f"{self.compressor} needs a top-k size")
        if self.compressor == "3sfc" and self.sfc is None:
            raise FederationError("3sfc needs an SfcConfig")


@dataclass
class ClientState:
    client_id: int
    indices: np.ndarray
    ef: comp.EfState
    rng: np.random.Generator
    last_synth: sfc.SyntheticDataset = None


@dataclass
class RoundReport:
    round: int
    train_loss: float
    test_acc: float
    bytes_up: int
    comp_rate: float
    cos_eff: float
    wall_ms: float
    per_client_bytes: list = field(default_factory=list)


def make_compressor(config):
    if config.compressor == "none":
        return comp.IdentityCompressor()
    if config.compressor == "topk":
        return comp.TopKCompressor(config.topk)
    if config.compressor == "sign":
        return comp.SignCompressor()
    if config.compressor == "stc":
        return comp.StcCompressor(config.topk)
    if config.compressor == "3sfc":
        return sfc.SfcCompressor(config.sfc)
    raise FederationError(f"unknown compressor {config.compressor!r}")


def make_clients(dataset, config):
    min_per = config.min_per_client
    if min_per is None:
        min_per = min(config.batch_size, dataset.n // config.n_clients)
    parts = dirichlet_partition(
        dataset, config.n_clients, config.alpha, seed=config.seed, min_per_client=min_per
    )
    ss = np.random.SeedSequence([config.seed, 0xC11E])
    streams = ss.spawn(config.n_clients)
    return [
        ClientState(
            client_id=i,
            indices=parts[i],
            ef=comp.EfState.zeros(config.model),
            rng=np.random.Generator(np.random.PCG64(streams[i])),
        )
        for i in range(config.n_clients)
    ]


def _aggregation_weights(clients, mode):
    if mode == "uniform":
        w = np.full(len(clients), 1.0 / len(clients))
    else:
        sizes = np.array([c.indices.size for c in clients], dtype=np.float64)
        w = sizes / sizes.sum()
    return w


def cosine_efficiency(decoded_updates, true_updates):
    """Mean cosine between decoded and EF-corrected true updates.

    A bit-identical reconstruction scores exactly 1.0; zero-norm clients are
    excluded from the mean.
    """
    if len(decoded_updates) != len(true_updates):
        raise FederationError("decoded/true update count mismatch")
    vals = []
    for u, t in zip(decoded_updates, true_updates):
        if np.array_equal(u, t):
            vals.append(1.0)
            continue
        nu, nt = np.linalg.norm(u), np.linalg.norm(t)
        if nu == 0.0 or nt == 0.0:
            continue
        vals.append(float(np.dot(u, t) / (nu * nt)))
    return float(np.mean(vals)) if vals else 0.0


def _client_work(w_t, client, dataset, config, compressor):
    """One client's round: local SGD, delta, EF-compressed message."""
    local_data = Dataset(
        dataset.inputs[client.indices], dataset.labels[client.indices], dataset.class_count
    )
    start = models.ParamVector(w_t.values, config.model)
    trained, mean_loss = models.local_sgd_with_stats(
        start, Batch(local_data.inputs, local_data.labels),
        config.local_iters, config.lr, config.batch_size, client.rng,
    )
    g = ParamVector(w_t.values - trained.values, config.model)

    context = None
    if config.compressor == "3sfc":
        init_seed = int(client.rng.integers(0, 2**63 - 1))
        context = sfc.SfcContext(
            weights=w_t, init_seed=init_seed, warm_start_from=client.last_synth
        )

    ef = client.ef if config.error_feedback else comp.EfState.zeros(config.model)
    target = g.values + ef.residual.values
    message, new_ef = comp.compress_with_ef(compressor, g, ef, context=context)
    decoded = comp.decompress(message, context)
    return {
        "client": client,
        "mean_loss": mean_loss,
        "message": message,
        "new_ef": new_ef,
        "decoded": decoded,
        "target": target,
    }


def _thread_cap():
    raw = os.environ.get("FEDCOMP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_round(w_t, clients, dataset, config, compressor, round_index=0):
    """One communication round; returns (w_{t+1}, RoundReport without test_acc)."""
    t0 = time.perf_counter()
    n_threads = min(_thread_cap(), len(clients))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(
                pool.map(lambda c: _client_work(w_t, c, dataset, config, compressor), clients)
            )
    else:
        results = [_client_work(w_t, c, dataset, config, compressor) for c in clients]

    weights = _aggregation_weights(clients, config.aggregation)
    # sequential reduction in ascending client-id order for determinism
    update = np.zeros_like(w_t.values)
    for wgt, res in zip(weights, results):
        update += wgt * res["decoded"]
    w_next = ParamVector(w_t.values - update, config.model)

    for res in results:
        if config.error_feedback:
            res["client"].ef = res["new_ef"]
        msg = res["message"]
        if isinstance(msg, comp.SfcMessage):
            res["client"].last_synth = sfc.SyntheticDataset(
                msg.inputs, msg.label_logits, msg.scale
            )
    bytes_up = [res["message"].reported_payload_bytes for res in results]
    rate = float(np.mean(
        [comp.compression_rate(res["message"], config.model.n_params) for res in results]
    ))
    eff = cosine_efficiency(
        [res["decoded"] for res in results], [res["target"] for res in results]
    )
    report = RoundReport(
        round=round_index,
        train_loss=float(np.mean([res["mean_loss"] for res in results])),
        test_acc=float("nan"),
        bytes_up=int(np.sum(bytes_up)),
        comp_rate=rate,
        cos_eff=eff,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        per_client_bytes=bytes_up,
    )
    return w_next, report


def evaluate(w, test_set):
    """Argmax-logit accuracy; argmax ties resolve to the lowest class index."""
    if test_set.n < 1:
        raise FederationError("empty test set")
    logits = models.predict_logits(w, test_set.inputs)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == test_set.labels))


def run(config, train_set, test_set, on_round=None):
    """Full training: E rounds with per-round evaluation.

    `on_round` (if given) is called with each finished RoundReport, enabling
    incremental metrics persistence.
    """
    clients = make_clients(train_set, config)
    compressor = make_compressor(config)
    w = models.init_params(config.model, seed=config.seed)
    reports = []
    for t in range(config.rounds):
        t0 = time.perf_counter()
        try:
            w, report = run_round(w, clients, train_set, config, compressor, round_index=t)
        except Exception as exc:
            raise FederationError(f"round {t} failed: {exc}") from exc
        report.test_acc = evaluate(w, test_set)
        report.wall_ms = (time.perf_counter() - t0) * 1e3
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return reports, w
