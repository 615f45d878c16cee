"""Domain-incremental protocol: sequential training, domain identification,
two-stage prediction, and the standard accuracy/forgetting metrics.

Domains arrive in presentation order. For each domain the trainer sees that
domain's rows only (no rehearsal), and stores the domain's raw mean feature
as a centroid plus its freshly trained calibrator. At test time a sample is
routed to the domain with the most cosine-similar centroid, calibrated with
that domain's parameters, and classified coarse-first then within-group.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import errors, _blockio
from .calibrator import (
    CalibratorArch,
    CalibratorParams,
    TrainConfig,
    _read_params_blocks,
    _write_params_blocks,
    coarse_forward_batch,
    fine_forward_batch,
    train_domain,
)
from .prototypes import DualPrototypeBank
from .store import EmbeddingSet, restrict_to_domain

MEMORY_MAGIC = b"DCM1"


@dataclass
class DomainMemory:
    """Per-domain mean feature and calibrator, in presentation order."""

    centroids: list[np.ndarray]  # each (d,) float64
    params: list[CalibratorParams]

    def __post_init__(self):
        if len(self.centroids) != len(self.params):
            raise errors.BadConfig("centroid and parameter counts differ")

    @property
    def num_domains(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class AccuracyMatrix:
    """values[i, j] = accuracy on test domain i after training domain j.

    Only the upper triangle (j >= i) is defined; the rest is NaN.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        t = v.shape[0]
        if v.shape != (t, t) or t < 1:
            raise errors.BadConfig(f"accuracy matrix must be square, got {v.shape}")
        upper = v[np.triu_indices(t)]
        if not np.isfinite(upper).all():
            raise errors.BadConfig("upper triangle must be fully populated")
        if upper.min() < 0.0 or upper.max() > 1.0:
            raise errors.BadConfig("accuracies must lie in [0, 1]")

    @property
    def num_domains(self) -> int:
        return self.values.shape[0]


def average_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean of the last column: accuracy over all domains after the last one."""
    return float(matrix.values[:, -1].mean())


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean backward transfer: average over domains i < T of the mean
    accuracy change on domain i after the later stages j > i."""
    t = matrix.num_domains
    if t < 2:
        raise errors.Undefined("forgetting needs at least 2 domains")
    bwt = [
        float((matrix.values[i, i + 1 :] - matrix.values[i, i]).mean())
        for i in range(t - 1)
    ]
    return float(np.mean(bwt))


def identify_domain(z: np.ndarray, memory: DomainMemory) -> int:
    """Centroid with maximal cosine similarity; ties go to the lowest index."""
    if memory.num_domains < 1:
        raise errors.MissingDomain("memory holds no domains")
    return int(identify_domain_batch(np.asarray(z, dtype=np.float64)[None, :], memory)[0])


def identify_domain_batch(z: np.ndarray, memory: DomainMemory) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=1)
    if float(norms.min()) < 1e-12:
        raise errors.ZeroVector("cannot identify the domain of a zero vector")
    centroids = np.stack(memory.centroids)  # (T, d)
    c_norms = np.linalg.norm(centroids, axis=1)
    if float(c_norms.min()) < 1e-12:
        raise errors.ZeroVector("a domain centroid has zero norm")
    scores = (z @ centroids.T) / (norms[:, None] * c_norms[None, :])
    return np.argmax(scores, axis=1)  # first max wins: lowest index on ties


def predict(z: np.ndarray, memory: DomainMemory, bank: DualPrototypeBank) -> int:
    """Class for one raw feature vector (see :func:`predict_batch`)."""
    labels, _ = predict_batch(np.asarray(z, dtype=np.float64)[None, :], memory, bank)
    return int(labels[0])


def _max_threads() -> int:
    raw = os.environ.get("DUALCP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def predict_batch(
    z: np.ndarray,
    memory: DomainMemory,
    bank: DualPrototypeBank,
    num_threads: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-stage prediction for a batch of raw features.

    Returns (class labels, identified domain per row). Rows are processed
    independently, so the optional thread fan-out (DUALCP_THREADS) cannot
    change the result.
    """
    z = np.asarray(z, dtype=np.float64)
    threads = _max_threads() if num_threads is None else max(1, num_threads)
    if threads > 1 and z.shape[0] >= 2 * threads:
        slices = np.array_split(np.arange(z.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(lambda idx: _predict_chunk(z[idx], memory, bank), slices)
            )
        labels = np.concatenate([p[0] for p in parts])
        domains = np.concatenate([p[1] for p in parts])
        return labels, domains
    return _predict_chunk(z, memory, bank)


def _predict_chunk(
    z: np.ndarray, memory: DomainMemory, bank: DualPrototypeBank
) -> tuple[np.ndarray, np.ndarray]:
    n = z.shape[0]
    domains = identify_domain_batch(z, memory)
    labels = np.empty(n, dtype=np.int64)
    for p in np.unique(domains):
        rows = np.nonzero(domains == p)[0]
        params = memory.params[int(p)]
        x_c = coarse_forward_batch(params, z[rows])
        # coarse outputs and prototypes are unit vectors: dot = cosine
        group_idx = np.argmax(x_c @ bank.coarse, axis=1)
        for g in np.unique(group_idx):
            g = int(g)
            sub = rows[group_idx == g]
            members = bank.grouping.groups[g]
            if len(members) == 1:
                labels[sub] = members[0]  # fine stage is trivial for singletons
                continue
            x_f = fine_forward_batch(params, z[sub], x_c[group_idx == g], g)
            within = np.argmax(x_f @ bank.fine[g], axis=1)
            labels[sub] = np.asarray(members, dtype=np.int64)[within]
    return labels, domains


@dataclass
class ProtocolResult:
    memory: DomainMemory
    accuracy: AccuracyMatrix
    epoch_losses: list[list[float]]  # per domain


def run_protocol(
    train: EmbeddingSet,
    test: EmbeddingSet,
    bank: DualPrototypeBank,
    cfg: TrainConfig,
    normalize_centroids: bool = False,
    train_domain_fn=None,
) -> ProtocolResult:
    """Sequential training over all domains with per-stage evaluation.

    After finishing domain t the model is scored on every test domain
    i <= t, filling the upper triangle of the accuracy matrix. Domain t's
    trainer runs with seed ``cfg.seed + t`` and receives only the rows of
    domain t.
    """
    if (
        train.manifest.class_names != test.manifest.class_names
        or train.manifest.domain_names != test.manifest.domain_names
        or train.dim != test.dim
    ):
        raise errors.BadManifest("train and test sets must share a manifest")
    if train.num_classes != bank.num_classes:
        raise errors.BadConfig("bank was built for a different class set")
    trainer = train_domain_fn or train_domain
    t_total = train.num_domains
    present = np.unique(train.domain_ids)
    if len(present) != t_total:
        missing = sorted(set(range(t_total)) - set(int(t) for t in present))
        raise errors.MissingDomain(f"training domains {missing} have no rows")
    test_views = [restrict_to_domain(test, t) for t in range(t_total)]

    memory = DomainMemory(centroids=[], params=[])
    values = np.full((t_total, t_total), np.nan)
    losses: list[list[float]] = []
    for t in range(t_total):
        view = restrict_to_domain(train, t)  # the trainer sees this view only
        initial = memory.params[t - 1].copy() if cfg.warm_start and t > 0 else None
        result = trainer(view, bank, replace(cfg, seed=cfg.seed + t), initial=initial)
        centroid = view.features.astype(np.float64).mean(axis=0)
        if normalize_centroids:
            norm = float(np.linalg.norm(centroid))
            if norm < 1e-12:
                raise errors.ZeroVector(f"domain {t} centroid has zero norm")
            centroid = centroid / norm
        memory.centroids.append(centroid)
        memory.params.append(result.params)
        losses.append(result.epoch_losses)

        for i in range(t + 1):
            view_i = test_views[i]
            pred, _ = predict_batch(view_i.features.astype(np.float64), memory, bank)
            values[i, t] = float(np.mean(pred == view_i.labels.astype(np.int64)))

    return ProtocolResult(
        memory=memory, accuracy=AccuracyMatrix(values), epoch_losses=losses
    )


def domain_id_accuracy(
    test: EmbeddingSet, memory: DomainMemory
) -> list[float]:
    """Fraction of each test domain's rows routed to the right domain."""
    out = []
    for t in range(test.num_domains):
        view = restrict_to_domain(test, t)
        ids = identify_domain_batch(view.features.astype(np.float64), memory)
        out.append(float(np.mean(ids == t)))
    return out


def save_memory(memory: DomainMemory, path, meta: dict | None = None) -> None:
    """One file: JSON header, centroid block, then per-domain param blocks."""
    if memory.num_domains < 1:
        raise errors.MissingDomain("refusing to save empty memory")
    arch = memory.params[0].arch
    header = {
        "version": 1,
        "num_domains": memory.num_domains,
        "dim": memory.params[0].dim,
        "num_groups": memory.params[0].num_groups,
        "arch": {
            "num_layers": arch.num_layers,
            "hidden_multiplier": arch.hidden_multiplier,
            "activation": arch.activation,
        },
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        _blockio.write_header(f, MEMORY_MAGIC, header)
        _blockio.write_block(f, np.stack(memory.centroids))
        for params in memory.params:
            _write_params_blocks(f, params)


def load_memory(path) -> tuple[DomainMemory, dict]:
    with open(path, "rb") as f:
        header = _blockio.read_header(f, MEMORY_MAGIC)
        try:
            t_total = int(header["num_domains"])
            dim = int(header["dim"])
            num_groups = int(header["num_groups"])
            arch = CalibratorArch(
                num_layers=int(header["arch"]["num_layers"]),
                hidden_multiplier=float(header["arch"]["hidden_multiplier"]),
                activation=str(header["arch"]["activation"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise errors.BadManifest(f"memory header invalid: {exc}") from exc
        centroids_mat = _blockio.read_block(f)
        if centroids_mat.shape != (t_total, dim):
            raise errors.BadManifest("centroid block shape disagrees with header")
        params = [
            _read_params_blocks(f, dim, num_groups, arch) for _ in range(t_total)
        ]
    memory = DomainMemory(
        centroids=[centroids_mat[i] for i in range(t_total)], params=params
    )
    return memory, dict(header.get("meta", {}))
