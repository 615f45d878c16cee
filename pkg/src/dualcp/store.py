"""On-disk embedding container and guidance-matrix handling.

File layout (all integers little-endian):

    magic "DCP1" | u32 version=1 | u32 N | u32 d | u32 K | u32 T |
    u8 normalized | N*d f32 features (row-major) | N u32 labels |
    N u32 domain ids | u64 manifest byte length | UTF-8 JSON manifest

The JSON manifest carries ``class_names`` (K strings) and ``domain_names``
(T strings). Features are stored as f32; all computation elsewhere in the
package happens in f64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import errors

MAGIC = b"DCP1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB")

ROW_NORM_TOL = 1e-5
COLUMN_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Manifest:
    class_names: tuple[str, ...]
    domain_names: tuple[str, ...]
    dim: int
    normalized: bool

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)


@dataclass(frozen=True)
class EmbeddingSet:
    """Immutable rows of feature vectors with class and domain labels."""

    features: np.ndarray  # (N, d) float32
    labels: np.ndarray  # (N,) uint32, values < K
    domain_ids: np.ndarray  # (N,) uint32, values < T
    manifest: Manifest

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        domains = np.ascontiguousarray(self.domain_ids, dtype=np.uint32)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "domain_ids", domains)
        _validate(self)
        for arr in (feats, labels, domains):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def num_domains(self) -> int:
        return self.manifest.num_domains


def _validate(es: EmbeddingSet) -> None:
    feats, labels, domains = es.features, es.labels, es.domain_ids
    if feats.ndim != 2:
        raise errors.BadManifest(f"features must be 2-D, got shape {feats.shape}")
    n, d = feats.shape
    if n < 1:
        raise errors.Empty("embedding set has no rows")
    if d < 2:
        raise errors.BadManifest(f"feature dim must be >= 2, got {d}")
    if labels.shape != (n,) or domains.shape != (n,):
        raise errors.BadManifest("labels/domain_ids length does not match rows")
    if not np.isfinite(feats).all():
        raise errors.NonFinite("features contain NaN or Inf")
    m = es.manifest
    if m.dim != d:
        raise errors.BadManifest(f"manifest dim {m.dim} != feature dim {d}")
    if m.num_classes < 1 or m.num_domains < 1:
        raise errors.BadManifest("manifest must name at least one class and domain")
    if any(not name for name in m.class_names):
        raise errors.BadManifest("class names must be non-empty")
    if len(set(m.class_names)) != m.num_classes:
        raise errors.BadManifest("class names must be unique")
    if any(not name for name in m.domain_names):
        raise errors.BadManifest("domain names must be non-empty")
    if len(set(m.domain_names)) != m.num_domains:
        raise errors.BadManifest("domain names must be unique")
    if labels.size and int(labels.max()) >= m.num_classes:
        raise errors.LabelOutOfRange(
            f"label {int(labels.max())} >= K={m.num_classes}"
        )
    if domains.size and int(domains.max()) >= m.num_domains:
        raise errors.LabelOutOfRange(
            f"domain id {int(domains.max())} >= T={m.num_domains}"
        )
    if m.normalized:
        norms = np.linalg.norm(feats.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > ROW_NORM_TOL:
            raise errors.BadManifest(
                f"normalized flag set but a row norm is off by {worst:.3g}"
            )


def save(es: EmbeddingSet, path) -> None:
    """Write the container; ``load(save(es))`` reproduces ``es`` bit-exactly."""
    n, d = es.features.shape
    m = es.manifest
    manifest_bytes = json.dumps(
        {"class_names": list(m.class_names), "domain_names": list(m.domain_names)},
        ensure_ascii=False,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(
            _HEADER.pack(
                MAGIC, VERSION, n, d, m.num_classes, m.num_domains, int(m.normalized)
            )
        )
        f.write(es.features.astype("<f4", copy=False).tobytes())
        f.write(es.labels.astype("<u4", copy=False).tobytes())
        f.write(es.domain_ids.astype("<u4", copy=False).tobytes())
        f.write(struct.pack("<Q", len(manifest_bytes)))
        f.write(manifest_bytes)


def load(path) -> EmbeddingSet:
    """Read and validate a container; rejects any malformed payload."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise errors.CorruptHeader("file shorter than header")
    magic, version, n, d, k, t, norm_flag = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise errors.CorruptHeader(f"bad magic {magic!r}")
    if version != VERSION:
        raise errors.CorruptHeader(f"unsupported version {version}")
    if n < 1:
        raise errors.Empty("container declares zero rows")
    if d < 2:
        raise errors.CorruptHeader(f"container declares dim {d} < 2")
    off = _HEADER.size
    feats, off = _take(raw, off, np.dtype("<f4"), n * d, "features")
    labels, off = _take(raw, off, np.dtype("<u4"), n, "labels")
    domains, off = _take(raw, off, np.dtype("<u4"), n, "domain ids")
    if len(raw) < off + 8:
        raise errors.Truncated("missing manifest length")
    (manifest_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + manifest_len:
        raise errors.Truncated("manifest shorter than declared")
    try:
        meta = json.loads(raw[off : off + manifest_len].decode("utf-8"))
        class_names = tuple(str(s) for s in meta["class_names"])
        domain_names = tuple(str(s) for s in meta["domain_names"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise errors.BadManifest(f"manifest JSON invalid: {exc}") from exc
    if len(class_names) != k or len(domain_names) != t:
        raise errors.BadManifest(
            f"manifest names ({len(class_names)}, {len(domain_names)}) "
            f"disagree with header (K={k}, T={t})"
        )
    manifest = Manifest(class_names, domain_names, dim=d, normalized=bool(norm_flag))
    return EmbeddingSet(
        feats.reshape(n, d).copy(), labels.copy(), domains.copy(), manifest
    )


def _take(raw: bytes, off: int, dtype: np.dtype, count: int, what: str):
    nbytes = dtype.itemsize * count
    if len(raw) < off + nbytes:
        raise errors.Truncated(f"{what} block truncated")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
    return arr, off + nbytes


def normalize_rows(es: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit L2 norm (computed in f64, stored as f32)."""
    feats = es.features.astype(np.float64)
    norms = np.linalg.norm(feats, axis=1)
    if float(norms.min()) < 1e-12:
        raise errors.ZeroVector(f"row {int(norms.argmin())} has zero norm")
    normalized = (feats / norms[:, None]).astype(np.float32)
    return EmbeddingSet(
        normalized,
        es.labels,
        es.domain_ids,
        replace(es.manifest, normalized=True),
    )


def restrict_to_domain(es: EmbeddingSet, domain: int) -> EmbeddingSet:
    """Rows of one domain only; the manifest is kept as-is.

    This is the interface boundary that keeps training rehearsal-free: the
    per-domain trainer is handed the restricted set and nothing else.
    """
    if not 0 <= domain < es.num_domains:
        raise errors.MissingDomain(f"domain {domain} not in [0, {es.num_domains})")
    mask = es.domain_ids == domain
    if not mask.any():
        raise errors.MissingDomain(f"domain {domain} has no rows")
    return EmbeddingSet(
        es.features[mask], es.labels[mask], es.domain_ids[mask], es.manifest
    )


@dataclass(frozen=True)
class GuidanceMatrix:
    """Unit semantic direction per class, columns aligned to class order."""

    columns: np.ndarray  # (d, K) float64, unit columns
    class_names: tuple[str, ...]

    def __post_init__(self):
        cols = np.ascontiguousarray(self.columns, dtype=np.float64)
        object.__setattr__(self, "columns", cols)
        if cols.ndim != 2:
            raise errors.BadManifest("guidance must be a 2-D column matrix")
        d, k = cols.shape
        if k != len(self.class_names):
            raise errors.BadManifest(
                f"{k} guidance columns but {len(self.class_names)} class names"
            )
        if k < 1 or d < 2:
            raise errors.BadManifest(f"degenerate guidance shape {cols.shape}")
        if not np.isfinite(cols).all():
            raise errors.NonFinite("guidance contains NaN or Inf")
        norms = np.linalg.norm(cols, axis=0)
        worst = float(np.abs(norms - 1.0).max())
        if worst > COLUMN_NORM_TOL:
            raise errors.ZeroVector(
                f"guidance column norm off unit by {worst:.3g} (> {COLUMN_NORM_TOL})"
            )
        cols.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def num_classes(self) -> int:
        return self.columns.shape[1]


def guidance_from_embeddings(es: EmbeddingSet) -> GuidanceMatrix:
    """Interpret a container with one row per class as a guidance matrix.

    Requires exactly K rows whose labels cover each class once; rows are
    reordered into class order and transposed into columns.
    """
    k = es.num_classes
    if len(es) != k:
        raise errors.BadManifest(
            f"guidance container must have one row per class ({len(es)} != {k})"
        )
    order = np.argsort(es.labels, kind="stable")
    if not np.array_equal(es.labels[order], np.arange(k, dtype=np.uint32)):
        raise errors.BadManifest("guidance labels must cover each class exactly once")
    cols = es.features.astype(np.float64)[order].T
    norms = np.linalg.norm(cols, axis=0)
    if float(norms.min()) < 1e-12:
        raise errors.ZeroVector("guidance row with zero norm")
    return GuidanceMatrix(cols / norms, es.manifest.class_names)


def guidance_to_embeddings(gm: GuidanceMatrix, domain_name: str = "guidance") -> EmbeddingSet:
    """Pack a guidance matrix into the container layout (one row per class)."""
    k = gm.num_classes
    manifest = Manifest(
        class_names=gm.class_names,
        domain_names=(domain_name,),
        dim=gm.dim,
        normalized=True,
    )
    return EmbeddingSet(
        gm.columns.T.astype(np.float32),
        np.arange(k, dtype=np.uint32),
        np.zeros(k, dtype=np.uint32),
        manifest,
    )


def load_guidance(path) -> GuidanceMatrix:
    return guidance_from_embeddings(load(path))


def save_guidance(gm: GuidanceMatrix, path) -> None:
    save(guidance_to_embeddings(gm), path)
