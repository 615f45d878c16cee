"""Concept prototype construction.

From unit semantic guidance vectors this module builds maximally separated
unit target frames: every frame column has unit norm and every pair of
columns meets at inner product -1/(K-1), the widest equiangular spread K
unit vectors admit. The dual-level variant first merges similar classes
into groups (connectivity over a thresholded cosine-similarity graph),
then builds one frame across group means (coarse) and one frame inside
each group (fine).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import errors, _blockio
from .store import EmbeddingSet, GuidanceMatrix

RANK_TOL = 1e-10
BANK_MAGIC = b"DCB1"


def _columns_of(source) -> np.ndarray:
    if isinstance(source, GuidanceMatrix):
        return source.columns
    return np.asarray(source, dtype=np.float64)


def qr_decompose(columns) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR with positive diagonal of R (fixes the sign freedom).

    Accepts a GuidanceMatrix or any (d, K) column matrix. Returns (Q, R)
    with Q (d, K) orthonormal columns, R (K, K) upper triangular, Q @ R
    equal to the input.
    """
    y = _columns_of(columns)
    if y.ndim != 2:
        raise errors.BadManifest(f"expected a column matrix, got shape {y.shape}")
    d, k = y.shape
    if k > d:
        raise errors.TooManyClassesForDim(f"{k} columns cannot be orthogonal in dim {d}")
    q, r = np.linalg.qr(y, mode="reduced")
    diag = np.abs(np.diag(r))
    if k and float(diag.min()) < RANK_TOL:
        raise errors.RankDeficient(
            f"column {int(diag.argmin())} is linearly dependent (|R_ii| < {RANK_TOL})"
        )
    signs = np.sign(np.diag(r))
    return q * signs, signs[:, None] * r


def etf_from_basis(q: np.ndarray) -> np.ndarray:
    """Unit frame with constant pairwise inner product -1/(K-1).

    Given orthonormal columns q_1..q_K, the frame is
    sqrt(K/(K-1)) * (Q - mean-column), i.e. centered and rescaled so that
    every column lands on the unit sphere at the maximal equiangular spread.
    """
    q = np.asarray(q, dtype=np.float64)
    k = q.shape[1]
    if k < 2:
        raise errors.SingletonETF("equiangular frame needs at least 2 columns")
    centered = q - q.mean(axis=1, keepdims=True)
    return math.sqrt(k / (k - 1)) * centered


@dataclass(frozen=True)
class SimilarityGraph:
    """Pairwise cosine similarities and the thresholded adjacency."""

    similarity: np.ndarray  # (K, K) float64, symmetric
    adjacency: np.ndarray  # (K, K) bool, strict similarity > threshold
    threshold: float


def similarity_graph(gm: GuidanceMatrix, p: float) -> SimilarityGraph:
    """Adjacency A_ij = [similarity_ij > p], strict inequality."""
    if not 0.0 < p <= 1.0:
        raise errors.BadThreshold(f"threshold must be in (0, 1], got {p}")
    y = gm.columns
    s = y.T @ y
    return SimilarityGraph(similarity=s, adjacency=s > p, threshold=float(p))


@dataclass(frozen=True)
class Grouping:
    """Partition of class indices into connectivity groups.

    Groups are ordered by smallest member, members ascend within a group,
    and ``class_to_group[c] == (group index, index within group)``.
    """

    groups: tuple[tuple[int, ...], ...]
    class_to_group: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = sorted(c for g in self.groups for c in g)
        k = len(self.class_to_group)
        if seen != list(range(k)):
            raise errors.BadManifest("groups must partition the class indices")
        for g, members in enumerate(self.groups):
            if list(members) != sorted(members):
                raise errors.BadManifest("group members must be ascending")
            for j, c in enumerate(members):
                if self.class_to_group[c] != (g, j):
                    raise errors.BadManifest("class_to_group disagrees with groups")

    @classmethod
    def from_groups(cls, groups) -> "Grouping":
        groups = tuple(tuple(sorted(int(c) for c in g)) for g in groups)
        groups = tuple(sorted(groups, key=lambda g: g[0]))
        k = sum(len(g) for g in groups)
        inverse: list[tuple[int, int]] = [(-1, -1)] * k
        for gi, members in enumerate(groups):
            for j, c in enumerate(members):
                inverse[c] = (gi, j)
        return cls(groups=groups, class_to_group=tuple(inverse))

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def num_classes(self) -> int:
        return len(self.class_to_group)


def connected_groups(graph: SimilarityGraph | np.ndarray) -> Grouping:
    """Connected components of the (undirected) adjacency via iterative DFS.

    Two classes share a group iff a path connects them.
    """
    adj = graph.adjacency if isinstance(graph, SimilarityGraph) else np.asarray(graph)
    adj = adj.astype(bool)
    k = adj.shape[0]
    if adj.shape != (k, k):
        raise errors.BadManifest(f"adjacency must be square, got {adj.shape}")
    visited = np.zeros(k, dtype=bool)
    groups = []
    for start in range(k):
        if visited[start]:
            continue
        stack = [start]
        component = []
        while stack:
            node = stack.pop()
            if visited[node]:
                continue
            visited[node] = True
            component.append(node)
            for neighbor in np.nonzero(adj[node])[0]:
                if not visited[neighbor]:
                    stack.append(int(neighbor))
        groups.append(component)
    return Grouping.from_groups(groups)


def group_means(columns, grouping: Grouping) -> np.ndarray:
    """Column k = plain average of the group's guidance columns.

    Averages of unit vectors are not unit; they are fed to QR as-is.
    """
    cols = _columns_of(columns)
    if cols.shape[1] != grouping.num_classes:
        raise errors.BadManifest("grouping does not match the number of columns")
    means = np.empty((cols.shape[0], grouping.num_groups))
    for gi, members in enumerate(grouping.groups):
        means[:, gi] = cols[:, list(members)].mean(axis=1)
    return means


@dataclass(frozen=True)
class DualPrototypeBank:
    """Coarse (per-group) and fine (within-group) prototype frames.

    ``coarse`` is (d, N_g); ``fine[k]`` is (d, |group k|); ``vanilla`` is
    the ungrouped (d, K) frame kept for comparison and degenerate modes.
    Singleton groups carry their normalized guidance column as the single
    fine prototype.
    """

    coarse: np.ndarray
    fine: tuple[np.ndarray, ...]
    grouping: Grouping
    vanilla: np.ndarray
    threshold: float
    class_names: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.coarse.shape[0]

    @property
    def num_groups(self) -> int:
        return self.grouping.num_groups

    @property
    def num_classes(self) -> int:
        return self.grouping.num_classes

    def targets_for_class(self, label: int) -> tuple[np.ndarray, np.ndarray]:
        """(coarse prototype, fine prototype) for one class index."""
        g, j = self.grouping.class_to_group[label]
        return self.coarse[:, g], self.fine[g][:, j]


def _normalized_column(col: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(col))
    if norm < 1e-12:
        raise errors.ZeroVector("cannot normalize a zero column")
    return (col / norm)[:, None]


def build_dual_bank(gm: GuidanceMatrix, p: float) -> DualPrototypeBank:
    """Group classes at threshold p, then build coarse and fine frames.

    At p = 1.0 no strict similarity exceeds the threshold, every group is
    a singleton, and the coarse frame coincides with the ungrouped one.
    """
    y = gm.columns
    k = gm.num_classes
    if k < 2:
        raise errors.SingletonETF("need at least 2 classes")
    graph = similarity_graph(gm, p)
    grouping = connected_groups(graph)

    vanilla = etf_from_basis(qr_decompose(y)[0])

    if grouping.num_groups == 1:
        coarse = _normalized_column(y.mean(axis=1))
    else:
        means = group_means(y, grouping)
        coarse = etf_from_basis(qr_decompose(means)[0])

    fine = []
    for members in grouping.groups:
        if len(members) == 1:
            fine.append(_normalized_column(y[:, members[0]]))
        else:
            fine.append(etf_from_basis(qr_decompose(y[:, list(members)])[0]))

    return DualPrototypeBank(
        coarse=coarse,
        fine=tuple(fine),
        grouping=grouping,
        vanilla=vanilla,
        threshold=float(p),
        class_names=gm.class_names,
    )


def build_vanilla_bank(gm: GuidanceMatrix) -> DualPrototypeBank:
    """Ungrouped bank: one singleton group per class, coarse = vanilla frame."""
    return build_dual_bank(gm, p=1.0)


def class_mean_guidance(base: EmbeddingSet) -> GuidanceMatrix:
    """Guidance from data: normalized per-class mean of the given rows.

    Used when no text encoder is available; callers typically pass the
    base-domain rows only.
    """
    feats = base.features.astype(np.float64)
    k = base.num_classes
    cols = np.empty((base.dim, k))
    for label in range(k):
        mask = base.labels == label
        if not mask.any():
            raise errors.MissingClass(
                f"class {label} ({base.manifest.class_names[label]}) has no rows"
            )
        mean = feats[mask].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            raise errors.ZeroVector(f"class {label} mean has zero norm")
        cols[:, label] = mean / norm
    return GuidanceMatrix(cols, base.manifest.class_names)


@dataclass(frozen=True)
class AngleReport:
    """Minimum pairwise angles of a bank vs. the ungrouped frame (radians)."""

    vanilla_angle: float
    coarse_angle: float | None  # None when there is a single group
    fine_angles: tuple[float | None, ...]  # None for singleton groups
    holds: bool


def _pair_angle(u: np.ndarray, v: np.ndarray) -> float:
    # chord-based formula: well-conditioned at 0 and pi, unlike arccos(u.v)
    if float(u @ v) >= 0.0:
        return 2.0 * math.asin(min(1.0, float(np.linalg.norm(u - v)) / 2.0))
    return math.pi - 2.0 * math.asin(min(1.0, float(np.linalg.norm(u + v)) / 2.0))


def _min_pairwise_angle(frame: np.ndarray) -> float | None:
    k = frame.shape[1]
    if k < 2:
        return None
    return min(
        _pair_angle(frame[:, i], frame[:, j])
        for i in range(k)
        for j in range(i + 1, k)
    )


def verify_angle_separation(bank: DualPrototypeBank, slack: float = 1e-9) -> AngleReport:
    """Check that grouping never shrinks pairwise angles.

    Every coarse pair and every within-group fine pair must be separated by
    at least the ungrouped angle arccos(-1/(K-1)), within ``slack``.
    Raises AssertionError if the inequality fails.
    """
    k = bank.num_classes
    if k < 2:
        raise errors.SingletonETF("angle comparison needs at least 2 classes")
    vanilla_angle = math.acos(-1.0 / (k - 1))
    coarse_angle = _min_pairwise_angle(bank.coarse)
    fine_angles = tuple(_min_pairwise_angle(f) for f in bank.fine)

    floor = vanilla_angle - slack
    holds = all(
        angle >= floor for angle in (coarse_angle, *fine_angles) if angle is not None
    )
    report = AngleReport(vanilla_angle, coarse_angle, fine_angles, holds)
    if not holds:
        raise AssertionError(f"grouped prototypes lost separation: {report}")
    return report


def save_bank(bank: DualPrototypeBank, path) -> None:
    """JSON manifest + f64 matrix blocks (vanilla, coarse, fine per group)."""
    header = {
        "version": 1,
        "dim": bank.dim,
        "num_classes": bank.num_classes,
        "num_groups": bank.num_groups,
        "threshold": bank.threshold,
        "groups": [list(g) for g in bank.grouping.groups],
        "class_names": list(bank.class_names),
    }
    with open(path, "wb") as f:
        _blockio.write_header(f, BANK_MAGIC, header)
        _blockio.write_block(f, bank.vanilla)
        _blockio.write_block(f, bank.coarse)
        for mat in bank.fine:
            _blockio.write_block(f, mat)


def load_bank(path) -> DualPrototypeBank:
    with open(path, "rb") as f:
        header = _blockio.read_header(f, BANK_MAGIC)
        try:
            grouping = Grouping.from_groups(header["groups"])
            class_names = tuple(str(s) for s in header["class_names"])
            threshold = float(header["threshold"])
            dim = int(header["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise errors.BadManifest(f"bank header invalid: {exc}") from exc
        vanilla = _blockio.read_block(f)
        coarse = _blockio.read_block(f)
        fine = tuple(_blockio.read_block(f) for _ in range(grouping.num_groups))
    if vanilla.shape != (dim, grouping.num_classes):
        raise errors.BadManifest("vanilla block shape disagrees with header")
    if coarse.shape != (dim, grouping.num_groups):
        raise errors.BadManifest("coarse block shape disagrees with header")
    for members, mat in zip(grouping.groups, fine):
        if mat.shape != (dim, len(members)):
            raise errors.BadManifest("fine block shape disagrees with grouping")
    return DualPrototypeBank(
        coarse=coarse,
        fine=fine,
        grouping=grouping,
        vanilla=vanilla,
        threshold=threshold,
        class_names=class_names,
    )
