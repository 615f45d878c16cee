"""Deterministic synthetic multi-domain benchmark with known ground truth.

Guidance columns are built from disjoint orthonormal directions so that
within-group cosines are exactly ``intra_cosine`` and cross-group cosines
are exactly zero: the intended grouping is a constructed fact at any
threshold between those two values, not a statistical hope. Features are
an orthogonal image of the class direction plus a shared per-domain offset
plus isotropic noise, so classes are separable and domains identifiable by
construction. Everything is a pure function of the seed (PCG64).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .store import EmbeddingSet, GuidanceMatrix, Manifest


def _default_plan(num_classes: int) -> tuple[int, ...]:
    """Mixed group sizes: one triple, mostly pairs, a trailing singleton."""
    plan: list[int] = []
    remaining = num_classes
    if remaining >= 7:
        plan.append(3)
        remaining -= 3
    while remaining >= 4:
        plan.append(2)
        remaining -= 2
    if remaining == 3:
        plan += [2, 1]
    elif remaining:
        plan.append(remaining)
    return tuple(plan)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 20
    num_domains: int = 3
    dim: int = 64
    per_class: int = 50  # train rows per class per domain
    test_per_class: int = 10
    group_plan: tuple[int, ...] | None = None
    domain_shift: float = 0.5  # norm of the shared per-domain offset
    class_noise: float = 0.08  # expected norm of per-sample noise
    intra_cosine: float = 0.925  # pairwise cosine within a group
    seed: int = 0

    def __post_init__(self):
        plan = self.group_plan
        if plan is None:
            plan = _default_plan(self.num_classes)
        else:
            plan = tuple(int(m) for m in plan)
        object.__setattr__(self, "group_plan", plan)
        if self.num_classes < 2 or self.num_domains < 1:
            raise errors.Infeasible("need at least 2 classes and 1 domain")
        if self.per_class < 1 or self.test_per_class < 1:
            raise errors.Infeasible("need at least one row per class per domain")
        if any(m < 1 for m in plan) or sum(plan) != self.num_classes:
            raise errors.Infeasible(
                f"group plan {plan} does not sum to {self.num_classes} classes"
            )
        if self.domain_shift < 0 or self.class_noise < 0:
            raise errors.Infeasible("noise magnitudes must be >= 0")
        if not 0.0 < self.intra_cosine < 1.0:
            raise errors.Infeasible("intra_cosine must be in (0, 1)")
        if self.dim < self.num_classes:
            raise errors.Infeasible(
                f"dim {self.dim} < {self.num_classes} classes"
            )
        if self._basis_budget() > self.dim:
            raise errors.Infeasible(
                f"group plan needs {self._basis_budget()} orthogonal directions, "
                f"dim is {self.dim}"
            )

    def _basis_budget(self) -> int:
        # one axis per group plus one residual direction per member of
        # multi-member groups
        return sum(1 if m == 1 else m + 1 for m in self.group_plan)


@dataclass(frozen=True)
class SynthData:
    train: EmbeddingSet
    test: EmbeddingSet
    guidance: GuidanceMatrix
    groups: tuple[tuple[int, ...], ...]  # the planned grouping, canonical order


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def generate(spec: SynthSpec) -> SynthData:
    """Build (train, test, guidance) plus the planned grouping."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    d, k = spec.dim, spec.num_classes

    pool = _orthonormal(rng, d, spec._basis_budget())
    assignment = rng.permutation(k)  # class indices, dealt group by group

    cos_axis = np.sqrt(spec.intra_cosine)
    sin_axis = np.sqrt(1.0 - spec.intra_cosine)
    columns = np.empty((d, k))
    groups = []
    next_vec = 0
    next_class = 0
    for size in spec.group_plan:
        members = tuple(sorted(int(c) for c in assignment[next_class : next_class + size]))
        next_class += size
        groups.append(members)
        if size == 1:
            columns[:, members[0]] = pool[:, next_vec]
            next_vec += 1
        else:
            axis = pool[:, next_vec]
            next_vec += 1
            for c in members:
                columns[:, c] = cos_axis * axis + sin_axis * pool[:, next_vec]
                next_vec += 1
    groups = tuple(sorted(groups, key=lambda g: g[0]))

    class_names = tuple(f"class_{i:03d}" for i in range(k))
    domain_names = tuple(f"domain_{t}" for t in range(spec.num_domains))
    guidance = GuidanceMatrix(columns, class_names)

    feature_map = _orthonormal(rng, d, d)
    centers = feature_map @ columns  # unit columns, angles preserved
    offsets = np.empty((spec.num_domains, d))
    for t in range(spec.num_domains):
        direction = rng.standard_normal(d)
        offsets[t] = spec.domain_shift * direction / np.linalg.norm(direction)

    noise_scale = spec.class_noise / np.sqrt(d)

    def sample_block(n_per_class: int):
        rows = spec.num_domains * k * n_per_class
        feats = np.empty((rows, d))
        labels = np.empty(rows, dtype=np.uint32)
        domains = np.empty(rows, dtype=np.uint32)
        r = 0
        for t in range(spec.num_domains):
            for c in range(k):
                block = centers[:, c] + offsets[t] + noise_scale * rng.standard_normal(
                    (n_per_class, d)
                )
                feats[r : r + n_per_class] = block
                labels[r : r + n_per_class] = c
                domains[r : r + n_per_class] = t
                r += n_per_class
        return feats, labels, domains

    manifest = Manifest(class_names, domain_names, dim=d, normalized=False)
    train_feats, train_labels, train_domains = sample_block(spec.per_class)
    test_feats, test_labels, test_domains = sample_block(spec.test_per_class)
    train = EmbeddingSet(
        train_feats.astype(np.float32), train_labels, train_domains, manifest
    )
    test = EmbeddingSet(
        test_feats.astype(np.float32), test_labels, test_domains, manifest
    )
    return SynthData(train=train, test=test, guidance=guidance, groups=groups)
