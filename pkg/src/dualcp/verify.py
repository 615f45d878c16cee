"""Built-in verification suites behind the ``verify`` CLI command.

Each suite re-derives the property it checks with an independent method
(brute-force reachability, central finite differences, closed-form frame
geometry) so a green run certifies the implementation, not itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibrator import (
    CalibratorArch,
    ddr_loss,
    forward,
    init_params,
    loss_gradients,
    params_to_vector,
    vector_to_params,
)
from .prototypes import (
    Grouping,
    build_dual_bank,
    connected_groups,
    etf_from_basis,
    qr_decompose,
    verify_angle_separation,
)
from .store import GuidanceMatrix


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_guidance(rng: np.random.Generator, dim: int, k: int) -> GuidanceMatrix:
    cols = rng.standard_normal((dim, k))
    cols /= np.linalg.norm(cols, axis=0)
    return GuidanceMatrix(cols, tuple(f"c{i}" for i in range(k)))


def etf_geometry_check(seed: int = 0, dim: int = 512, ks=(2, 5, 50)) -> CheckResult:
    """Unit norms and constant pairwise inner product -1/(K-1), tol 1e-6."""
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for k in ks:
        gm = _random_guidance(rng, dim, k)
        frame = etf_from_basis(qr_decompose(gm.columns)[0])
        gram = frame.T @ frame
        norm_err = float(np.abs(np.diag(gram) - 1.0).max())
        off = gram[~np.eye(k, dtype=bool)]
        angle_err = float(np.abs(off + 1.0 / (k - 1)).max())
        worst = max(worst, norm_err, angle_err)
    return CheckResult(
        "etf-geometry", worst < 1e-6, f"max deviation {worst:.2e} over K={list(ks)}"
    )


def angle_separation_check(
    seed: int = 0, trials: int = 100, max_classes: int = 64, dim: int = 96
) -> CheckResult:
    """Grouped frames never have smaller pairwise angles than the flat frame."""
    rng = np.random.Generator(np.random.PCG64(seed))
    equality_seen = False
    for trial in range(trials):
        if trial == 0:
            # orthogonal guidance: every group is a singleton, equality case
            k = 8
            cols = np.eye(dim)[:, :k]
            gm = GuidanceMatrix(cols, tuple(f"c{i}" for i in range(k)))
            p = 0.85
        else:
            k = int(rng.integers(2, max_classes + 1))
            gm = _random_guidance(rng, dim, k)
            p = float(rng.uniform(0.2, 1.0))
        try:
            bank = build_dual_bank(gm, p)
            report = verify_angle_separation(bank)
        except AssertionError as exc:
            return CheckResult("angle-separation", False, str(exc))
        if (
            bank.num_groups == bank.num_classes
            and report.coarse_angle is not None
            and abs(report.coarse_angle - report.vanilla_angle) < 1e-12
        ):
            equality_seen = True
    if not equality_seen:
        return CheckResult(
            "angle-separation", False, "no all-singleton equality case observed"
        )
    return CheckResult(
        "angle-separation", True, f"{trials} random configurations hold"
    )


def finite_difference_gradient(loss_fn, vec: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    grad = np.empty_like(vec)
    for i in range(vec.size):
        bumped = vec.copy()
        bumped[i] += step
        hi = loss_fn(bumped)
        bumped[i] -= 2 * step
        lo = loss_fn(bumped)
        grad[i] = (hi - lo) / (2 * step)
    return grad


def gradient_check(
    seed: int = 0, trials: int = 20, max_dim: int = 8, tol: float = 1e-6
) -> CheckResult:
    """Analytic gradients vs. central differences on small random setups."""
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for _ in range(trials):
        d = int(rng.integers(3, max_dim + 1))
        k = int(rng.integers(2, d + 1))
        gm = _random_guidance(rng, d, k)
        bank = build_dual_bank(gm, p=float(rng.uniform(0.4, 0.95)))
        arch = CalibratorArch(
            num_layers=int(rng.integers(1, 3)), hidden_multiplier=1.0
        )
        params = init_params(bank.num_groups, d, arch, rng)
        batch = rng.standard_normal((4, d))
        labels = rng.integers(0, k, size=4)
        alpha = float(rng.uniform(0.0, 1.0))

        grads, _ = loss_gradients(params, batch, labels, bank, alpha)
        analytic = params_to_vector(grads)

        def loss_at(vec: np.ndarray) -> float:
            candidate = vector_to_params(vec, params)
            total = 0.0
            for row, label in zip(batch, labels):
                g, j = bank.grouping.class_to_group[int(label)]
                x_c, x_f = forward(candidate, row, g)
                total += ddr_loss(
                    x_c, x_f, bank.coarse[:, g], bank.fine[g][:, j], alpha
                )
            return total / len(batch)

        numeric = finite_difference_gradient(loss_at, params_to_vector(params))
        scale = max(
            float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-12
        )
        worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
    return CheckResult("gradients", worst < tol, f"max relative error {worst:.2e}")


def reachability_partition(adjacency: np.ndarray) -> list[tuple[int, ...]]:
    """Transitive-closure partition by repeated boolean matrix squaring."""
    k = adjacency.shape[0]
    reach = adjacency.astype(bool) | np.eye(k, dtype=bool)
    while True:
        closed = reach | (reach @ reach)
        if np.array_equal(closed, reach):
            break
        reach = closed
    seen = np.zeros(k, dtype=bool)
    groups = []
    for i in range(k):
        if seen[i]:
            continue
        members = np.nonzero(reach[i])[0]
        seen[members] = True
        groups.append(tuple(int(m) for m in members))
    return groups


def grouping_check(seed: int = 0, graphs: int = 200, max_nodes: int = 200) -> CheckResult:
    """DFS grouping equals the brute-force reachability partition."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for trial in range(graphs):
        n = int(rng.integers(2, max_nodes + 1))
        density = float(rng.uniform(0.0, 3.0 / n))
        upper = rng.random((n, n)) < density
        adj = np.triu(upper, 1)
        adj = adj | adj.T
        got = connected_groups(adj)
        want = Grouping.from_groups(reachability_partition(adj))
        if got.groups != want.groups:
            return CheckResult(
                "grouping-oracle", False, f"mismatch on trial {trial} (n={n})"
            )
    return CheckResult("grouping-oracle", True, f"{graphs} random graphs agree")


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        etf_geometry_check(seed),
        angle_separation_check(seed + 1),
        gradient_check(seed + 2),
        grouping_check(seed + 3),
    ]
