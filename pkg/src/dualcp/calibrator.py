"""Coarse-to-fine feature calibrators and their training loop.

One coarse MLP maps a raw feature x (dim d) to a unit vector x_c; one fine
MLP per group maps the concatenation [x, x_c] (dim 2d) to a unit vector
x_f. Training regresses the dot products x_c . coarse_target and
x_f . fine_target onto 1 with an alpha-weighted squared loss, using plain
mini-batch SGD (momentum, weight decay on weights only, per-epoch cosine
learning-rate decay). Gradients are analytic, including the path through
the output L2 normalization and through x_c into the fine branch input.

Each MLP applies a fixed sqrt(d) gain to its input: embedding vectors have
O(1/sqrt(d)) coordinates, and without the gain the fan-in-scaled init
leaves pre-activations near zero and training crawls.

All randomness comes from NumPy's PCG64 generator, so a seed pins the
parameter trajectory bit-exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import errors, _blockio
from .prototypes import DualPrototypeBank
from .store import EmbeddingSet

PARAMS_MAGIC = b"DCC1"
_NORM_GUARD = 1e-9

ACTIVATIONS = ("softplus", "tanh")


@dataclass(frozen=True)
class CalibratorArch:
    """MLP shape: depth, hidden width as a multiple of the feature dim."""

    num_layers: int = 2
    hidden_multiplier: float = 1.0
    activation: str = "softplus"

    def __post_init__(self):
        if self.num_layers < 1:
            raise errors.BadConfig(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_multiplier <= 0:
            raise errors.BadConfig("hidden_multiplier must be positive")
        if self.activation not in ACTIVATIONS:
            raise errors.BadConfig(f"unknown activation {self.activation!r}")

    def layer_sizes(self, dim_in: int, dim: int) -> list[tuple[int, int]]:
        """(out, in) per layer; hidden width scales with the feature dim."""
        if self.num_layers == 1:
            return [(dim, dim_in)]
        hidden = max(1, round(self.hidden_multiplier * dim))
        sizes = [(hidden, dim_in)]
        sizes += [(hidden, hidden)] * (self.num_layers - 2)
        sizes.append((dim, hidden))
        return sizes


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    lr0: float = 0.1
    epochs: int = 20
    batch_size: int = 128
    weight_decay: float = 2e-4
    momentum: float = 0.9
    seed: int = 0
    warm_start: bool = False
    arch: CalibratorArch = field(default_factory=CalibratorArch)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise errors.BadConfig(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr0 <= 0:
            raise errors.BadConfig(f"lr0 must be positive, got {self.lr0}")
        if self.epochs < 1:
            raise errors.BadConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise errors.BadConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0 or self.momentum < 0:
            raise errors.BadConfig("weight_decay and momentum must be >= 0")


@dataclass
class Mlp:
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]  # each (out,)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class CalibratorParams:
    """One coarse MLP plus one fine MLP per group."""

    coarse: Mlp
    fine: list[Mlp]
    arch: CalibratorArch
    dim: int

    @property
    def num_groups(self) -> int:
        return len(self.fine)

    def copy(self) -> "CalibratorParams":
        return CalibratorParams(
            self.coarse.copy(), [m.copy() for m in self.fine], self.arch, self.dim
        )


def _init_mlp(sizes, rng: np.random.Generator) -> Mlp:
    weights, biases = [], []
    for out_dim, in_dim in sizes:
        bound = 1.0 / math.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return Mlp(weights, biases)


def init_params(
    num_groups: int, dim: int, arch: CalibratorArch, rng: np.random.Generator
) -> CalibratorParams:
    """Fan-in scaled uniform weights, zero biases, from the given generator."""
    coarse = _init_mlp(arch.layer_sizes(dim, dim), rng)
    fine = [_init_mlp(arch.layer_sizes(2 * dim, dim), rng) for _ in range(num_groups)]
    return CalibratorParams(coarse=coarse, fine=fine, arch=arch, dim=dim)


def _zeros_like_params(params: CalibratorParams) -> CalibratorParams:
    def zeros(mlp: Mlp) -> Mlp:
        return Mlp([np.zeros_like(w) for w in mlp.weights], [np.zeros_like(b) for b in mlp.biases])

    return CalibratorParams(
        zeros(params.coarse), [zeros(m) for m in params.fine], params.arch, params.dim
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return np.tanh(z)


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return _sigmoid(z)
    return 1.0 - np.tanh(z) ** 2


def _input_gain(dim: int) -> float:
    return math.sqrt(dim)


def _mlp_forward(mlp: Mlp, x: np.ndarray, activation: str, gain: float):
    """Batched forward; returns output and the caches needed for backprop."""
    h = gain * x
    inputs, preacts = [], []
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if i < last:
            preacts.append(z)
            h = _activation(activation, z)
        else:
            h = z
    return h, (inputs, preacts)


def _mlp_backward(mlp: Mlp, caches, delta: np.ndarray, activation: str, gain: float):
    """Gradients w.r.t. weights/biases (summed over the batch) and the
    unscaled input."""
    inputs, preacts = caches
    grad_w = [None] * len(mlp.weights)
    grad_b = [None] * len(mlp.biases)
    for i in range(len(mlp.weights) - 1, -1, -1):
        grad_w[i] = delta.T @ inputs[i]
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ mlp.weights[i]
        if i > 0:
            delta = delta * _activation_grad(activation, preacts[i - 1])
    return Mlp(grad_w, grad_b), gain * delta


def _normalize_batch(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(raw, axis=1)
    if float(norms.min()) < _NORM_GUARD:
        raise errors.DegenerateOutput(
            f"calibrator output norm {float(norms.min()):.3g} below guard"
        )
    return raw / norms[:, None], norms


def forward_batch(
    params: CalibratorParams, x: np.ndarray, groups: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Unit coarse and fine outputs for a batch with per-row group indices."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise errors.NonFinite("calibrator input contains NaN or Inf")
    act = params.arch.activation
    gain = _input_gain(params.dim)
    raw_c, _ = _mlp_forward(params.coarse, x, act, gain)
    x_c, _ = _normalize_batch(raw_c)
    x_f = np.empty_like(x_c)
    u = np.concatenate([x, x_c], axis=1)
    for g in np.unique(groups):
        idx = np.nonzero(groups == g)[0]
        raw_f, _ = _mlp_forward(params.fine[int(g)], u[idx], act, gain)
        x_f[idx], _ = _normalize_batch(raw_f)
    return x_c, x_f


def forward(
    params: CalibratorParams, x: np.ndarray, group: int
) -> tuple[np.ndarray, np.ndarray]:
    """Single-vector convenience wrapper around :func:`forward_batch`."""
    if not 0 <= group < params.num_groups:
        raise errors.BadConfig(f"group {group} not in [0, {params.num_groups})")
    x_c, x_f = forward_batch(params, np.asarray(x)[None, :], np.array([group]))
    return x_c[0], x_f[0]


def coarse_forward_batch(params: CalibratorParams, x: np.ndarray) -> np.ndarray:
    """Unit coarse outputs only (the fine branch needs a chosen group)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise errors.NonFinite("calibrator input contains NaN or Inf")
    raw_c, _ = _mlp_forward(
        params.coarse, x, params.arch.activation, _input_gain(params.dim)
    )
    return _normalize_batch(raw_c)[0]


def fine_forward_batch(
    params: CalibratorParams, x: np.ndarray, x_c: np.ndarray, group: int
) -> np.ndarray:
    u = np.concatenate([x, x_c], axis=1)
    raw_f, _ = _mlp_forward(
        params.fine[group], u, params.arch.activation, _input_gain(params.dim)
    )
    return _normalize_batch(raw_f)[0]


def ddr_loss(x_c, x_f, coarse_target, fine_target, alpha: float) -> float:
    """alpha*(x_c . e_c - 1)^2 + (1-alpha)*(x_f . e_f - 1)^2."""
    dot_c = float(np.dot(x_c, coarse_target))
    dot_f = float(np.dot(x_f, fine_target))
    return alpha * (dot_c - 1.0) ** 2 + (1.0 - alpha) * (dot_f - 1.0) ** 2


def loss_gradients(
    params: CalibratorParams,
    x: np.ndarray,
    labels: np.ndarray,
    bank: DualPrototypeBank,
    alpha: float,
) -> tuple[CalibratorParams, float]:
    """Gradients of the mean batch loss w.r.t. every parameter, plus the loss.

    The fine branch consumes x_c, so its loss term backpropagates into the
    coarse MLP as well; with alpha = 1 the fine parameters get exactly zero
    gradient because the only path into them carries weight (1 - alpha).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    act = params.arch.activation
    group_of = np.array([bank.grouping.class_to_group[int(c)][0] for c in labels])
    index_in_group = np.array(
        [bank.grouping.class_to_group[int(c)][1] for c in labels]
    )

    grads = _zeros_like_params(params)
    gain = _input_gain(params.dim)

    # coarse forward
    raw_c, cache_c = _mlp_forward(params.coarse, x, act, gain)
    x_c, norms_c = _normalize_batch(raw_c)
    e_c = bank.coarse[:, group_of].T  # (n, d)
    dot_c = np.einsum("ij,ij->i", x_c, e_c)

    u = np.concatenate([x, x_c], axis=1)
    d_xc = 2.0 * alpha * (dot_c - 1.0)[:, None] * e_c

    # fine branches, grouped
    total_loss = float(alpha * np.sum((dot_c - 1.0) ** 2))
    for g in np.unique(group_of):
        g = int(g)
        idx = np.nonzero(group_of == g)[0]
        raw_f, cache_f = _mlp_forward(params.fine[g], u[idx], act, gain)
        x_f, norms_f = _normalize_batch(raw_f)
        e_f = bank.fine[g][:, index_in_group[idx]].T  # (m, d)
        dot_f = np.einsum("ij,ij->i", x_f, e_f)
        total_loss += float((1.0 - alpha) * np.sum((dot_f - 1.0) ** 2))

        d_xf = 2.0 * (1.0 - alpha) * (dot_f - 1.0)[:, None] * e_f
        # through the L2 normalization of the fine output
        d_raw_f = (d_xf - np.einsum("ij,ij->i", x_f, d_xf)[:, None] * x_f) / norms_f[:, None]
        grad_f, d_u = _mlp_backward(params.fine[g], cache_f, d_raw_f, act, gain)
        for gw, w in zip(grads.fine[g].weights, grad_f.weights):
            gw += w
        for gb, b in zip(grads.fine[g].biases, grad_f.biases):
            gb += b
        d_xc[idx] += d_u[:, params.dim :]

    # through the L2 normalization of the coarse output, then the coarse MLP
    d_raw_c = (d_xc - np.einsum("ij,ij->i", x_c, d_xc)[:, None] * x_c) / norms_c[:, None]
    grad_c, _ = _mlp_backward(params.coarse, cache_c, d_raw_c, act, gain)
    grads.coarse = grad_c

    inv_n = 1.0 / n
    for mlp in (grads.coarse, *grads.fine):
        for w in mlp.weights:
            w *= inv_n
        for b in mlp.biases:
            b *= inv_n
    return grads, total_loss * inv_n


@dataclass
class TrainResult:
    params: CalibratorParams
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / epochs))


def train_domain(
    data: EmbeddingSet,
    bank: DualPrototypeBank,
    cfg: TrainConfig,
    initial: CalibratorParams | None = None,
) -> TrainResult:
    """Mini-batch SGD over one domain's rows.

    Fresh fan-in initialization unless ``initial`` params are supplied
    (warm start). Per-epoch shuffling and the init share one seeded PCG64
    stream, so equal seeds give bit-identical trajectories.
    """
    if len(data) < 1:
        raise errors.Empty("training data has no rows")
    if data.num_classes != bank.num_classes:
        raise errors.BadConfig(
            f"data has {data.num_classes} classes, bank has {bank.num_classes}"
        )
    x = data.features.astype(np.float64)
    labels = data.labels.astype(np.int64)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if initial is None:
        params = init_params(bank.num_groups, data.dim, cfg.arch, rng)
    else:
        params = initial.copy()

    velocity = _zeros_like_params(params)
    n = len(data)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grads, loss = loss_gradients(params, x[idx], labels[idx], bank, cfg.alpha)
            if not math.isfinite(loss):
                raise errors.Diverged(f"loss became {loss} at epoch {epoch}")
            epoch_loss += loss * len(idx)
            for p_mlp, g_mlp, v_mlp in zip(
                (params.coarse, *params.fine),
                (grads.coarse, *grads.fine),
                (velocity.coarse, *velocity.fine),
            ):
                for w, gw, vw in zip(p_mlp.weights, g_mlp.weights, v_mlp.weights):
                    gw += cfg.weight_decay * w  # decay on weights only
                    vw *= cfg.momentum
                    vw += gw
                    w -= lr * vw
                for b, gb, vb in zip(p_mlp.biases, g_mlp.biases, v_mlp.biases):
                    vb *= cfg.momentum
                    vb += gb
                    b -= lr * vb
        epoch_losses.append(epoch_loss / n)
    return TrainResult(params=params, epoch_losses=epoch_losses)


# --- flattening helpers (used by checkpoints and gradient checking) ---

def iter_arrays(params: CalibratorParams):
    """All parameter arrays in the fixed checkpoint order."""
    for mlp in (params.coarse, *params.fine):
        for w, b in zip(mlp.weights, mlp.biases):
            yield w
            yield b


def params_to_vector(params: CalibratorParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in iter_arrays(params)])


def vector_to_params(vec: np.ndarray, template: CalibratorParams) -> CalibratorParams:
    out = template.copy()
    offset = 0
    for arr in iter_arrays(out):
        size = arr.size
        arr[...] = vec[offset : offset + size].reshape(arr.shape)
        offset += size
    if offset != vec.size:
        raise errors.BadConfig("vector length does not match parameter count")
    return out


def save_params(params: CalibratorParams, path, meta: dict | None = None) -> None:
    """JSON header (arch, group count, dim, extra meta) + f64 blocks.

    Blocks follow :func:`iter_arrays` order: coarse layers (weight, bias)
    then each group's fine layers.
    """
    header = {
        "version": 1,
        "dim": params.dim,
        "num_groups": params.num_groups,
        "arch": {
            "num_layers": params.arch.num_layers,
            "hidden_multiplier": params.arch.hidden_multiplier,
            "activation": params.arch.activation,
        },
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        _blockio.write_header(f, PARAMS_MAGIC, header)
        _write_params_blocks(f, params)


def _write_params_blocks(f, params: CalibratorParams) -> None:
    for arr in iter_arrays(params):
        _blockio.write_block(f, arr if arr.ndim == 2 else arr[None, :])


def _read_params_blocks(f, dim: int, num_groups: int, arch: CalibratorArch) -> CalibratorParams:
    def read_mlp(dim_in: int) -> Mlp:
        weights, biases = [], []
        for out_dim, in_dim in arch.layer_sizes(dim_in, dim):
            w = _blockio.read_block(f)
            b = _blockio.read_block(f)
            if w.shape != (out_dim, in_dim) or b.shape != (1, out_dim):
                raise errors.BadManifest("checkpoint block shape mismatch")
            weights.append(w)
            biases.append(b[0])
        return Mlp(weights, biases)

    coarse = read_mlp(dim)
    fine = [read_mlp(2 * dim) for _ in range(num_groups)]
    return CalibratorParams(coarse=coarse, fine=fine, arch=arch, dim=dim)


def load_params(path) -> tuple[CalibratorParams, dict]:
    with open(path, "rb") as f:
        header = _blockio.read_header(f, PARAMS_MAGIC)
        try:
            arch = CalibratorArch(
                num_layers=int(header["arch"]["num_layers"]),
                hidden_multiplier=float(header["arch"]["hidden_multiplier"]),
                activation=str(header["arch"]["activation"]),
            )
            dim = int(header["dim"])
            num_groups = int(header["num_groups"])
        except (KeyError, TypeError, ValueError) as exc:
            raise errors.BadManifest(f"checkpoint header invalid: {exc}") from exc
        params = _read_params_blocks(f, dim, num_groups, arch)
    return params, dict(header.get("meta", {}))
