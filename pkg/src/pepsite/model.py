"""Spline-activation (KAN) layers, a dense baseline, and the per-residue
probability head, with analytic backward passes in numpy.

A KAN layer maps ``x`` (in_dim) to ``y`` (out_dim) through one learnable
univariate function per edge::

    y_o = sum_i  w_oi * silu(x_i) + sum_b c_oib * B_b(clamp(x_i))

where ``B_b`` are B-spline basis functions on a fixed uniform grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SplineGrid",
    "cox_de_boor",
    "bspline_basis",
    "bspline_basis_derivative",
    "KanLayer",
    "DenseLayer",
    "InputScaler",
    "KanStack",
    "Tape",
    "StaleTapeError",
    "ShapeError",
    "kan_forward",
    "kan_backward",
    "dense_forward",
    "dense_backward",
    "stack_forward",
    "stack_forward_cached",
    "stack_backward",
    "mlp_forward",
    "mlp_backward",
    "init_params",
    "build_stack",
    "count_params",
    "matched_mlp_width",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_text",
    "parse_checkpoint",
    "silu",
    "sigmoid",
]


class ShapeError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    """A backward pass was given a tape recorded before a parameter update."""


def sigmoid(x):
    # numerically stable logistic
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * sigmoid(x)


def _silu_grad(x):
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


# -- B-splines -----------------------------------------------------------------

@dataclass(frozen=True)
class SplineGrid:
    """Uniform knot grid on ``[lo, hi]`` extended by ``degree`` knots per side."""

    grid_size: int = 8
    degree: int = 3
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if not self.hi > self.lo:
            raise ValueError("empty grid range")

    @property
    def knots(self) -> np.ndarray:
        h = (self.hi - self.lo) / self.grid_size
        k = np.arange(-self.degree, self.grid_size + self.degree + 1)
        return self.lo + k * h

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.degree


def cox_de_boor(x, knots, degree: int, last_interval: int | None = None) -> np.ndarray:
    """B-spline basis values by the Cox-de Boor recursion.

    Parameters
    ----------
    x : array_like
        Evaluation points, any shape.
    knots : array_like
        Nondecreasing knot vector ``t_0 .. t_m``.
    degree : int
        Spline degree (0 gives interval indicators).
    last_interval : int, optional
        Degree-0 interval used for ``x`` equal to its right end, so that the
        basis stays a partition of unity at the upper edge of the range.

    Returns
    -------
    ndarray, shape ``x.shape + (m - degree,)``
    """
    t = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    m = len(t) - 1
    idx = np.searchsorted(t, flat, side="right") - 1
    if last_interval is not None:
        idx = np.where(flat >= t[last_interval + 1], last_interval, idx)
    basis = np.zeros((flat.size, m))
    ok = (idx >= 0) & (idx < m)
    basis[np.flatnonzero(ok), idx[ok]] = 1.0
    for p in range(1, degree + 1):
        left_den = t[p:m] - t[: m - p]
        right_den = t[p + 1: m + 1] - t[1: m - p + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (flat[:, None] - t[: m - p]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[p + 1: m + 1] - flat[:, None]) / right_den, 0.0)
        basis = left * basis[:, :-1] + right * basis[:, 1:]
    return basis.reshape(x.shape + (basis.shape[-1],))


def _clamp(x, grid: SplineGrid):
    return np.clip(x, grid.lo, grid.hi)


def bspline_basis(x, grid: SplineGrid) -> np.ndarray:
    """Basis values at ``x`` (clamped into the grid range); sums to one."""
    xc = _clamp(np.asarray(x, dtype=float), grid)
    return cox_de_boor(xc, grid.knots, grid.degree,
                       last_interval=grid.degree + grid.grid_size - 1)


def bspline_basis_derivative(x, grid: SplineGrid) -> np.ndarray:
    """d/dx of :func:`bspline_basis` at clamped ``x`` (zero outside the range)."""
    x = np.asarray(x, dtype=float)
    xc = _clamp(x, grid)
    k = grid.degree
    t = grid.knots
    lower = cox_de_boor(xc, t, k - 1, last_interval=k + grid.grid_size - 1)
    # lower has n_basis + 1 columns
    span = t[k:] - t[:-k]
    a = lower[..., :-1] / span[:-1]
    b = lower[..., 1:] / span[1:]
    d = k * (a - b)
    inside = (x >= grid.lo) & (x <= grid.hi)
    return d * inside[..., None]


# -- layers --------------------------------------------------------------------

@dataclass
class KanLayer:
    in_dim: int
    out_dim: int
    grid: SplineGrid
    spline_coeffs: np.ndarray
    base_weights: np.ndarray
    use_base: bool = True
    version: int = 0

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, grid: SplineGrid, use_base: bool = True):
        return cls(in_dim, out_dim, grid,
                   np.zeros((out_dim, in_dim, grid.n_basis)),
                   np.zeros((out_dim, in_dim)), use_base)

    @property
    def n_params(self) -> int:
        return self.spline_coeffs.size + (self.base_weights.size if self.use_base else 0)

    def params(self) -> dict[str, np.ndarray]:
        out = {"spline_coeffs": self.spline_coeffs}
        if self.use_base:
            out["base_weights"] = self.base_weights
        return out


@dataclass
class DenseLayer:
    in_dim: int
    out_dim: int
    weight: np.ndarray
    bias: np.ndarray
    activate: bool = True
    version: int = 0

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activate: bool = True):
        return cls(in_dim, out_dim, np.zeros((out_dim, in_dim)), np.zeros(out_dim), activate)

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Tape:
    layer_id: int
    version: int
    x: np.ndarray
    cache: dict


def _as_batch(x, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != in_dim:
        raise ShapeError(f"expected input of width {in_dim}, got shape {x.shape}")
    return x2, single


def _check_tape(layer, tape: Tape):
    if tape.layer_id != id(layer) or tape.version != layer.version:
        raise StaleTapeError("tape does not belong to the current layer parameters")


def kan_forward(layer: KanLayer, x) -> tuple[np.ndarray, Tape]:
    """Forward pass over a single input vector or a batch of rows."""
    x2, single = _as_batch(x, layer.in_dim)
    n = x2.shape[0]
    nb = layer.grid.n_basis
    basis = bspline_basis(x2, layer.grid)                    # (n, in, nb)
    flat = basis.reshape(n, layer.in_dim * nb)
    out = flat @ layer.spline_coeffs.reshape(layer.out_dim, -1).T
    act = None
    if layer.use_base:
        act = silu(x2)
        out = out + act @ layer.base_weights.T
    tape = Tape(id(layer), layer.version, x2, {"basis": flat, "act": act, "single": single})
    return (out[0] if single else out), tape


def kan_backward(layer: KanLayer, tape: Tape, upstream):
    """Gradients of a scalar objective given ``upstream = dL/d(output)``.

    Returns ``(input_grad, {"spline_coeffs": ..., "base_weights": ...})``.
    """
    _check_tape(layer, tape)
    x2 = tape.x
    g = np.asarray(upstream, dtype=float).reshape(x2.shape[0], layer.out_dim)
    n = x2.shape[0]
    nb = layer.grid.n_basis
    coeffs = layer.spline_coeffs.reshape(layer.out_dim, -1)
    grads = {"spline_coeffs": (g.T @ tape.cache["basis"]).reshape(layer.spline_coeffs.shape)}
    dbasis = bspline_basis_derivative(x2, layer.grid)        # (n, in, nb)
    dx = ((g @ coeffs).reshape(n, layer.in_dim, nb) * dbasis).sum(axis=-1)
    if layer.use_base:
        grads["base_weights"] = g.T @ tape.cache["act"]
        dx = dx + (g @ layer.base_weights) * _silu_grad(x2)
    else:
        grads["base_weights"] = np.zeros_like(layer.base_weights)
    if tape.cache["single"]:
        dx = dx[0]
    return dx, grads


def dense_forward(layer: DenseLayer, x) -> tuple[np.ndarray, Tape]:
    x2, single = _as_batch(x, layer.in_dim)
    pre = x2 @ layer.weight.T + layer.bias
    out = silu(pre) if layer.activate else pre
    tape = Tape(id(layer), layer.version, x2, {"pre": pre, "single": single})
    return (out[0] if single else out), tape


def dense_backward(layer: DenseLayer, tape: Tape, upstream):
    _check_tape(layer, tape)
    x2 = tape.x
    g = np.asarray(upstream, dtype=float).reshape(x2.shape[0], layer.out_dim)
    if layer.activate:
        g = g * _silu_grad(tape.cache["pre"])
    grads = {"weight": g.T @ x2, "bias": g.sum(axis=0)}
    dx = g @ layer.weight
    if tape.cache["single"]:
        dx = dx[0]
    return dx, grads


# -- stack ---------------------------------------------------------------------

@dataclass
class InputScaler:
    """Per-feature standardization, clipped to +-3 sd and mapped onto [-1, 1]."""

    mean: np.ndarray
    std: np.ndarray
    clip: float = 3.0

    @classmethod
    def identity(cls, dim: int):
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, rows: np.ndarray):
        rows = np.asarray(rows, dtype=float)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return np.clip(z, -self.clip, self.clip) / self.clip


@dataclass
class KanStack:
    mode: str                      # "kan" | "mlp"
    input_dim: int
    hidden: tuple[int, ...]
    layers: list
    head_weight: np.ndarray
    head_bias: np.ndarray          # shape (1,)
    grid: SplineGrid
    scaler: InputScaler
    use_base: bool = True
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers) + self.head_weight.size + 1

    def parameters(self) -> dict[str, np.ndarray]:
        """Named views of every trainable array (updates in place are seen)."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layers.{i}.{k}"] = v
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def touch(self):
        """Mark parameters as modified; outstanding tapes become stale."""
        for layer in self.layers:
            layer.version += 1


def count_params(mode: str, input_dim: int, hidden: Sequence[int], grid: SplineGrid,
                 use_base: bool = True) -> int:
    dims = [input_dim, *hidden]
    total = 0
    for a, b in zip(dims[:-1], dims[1:]):
        if mode == "kan":
            total += a * b * (grid.n_basis + (1 if use_base else 0))
        else:
            total += a * b + b
    return total + dims[-1] + 1


def matched_mlp_width(input_dim: int, kan_hidden: Sequence[int], grid: SplineGrid,
                      use_base: bool = True) -> int:
    """Uniform MLP width (same depth) whose parameter count is closest to the KAN's."""
    target = count_params("kan", input_dim, kan_hidden, grid, use_base)
    depth = len(kan_hidden)
    best, best_err = 1, math.inf
    for h in range(1, 20 * max(kan_hidden) * (grid.n_basis + 1) + 2):
        err = abs(count_params("mlp", input_dim, [h] * depth, grid) - target)
        if err < best_err:
            best, best_err = h, err
        elif count_params("mlp", input_dim, [h] * depth, grid) > target:
            break
    return best


def build_stack(mode: str, input_dim: int, hidden: Sequence[int] = (64, 64), *,
                grid_size: int = 8, degree: int = 3, grid_range=(-1.0, 1.0),
                use_base: bool = True, seed: int = 0, match_params: bool = True) -> KanStack:
    """Construct and initialize a stack.

    In ``mlp`` mode with ``match_params`` the hidden widths are replaced by a
    uniform width whose parameter count matches the KAN built from ``hidden``.
    """
    if mode not in ("kan", "mlp"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = SplineGrid(grid_size, degree, float(grid_range[0]), float(grid_range[1]))
    hidden = tuple(int(h) for h in hidden)
    if mode == "mlp" and match_params:
        w = matched_mlp_width(input_dim, hidden, grid, use_base)
        hidden = (w,) * len(hidden)
    dims = [input_dim, *hidden]
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        if mode == "kan":
            layers.append(KanLayer.zeros(a, b, grid, use_base))
        else:
            layers.append(DenseLayer.zeros(a, b))
    stack = KanStack(mode, input_dim, hidden, layers, np.zeros(dims[-1]), np.zeros(1),
                     grid, InputScaler.identity(input_dim), use_base, seed)
    return init_params(stack, seed)


def init_params(stack: KanStack, seed: int) -> KanStack:
    """Seeded initialization, in place; returns the stack."""
    rng = np.random.default_rng(seed)
    for layer in stack.layers:
        scale = 1.0 / math.sqrt(layer.in_dim)
        if isinstance(layer, KanLayer):
            nb = layer.grid.n_basis
            layer.spline_coeffs[...] = rng.normal(0.0, 0.1 / math.sqrt(nb), layer.spline_coeffs.shape)
            layer.base_weights[...] = rng.normal(0.0, scale, layer.base_weights.shape)
            if not layer.use_base:
                layer.base_weights[...] = 0.0
        else:
            layer.weight[...] = rng.normal(0.0, scale, layer.weight.shape)
            layer.bias[...] = 0.0
    stack.head_weight[...] = rng.normal(0.0, 1.0 / math.sqrt(stack.head_weight.size),
                                        stack.head_weight.shape)
    stack.head_bias[...] = 0.0
    stack.seed = seed
    stack.touch()
    return stack


def _inputs_of(features) -> np.ndarray:
    return features.inputs() if hasattr(features, "inputs") else np.asarray(features, dtype=float)


def stack_forward_cached(stack: KanStack, features, mask):
    """Probabilities plus the cache needed by :func:`stack_backward`."""
    x = _inputs_of(features)
    mask = np.asarray(mask).astype(bool)
    if x.ndim != 2 or x.shape[1] != stack.input_dim:
        raise ShapeError(f"stack expects width {stack.input_dim}, got {x.shape}")
    if x.shape[0] != mask.shape[0]:
        raise ShapeError("mask length does not match feature rows")
    h = stack.scaler.transform(x[mask])
    tapes = []
    for layer in stack.layers:
        fwd = kan_forward if isinstance(layer, KanLayer) else dense_forward
        h, tape = fwd(layer, h)
        tapes.append(tape)
    logits = h @ stack.head_weight + stack.head_bias[0]
    p_real = sigmoid(logits)
    p = np.zeros(mask.shape[0])
    p[mask] = p_real
    cache = {"mask": mask, "tapes": tapes, "last": h, "p_real": p_real}
    return p, cache


def stack_forward(stack: KanStack, features, mask) -> np.ndarray:
    """Per-residue binding probabilities; exactly 0 at masked positions."""
    return stack_forward_cached(stack, features, mask)[0]


def stack_backward(stack: KanStack, cache, grad_p) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dL/dp`` over all (padded) positions."""
    mask = cache["mask"]
    p = cache["p_real"]
    g_logit = np.asarray(grad_p, dtype=float)[mask] * p * (1.0 - p)
    grads = {
        "head.weight": cache["last"].T @ g_logit,
        "head.bias": np.array([g_logit.sum()]),
    }
    g = np.outer(g_logit, stack.head_weight)
    for i in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[i]
        bwd = kan_backward if isinstance(layer, KanLayer) else dense_backward
        g, lg = bwd(layer, cache["tapes"][i], g)
        for k, v in lg.items():
            name = f"layers.{i}.{k}"
            if k == "base_weights" and not layer.use_base:
                continue
            grads[name] = v
    return grads


def mlp_forward(stack: KanStack, features, mask) -> np.ndarray:
    if stack.mode != "mlp":
        raise ValueError("not an MLP stack")
    return stack_forward(stack, features, mask)


def mlp_backward(stack: KanStack, cache, grad_p) -> dict[str, np.ndarray]:
    if stack.mode != "mlp":
        raise ValueError("not an MLP stack")
    return stack_backward(stack, cache, grad_p)


# -- checkpoints ---------------------------------------------------------------
#
# Text format, one header line per key (``key=value``), then for each array:
#     @<name> <comma separated shape>
#     <space separated repr() values>
# repr() of a float64 round-trips bit-exactly.

CHECKPOINT_MAGIC = "#pepsite-checkpoint v1"


def checkpoint_text(stack: KanStack) -> str:
    lines = [
        CHECKPOINT_MAGIC,
        f"mode={stack.mode}",
        f"input_dim={stack.input_dim}",
        f"hidden={','.join(map(str, stack.hidden))}",
        f"degree={stack.grid.degree}",
        f"grid_size={stack.grid.grid_size}",
        f"grid_range={stack.grid.lo!r},{stack.grid.hi!r}",
        f"use_base={int(stack.use_base)}",
        f"seed={stack.seed}",
    ]
    for k in sorted(stack.meta):
        lines.append(f"meta.{k}={stack.meta[k]}")
    arrays = dict(stack.parameters())
    if stack.mode == "kan" and not stack.use_base:
        for i, layer in enumerate(stack.layers):
            arrays[f"layers.{i}.base_weights"] = layer.base_weights
    arrays["scaler.mean"] = stack.scaler.mean
    arrays["scaler.std"] = stack.scaler.std
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=float)
        lines.append(f"@{name} {','.join(map(str, arr.shape))}")
        lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> KanStack:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise ValueError("not a pepsite checkpoint")
    header: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("@"):
            name, shape_s = line[1:].split(" ", 1)
            shape = tuple(int(s) for s in shape_s.split(",") if s)
            vals = lines[i + 1].split() if i + 1 < len(lines) else []
            arrays[name] = np.array([float(v) for v in vals], dtype=float).reshape(shape)
            i += 2
            continue
        if line.strip():
            k, _, v = line.partition("=")
            header[k] = v
        i += 1
    lo, hi = (float(v) for v in header["grid_range"].split(","))
    hidden = tuple(int(h) for h in header["hidden"].split(",") if h)
    stack = build_stack(header["mode"], int(header["input_dim"]), hidden,
                        grid_size=int(header["grid_size"]), degree=int(header["degree"]),
                        grid_range=(lo, hi), use_base=bool(int(header["use_base"])),
                        seed=int(header["seed"]), match_params=False)
    targets = dict(stack.parameters())
    if stack.mode == "kan" and not stack.use_base:
        for j, layer in enumerate(stack.layers):
            targets[f"layers.{j}.base_weights"] = layer.base_weights
    for name, arr in targets.items():
        if name not in arrays or arrays[name].shape != arr.shape:
            raise ValueError(f"checkpoint array {name} missing or misshapen")
        arr[...] = arrays[name]
    stack.scaler = InputScaler(arrays["scaler.mean"], arrays["scaler.std"])
    stack.meta = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    stack.touch()
    return stack


def save_checkpoint(stack: KanStack, path) -> None:
    Path(path).write_text(checkpoint_text(stack))


def load_checkpoint(path) -> KanStack:
    return parse_checkpoint(Path(path).read_text())
