"""Deterministic training: Adam updates, epoch loop with best-by-AUC
checkpointing, config files, and an end-to-end finite-difference gradient
check."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import FeatureMatrix, LabeledPair
from .loss import DegenerateInstanceError, DistanceField, distance_field, total_loss
from .metrics import UndefinedCurveError, roc_auc
from .model import (
    InputScaler,
    KanStack,
    build_stack,
    stack_backward,
    stack_forward,
    stack_forward_cached,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainInstance",
    "OptimizerState",
    "NumericalError",
    "DivergenceError",
    "TrainResult",
    "GradCheckReport",
    "adam_step",
    "make_instances",
    "train_model",
    "evaluate_loss",
    "predict",
    "gradient_check",
    "parse_config_text",
    "config_to_text",
    "log_to_csv",
    "CapacityComparison",
    "compare_kan_mlp",
]


class NumericalError(FloatingPointError):
    """Non-finite gradient or loss."""


class DivergenceError(NumericalError):
    def __init__(self, msg: str, last_good: KanStack | None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    lr: float = 1e-3
    lam: float = 0.5
    mode: str = "kan"
    loss_mode: str = "composite"
    hidden: tuple[int, ...] = (64, 64)
    grid_size: int = 8
    degree: int = 3
    use_base: bool = True
    patience: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in ("kan", "mlp"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss_mode not in ("composite", "ce_only", "hard"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


# -- config files ---------------------------------------------------------------
#
#   # comment
#   key = value
#
# Keys are TrainConfig fields (``lambda`` is accepted for ``lam``); tuples are
# comma separated, booleans are true/false/1/0.

_ALIASES = {"lambda": "lam", "loss": "loss_mode"}


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{name}: not a boolean: {raw!r}")
    if "tuple" in str(kind):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def parse_config_text(text: str, allowed: dict | None = None) -> dict:
    """Parse ``key = value`` lines; unknown keys raise ``KeyError``.

    ``allowed`` maps key to a type (defaults to the TrainConfig fields).
    """
    if allowed is None:
        allowed = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        key = _ALIASES.get(key, key)
        if key not in allowed:
            raise KeyError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, val, allowed[key])
    return out


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- instances --------------------------------------------------------------------

@dataclass
class TrainInstance:
    ident: str
    x: np.ndarray                    # (padded_len, input_dim)
    y: np.ndarray
    mask: np.ndarray
    field: DistanceField | None


def make_instances(pairs: Sequence[LabeledPair], features: Sequence[FeatureMatrix]) -> list[TrainInstance]:
    out = []
    for pair, fm in zip(pairs, features):
        try:
            fld = distance_field(pair.heavy_atoms, pair.real_labels)
        except DegenerateInstanceError:
            fld = None
        out.append(TrainInstance(pair.instance_id, fm.inputs(), pair.labels.astype(float),
                                 pair.mask.astype(np.int8), fld))
    return out


# -- optimizer --------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, ident: str = "") -> OptimizerState:
    """One bias-corrected Adam update applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params or params[name].shape != np.shape(g):
            raise ValueError(f"gradient {name} does not match any parameter")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name} (instance {ident or '?'})")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.first_moment.setdefault(name, np.zeros_like(params[name]))
        v = state.second_moment.setdefault(name, np.zeros_like(params[name]))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# -- training loop -----------------------------------------------------------------

LOG_FIELDS = ("epoch", "instances", "ce", "struct", "total", "val_auc", "val_total")


@dataclass
class TrainResult:
    stack: KanStack                 # best by validation AUC
    final: KanStack
    log: list[dict]
    best_epoch: int
    best_val_auc: float | None


def _instance_grads(stack: KanStack, inst: TrainInstance, cfg: TrainConfig):
    p, cache = stack_forward_cached(stack, inst.x, inst.mask)
    lb = total_loss(p, inst.y, inst.field, cfg.lam, inst.mask, cfg.loss_mode)
    return lb, stack_backward(stack, cache, lb.grad)


def evaluate_loss(stack: KanStack, instances: Sequence[TrainInstance], lam: float,
                  loss_mode: str = "composite") -> dict:
    """Mean ce/struct/total over instances and pooled AUC."""
    ce = st = tot = 0.0
    ps, ys = [], []
    for inst in instances:
        p = stack_forward(stack, inst.x, inst.mask)
        lb = total_loss(p, inst.y, inst.field, lam, inst.mask, loss_mode)
        ce += lb.ce
        st += lb.struct
        tot += lb.total
        m = inst.mask.astype(bool)
        ps.append(p[m])
        ys.append(inst.y[m])
    n = max(len(instances), 1)
    out = {"ce": ce / n, "struct": st / n, "total": tot / n, "auc": None}
    if instances:
        try:
            out["auc"] = roc_auc(np.concatenate(ps), np.concatenate(ys))
        except UndefinedCurveError:
            pass
    return out


def predict(stack: KanStack, instances: Sequence[TrainInstance]) -> list[np.ndarray]:
    return [stack_forward(stack, inst.x, inst.mask) for inst in instances]


def _copy_params(stack: KanStack) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in stack.parameters().items()}


def train_model(train: Sequence[TrainInstance], val: Sequence[TrainInstance],
                config: TrainConfig, stack: KanStack | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a stack one instance-batch at a time.

    Epoch 0 of the log is the untrained model.  Each later row reports the
    training-set losses after that epoch's updates and the pooled validation
    AUC.  The returned ``stack`` holds the parameters of the best validation
    AUC (earliest on ties); without a usable validation set the lowest
    training loss is used.
    """
    if not train:
        raise ValueError("empty training set")
    cfg = config
    input_dim = train[0].x.shape[1]
    if stack is None:
        stack = build_stack(cfg.mode, input_dim, cfg.hidden, grid_size=cfg.grid_size,
                            degree=cfg.degree, use_base=cfg.use_base, seed=cfg.seed)
        rows = np.concatenate([t.x[t.mask.astype(bool)] for t in train])
        stack.scaler = InputScaler.fit(rows)
    stack.meta.setdefault("loss_mode", cfg.loss_mode)
    stack.meta.setdefault("lambda", repr(cfg.lam))
    params = stack.parameters()
    opt = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)

    history: list[dict] = []

    def record(epoch: int) -> dict:
        tr = evaluate_loss(stack, train, cfg.lam, cfg.loss_mode)
        va = evaluate_loss(stack, val, cfg.lam, cfg.loss_mode) if val else None
        row = {"epoch": epoch, "instances": len(train), "ce": tr["ce"], "struct": tr["struct"],
               "total": tr["total"], "val_auc": va["auc"] if va else None,
               "val_total": va["total"] if va else None}
        if not math.isfinite(row["total"]):
            raise DivergenceError(f"training loss became {row['total']} at epoch {epoch}",
                                  best_stack())
        history.append(row)
        if on_epoch:
            on_epoch(row)
        return row

    best = {"score": None, "epoch": 0, "params": _copy_params(stack)}

    def score(row):
        if row["val_auc"] is not None:
            return (row["val_auc"], 0.0)
        return (-math.inf, -row["total"])

    def best_stack():
        s = copy.deepcopy(stack)
        for k, v in s.parameters().items():
            v[...] = best["params"][k]
        s.touch()
        return s

    row = record(0)
    best["score"] = score(row)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                _, grads = _instance_grads(stack, train[idx], cfg)
                for k, g in grads.items():
                    acc[k] = acc[k] + g if k in acc else g.copy()
            for k in acc:
                acc[k] /= len(batch)
            try:
                adam_step(params, acc, opt, ident=train[batch[0]].ident)
            except NumericalError as exc:
                raise DivergenceError(str(exc), best_stack()) from None
            stack.touch()
        row = record(epoch)
        sc = score(row)
        if sc > best["score"]:
            best.update(score=sc, epoch=epoch, params=_copy_params(stack))
            stale = 0
        else:
            stale += 1
            if row["val_auc"] is not None and stale >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break

    final = copy.deepcopy(stack)
    out = best_stack()
    best_auc = best["score"][0] if best["score"][0] != -math.inf else None
    return TrainResult(out, final, history, best["epoch"], best_auc)


def log_to_csv(history: Sequence[dict]) -> str:
    lines = [",".join(LOG_FIELDS)]
    for row in history:
        vals = []
        for k in LOG_FIELDS:
            v = row.get(k)
            vals.append("" if v is None else (str(v) if isinstance(v, int) else repr(float(v))))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# -- gradient check ------------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    checked: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def lines(self) -> list[str]:
        return [f"{k}: {v:.3e}" for k, v in sorted(self.errors.items())]


def gradient_check(stack: KanStack, inst: TrainInstance, tolerance: float = 1e-5,
                   lam: float = 0.5, loss_mode: str = "composite", step: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0,
                   backward: Callable | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients of the full loss with central
    differences.

    The error of a tensor is ``max|analytic - numeric|`` divided by the larger
    of the two gradients' max magnitudes (floored at 1e-12).  ``max_entries``
    samples that many entries per tensor; ``backward`` substitutes the
    analytic gradient routine (used to test that failures are caught).
    """
    backward = backward or stack_backward

    def loss_at() -> float:
        p = stack_forward(stack, inst.x, inst.mask)
        return total_loss(p, inst.y, inst.field, lam, inst.mask, loss_mode).total

    p, cache = stack_forward_cached(stack, inst.x, inst.mask)
    lb = total_loss(p, inst.y, inst.field, lam, inst.mask, loss_mode)
    analytic = backward(stack, cache, lb.grad)
    rng = np.random.default_rng(seed)
    errors = {}
    checked = 0
    for name, arr in stack.parameters().items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            up = loss_at()
            flat[i] = old - step
            down = loss_at()
            flat[i] = old
            num[j] = (up - down) / (2 * step)
        ana = np.asarray(analytic[name]).reshape(-1)[idx]
        scale = max(np.abs(ana).max(), np.abs(num).max(), 1e-12)
        errors[name] = float(np.abs(ana - num).max() / scale)
        checked += len(idx)
    stack.touch()
    return GradCheckReport(errors, tolerance, checked)


# -- KAN versus MLP -----------------------------------------------------------------

@dataclass
class CapacityComparison:
    kan_log: list[dict]
    mlp_log: list[dict]
    kan_params: int
    mlp_params: int
    target_ce: float                 # MLP training ce after its last epoch
    kan_epoch: int | None            # first KAN epoch at or below target_ce

    @property
    def passed(self) -> bool:
        return self.kan_epoch is not None and self.kan_epoch <= len(self.mlp_log) - 1

    def summary(self) -> str:
        reached = "never" if self.kan_epoch is None else f"epoch {self.kan_epoch}"
        return (f"kan ({self.kan_params} params) reaches the mlp final ce "
                f"{self.target_ce:.6f} ({self.mlp_params} params, "
                f"{len(self.mlp_log) - 1} epochs) at {reached}")


def compare_kan_mlp(train: Sequence[TrainInstance], val: Sequence[TrainInstance],
                    config: TrainConfig) -> CapacityComparison:
    """Train a KAN and a parameter-matched MLP with the same settings and
    find the first KAN epoch whose training ce is at most the MLP's final
    training ce."""
    runs = {}
    for mode in ("kan", "mlp"):
        cfg = dataclasses.replace(config, mode=mode, patience=config.epochs + 1)
        runs[mode] = train_model(train, val, cfg)
    target = runs["mlp"].log[-1]["ce"]
    hit = next((r["epoch"] for r in runs["kan"].log if r["ce"] <= target), None)
    return CapacityComparison(runs["kan"].log, runs["mlp"].log, runs["kan"].final.n_params,
                              runs["mlp"].final.n_params, target, hit)
