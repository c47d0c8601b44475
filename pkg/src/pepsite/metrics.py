"""Evaluation suite: thresholded confusion metrics, ROC/PR curves, hull-volume
ratio, distance loss at inference, burial (delta RSA) statistics, and recall
against interface size."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .geometry import convex_hull_volume
from .loss import DegenerateInstanceError, distance_field, struct_loss

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_THRESHOLD",
    "ConfusionCounts",
    "CurvePoints",
    "UndefinedCurveError",
    "DeltaRsaStats",
    "WilcoxonResult",
    "MAX_ASA",
    "confusion_at_threshold",
    "roc_curve",
    "roc_auc",
    "pr_curve",
    "tpvr",
    "tpvr_at_threshold",
    "distance_loss_eval",
    "relative_sasa",
    "delta_rsa",
    "delta_rsa_stats",
    "wilcoxon_signed_rank",
    "bootstrap_ci",
    "recall_vs_interface_ratio",
]

DEFAULT_THRESHOLD = 0.8


class UndefinedCurveError(ValueError):
    """Only one class present."""


def _select(p, y, mask):
    p = np.asarray(p, dtype=float)
    y = np.asarray(y).astype(np.int64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch {p.shape} vs {y.shape}")
    if mask is not None:
        m = np.asarray(mask).astype(bool)
        p, y = p[m], y[m]
    return p, y


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        pr, rc = self.precision, self.recall
        return 2 * pr * rc / (pr + rc) if pr + rc > 0 else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "precision": self.precision, "recall": self.recall,
                "f1": self.f1, "accuracy": self.accuracy}


def confusion_at_threshold(p, y, mask=None, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Counts with residues called binding when ``p >= threshold``."""
    p, y = _select(p, y, mask)
    if p.size == 0:
        raise ValueError("no real residues to evaluate")
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(int((pred & pos).sum()), int((pred & ~pos).sum()),
                           int((~pred & pos).sum()), int((~pred & ~pos).sum()))


@dataclass
class CurvePoints:
    thresholds: np.ndarray   # descending; first entry is +inf (nothing called positive)
    xs: np.ndarray
    ys: np.ndarray
    area: float

    def trapezoid(self) -> float:
        return float(np.sum(np.diff(self.xs) * (self.ys[1:] + self.ys[:-1]) / 2.0))

    def to_csv(self, x_name: str, y_name: str) -> str:
        lines = [f"threshold,{x_name},{y_name}"]
        for t, x, y in zip(self.thresholds, self.xs, self.ys):
            lines.append(f"{t!r},{x!r},{y!r}")
        return "\n".join(lines) + "\n"


def _sweep(p, y):
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(ps) != 0), len(ps) - 1]
    tps = np.cumsum(ys)[ends]
    fps = (ends + 1) - tps
    return ps[ends], tps, fps


def roc_auc(p, y, mask=None) -> float:
    """Area under the ROC curve, ties counted one half.

    Computed from integer rank sums, so it is exact up to the final division.
    """
    p, y = _select(p, y, mask)
    n_pos = int((y == 1).sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedCurveError("ROC undefined with a single class")
    order = np.argsort(p, kind="mergesort")
    ps = p[order]
    # doubled mid-ranks are integers: first + last (1-based) of each tie block
    starts = np.r_[0, np.flatnonzero(np.diff(ps) != 0) + 1]
    ends = np.r_[starts[1:], len(ps)]
    ranks2 = np.empty(len(ps), dtype=np.int64)
    for s, e in zip(starts, ends):
        ranks2[s:e] = (s + 1) + e
    pos_sorted = y[order] == 1
    r2 = int(ranks2[pos_sorted].sum())
    # 2*U = sum of doubled ranks - n_pos (n_pos + 1)
    u2 = r2 - n_pos * (n_pos + 1)
    return float(Fraction(u2, 2 * n_pos * n_neg))


def roc_curve(p, y, mask=None) -> CurvePoints:
    p, y = _select(p, y, mask)
    n_pos = int((y == 1).sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedCurveError("ROC undefined with a single class")
    thr, tps, fps = _sweep(p, y)
    return CurvePoints(np.r_[np.inf, thr], np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos],
                       roc_auc(p, y))


def pr_curve(p, y, mask=None) -> CurvePoints:
    """Precision against recall at every distinct score.

    The curve starts at recall 0 with the precision of the highest threshold
    and the area is the trapezoid rule over the stored points.
    """
    p, y = _select(p, y, mask)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == len(y):
        raise UndefinedCurveError("PR curve undefined with a single class")
    thr, tps, fps = _sweep(p, y)
    prec = tps / (tps + fps)
    rec = tps / n_pos
    curve = CurvePoints(np.r_[np.inf, thr], np.r_[0.0, rec], np.r_[prec[0], prec], 0.0)
    curve.area = curve.trapezoid()
    return curve


# -- hull volume ratio -----------------------------------------------------------

def tpvr(pred_points, tp_points) -> float | None:
    """Hull volume of true-positive centers over that of all predicted centers.

    ``None`` when the predicted hull is degenerate, except that two identical
    degenerate sets give 1.0.
    """
    pred = np.asarray(pred_points, dtype=float).reshape(-1, 3)
    tp = np.asarray(tp_points, dtype=float).reshape(-1, 3)
    pred_rows = {tuple(r) for r in pred}
    if any(tuple(r) not in pred_rows for r in tp):
        raise ValueError("true-positive set is not a subset of the predicted set")
    v_pred = convex_hull_volume(pred)
    if v_pred.degenerate:
        if len(tp) and {tuple(r) for r in tp} == pred_rows:
            return 1.0
        return None
    v_tp = convex_hull_volume(tp)
    return min(1.0, v_tp.volume / v_pred.volume)


def tpvr_at_threshold(p, y, centers, threshold: float = DEFAULT_THRESHOLD) -> float | None:
    """TPVR for one instance; ``centers`` are per-real-residue mass centers."""
    n = len(centers)
    p = np.asarray(p, dtype=float)[:n]
    y = np.asarray(y)[:n]
    pred = p >= threshold
    tp = pred & (y == 1)
    return tpvr(np.asarray(centers)[pred], np.asarray(centers)[tp])


def distance_loss_eval(p, y, coords, mask=None, threshold: float = DEFAULT_THRESHOLD,
                       mode: str = "raw") -> float | None:
    """Distance penalty of one prediction; ``None`` without binding residues.

    ``mode='raw'`` weights by probability, ``'thresholded'`` by the 0/1 call
    at ``threshold``.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y)
    n = len(coords)
    if mode == "thresholded":
        p = (p >= threshold).astype(float)
    elif mode != "raw":
        raise ValueError(f"unknown mode {mode!r}")
    try:
        fld = distance_field(coords, y[:n])
    except DegenerateInstanceError:
        return None
    if mask is None:
        mask = np.zeros(len(p), dtype=np.int8)
        mask[:n] = 1
    return struct_loss(p, y, fld, mask)


# -- burial ------------------------------------------------------------------------

# theoretical maximum accessible surface area per residue type, Angstrom^2
MAX_ASA = {
    "ALA": 129.0, "ARG": 274.0, "ASN": 195.0, "ASP": 193.0, "CYS": 167.0,
    "GLN": 225.0, "GLU": 223.0, "GLY": 104.0, "HIS": 224.0, "ILE": 197.0,
    "LEU": 201.0, "LYS": 236.0, "MET": 224.0, "PHE": 240.0, "PRO": 159.0,
    "SER": 155.0, "THR": 172.0, "TRP": 285.0, "TYR": 263.0, "VAL": 174.0,
}
GENERIC_MAX_ASA = 200.0


def _max_asa(resname: str) -> float:
    if resname in MAX_ASA:
        return MAX_ASA[resname]
    log.warning("no max ASA for residue %s; using %.0f", resname, GENERIC_MAX_ASA)
    return GENERIC_MAX_ASA


def relative_sasa(areas: np.ndarray, resnames: Sequence[str]) -> np.ndarray:
    """Residue SASA over its type maximum, capped at 1."""
    mx = np.array([_max_asa(r) for r in resnames])
    return np.minimum(np.asarray(areas) / mx, 1.0)


def delta_rsa(comp, peptide_chain: str, protein_chain: str, probe: float = 1.4,
              n_points: int = 960) -> np.ndarray:
    """Bound minus unbound RSA for every residue of ``protein_chain``.

    The unbound state is the same complex with the peptide chain deleted;
    negative values mean burial.
    """
    from .geometry import _sasa_areas, vdw_radius

    prot = comp.chain(protein_chain)
    comp.chain(peptide_chain)
    atoms, owner, is_pep, query = [], [], [], []
    for ch in comp.chains:
        for ri, res in enumerate(ch.residues):
            for a in res.atoms:
                atoms.append(a)
                owner.append(ri if ch.id == protein_chain else -1)
                is_pep.append(ch.id == peptide_chain)
                query.append(ch.id == protein_chain)
    coords = np.array([a.coord for a in atoms])
    radii = np.array([vdw_radius(a.element) for a in atoms]) + probe
    owner = np.array(owner)
    is_pep = np.array(is_pep)
    query = np.array(query)

    bound = _sasa_areas(coords, radii, n_points, query)
    keep = ~is_pep
    unbound = np.zeros(len(atoms))
    unbound[keep] = _sasa_areas(coords[keep], radii[keep], n_points, query[keep])

    n = len(prot.residues)
    res_b = np.zeros(n)
    res_u = np.zeros(n)
    sel = owner >= 0
    np.add.at(res_b, owner[sel], bound[sel])
    np.add.at(res_u, owner[sel], unbound[sel])
    names = [r.name for r in prot.residues]
    return relative_sasa(res_b, names) - relative_sasa(res_u, names)


@dataclass(frozen=True)
class WilcoxonResult:
    w: float            # sum of ranks of positive differences
    p_value: float
    effect_r: float
    z: float
    n: int              # nonzero differences
    exact: bool
    degenerate: bool = False


def _exact_null_cdf(ranks2: np.ndarray) -> np.ndarray:
    """Counts of every attainable doubled-rank sum under random signs."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(differences, alternative: str = "less", zero_method: str = "pratt",
                         exact: bool | None = None, correction: bool = True) -> WilcoxonResult:
    """Wilcoxon signed-rank test.

    Parameters
    ----------
    differences : array_like
        Paired differences.
    alternative : {"less", "greater", "two-sided"}
        ``less`` tests for a shift below zero.
    zero_method : {"pratt", "wilcox"}
        ``pratt`` ranks zeros with the rest and then drops them;
        ``wilcox`` drops zeros before ranking.
    exact : bool, optional
        Enumerate the null distribution; default when at most 25 nonzero
        differences remain.
    correction : bool
        Continuity correction of 0.5 in the normal approximation.
    """
    d = np.asarray(differences, dtype=float).reshape(-1)
    if d.size == 0:
        raise ValueError("need at least one difference")
    if zero_method == "wilcox":
        d = d[d != 0]
    elif zero_method != "pratt":
        raise ValueError(f"unknown zero_method {zero_method!r}")
    if alternative not in ("less", "greater", "two-sided"):
        raise ValueError(f"unknown alternative {alternative!r}")

    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    sorted_abs = absd[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_abs) != 0) + 1] if d.size else np.array([], int)
    ends = np.r_[starts[1:], d.size]
    ranks2 = np.empty(d.size, dtype=np.int64)
    for s, e in zip(starts, ends):
        ranks2[order[s:e]] = (s + 1) + e
    nz = d != 0
    ranks2 = ranks2[nz]
    signs = d[nz] > 0
    m = int(nz.sum())
    if m == 0:
        return WilcoxonResult(0.0, 1.0, 0.0, 0.0, 0, bool(exact), degenerate=True)

    w2 = int(ranks2[signs].sum())
    w = w2 / 2.0
    mean = ranks2.sum() / 4.0
    sd = math.sqrt(float((ranks2.astype(float) ** 2).sum()) / 16.0)
    z_raw = w - mean
    if correction:
        if alternative == "less":
            z_raw += 0.5
        elif alternative == "greater":
            z_raw -= 0.5
        else:
            z_raw -= 0.5 * np.sign(z_raw)
    z = z_raw / sd if sd > 0 else 0.0

    use_exact = (m <= 25) if exact is None else exact
    if use_exact:
        counts = _exact_null_cdf(ranks2)
        total = 2 ** m
        lower = Fraction(int(sum(counts[: w2 + 1])), total)
        upper = Fraction(int(sum(counts[w2:])), total)
        if alternative == "less":
            p = float(lower)
        elif alternative == "greater":
            p = float(upper)
        else:
            p = float(min(Fraction(1), 2 * min(lower, upper)))
    else:
        if alternative == "less":
            p = float(norm.cdf(z))
        elif alternative == "greater":
            p = float(norm.sf(z))
        else:
            p = float(min(1.0, 2 * norm.sf(abs(z))))
    r = min(1.0, abs(z) / math.sqrt(m))
    return WilcoxonResult(w, min(max(p, 0.0), 1.0), r, float(z), m, use_exact)


def bootstrap_ci(values, statistic: str = "mean", n_boot: int = 10000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean or median."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("bootstrap of an empty sample")
    fn = {"mean": np.mean, "median": np.median}[statistic]
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    chunk = max(1, 2_000_000 // v.size)
    for start in range(0, n_boot, chunk):
        k = min(chunk, n_boot - start)
        idx = rng.integers(0, v.size, size=(k, v.size))
        stats[start:start + k] = fn(v[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


@dataclass
class DeltaRsaStats:
    per_entry_pos_mean: np.ndarray
    per_entry_neg_mean: np.ndarray
    diff_mean: float
    diff_median: float
    wilcoxon_w: float
    p_value: float
    effect_r: float
    ci_mean: tuple[float, float]
    ci_median: tuple[float, float]
    n_entries: int = 0

    def as_dict(self) -> dict:
        return {
            "n_entries": self.n_entries,
            "pos_mean": _nanmean(self.per_entry_pos_mean),
            "neg_mean": _nanmean(self.per_entry_neg_mean),
            "diff_mean": self.diff_mean,
            "diff_median": self.diff_median,
            "wilcoxon_w": self.wilcoxon_w,
            "p_value": self.p_value,
            "effect_r": self.effect_r,
            "ci_mean": list(self.ci_mean),
            "ci_median": list(self.ci_median),
        }


def _nanmean(v) -> float | None:
    v = np.asarray(v, dtype=float)
    return float(v.mean()) if v.size else None


def delta_rsa_stats(entries: Iterable[tuple[np.ndarray, np.ndarray]], n_boot: int = 10000,
                    seed: int = 0) -> DeltaRsaStats | None:
    """Per-entry burial of predicted positives against predicted negatives.

    ``entries`` yields ``(delta_rsa, predicted_positive)`` per complex.
    Entries lacking either class are skipped; ``None`` if nothing is left.
    """
    pos_means, neg_means = [], []
    for drsa, pred in entries:
        drsa = np.asarray(drsa, dtype=float)
        pred = np.asarray(pred).astype(bool)
        if pred.any() and (~pred).any():
            pos_means.append(drsa[pred].mean())
            neg_means.append(drsa[~pred].mean())
    if not pos_means:
        return None
    pos = np.array(pos_means)
    neg = np.array(neg_means)
    diff = pos - neg
    wt = wilcoxon_signed_rank(diff, alternative="less", zero_method="pratt")
    return DeltaRsaStats(pos, neg, float(diff.mean()), float(np.median(diff)), wt.w,
                         wt.p_value, wt.effect_r,
                         bootstrap_ci(diff, "mean", n_boot, seed),
                         bootstrap_ci(diff, "median", n_boot, seed), len(diff))


@dataclass(frozen=True)
class RatioBin:
    lo: float
    hi: float
    mean_recall: float
    count: int


def recall_vs_interface_ratio(instances: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray]],
                              threshold: float = DEFAULT_THRESHOLD,
                              bin_width: float = 0.05) -> list[RatioBin]:
    """Mean per-complex recall in equal-width bins of interface ratio.

    ``instances`` yields ``(p, y, mask)``; complexes without positives are
    skipped.  Only occupied bins are returned, in increasing order.
    """
    sums: dict[int, list[float]] = {}
    for p, y, mask in instances:
        p, y = _select(p, y, mask)
        n_if = int((y == 1).sum())
        if n_if == 0:
            continue
        ratio = n_if / len(y)
        recall = confusion_at_threshold(p, y, None, threshold).recall
        b = min(int(math.floor(ratio / bin_width + 1e-9)), int(round(1 / bin_width)) - 1)
        sums.setdefault(b, []).append(recall)
    return [RatioBin(round(b * bin_width, 10), round((b + 1) * bin_width, 10),
                     float(np.mean(v)), len(v)) for b, v in sorted(sums.items())]
