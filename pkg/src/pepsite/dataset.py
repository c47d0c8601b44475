"""Instance construction: chain-pair filtering, 6 A interface labels, label
windows, train/validation splits, and per-residue feature encodings."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import neighbor_pairs
from .structio import Complex

log = logging.getLogger(__name__)

__all__ = [
    "PEPTIDE_PAD",
    "PROTEIN_PAD",
    "FilterRules",
    "LabeledPair",
    "FeatureMatrix",
    "SplitManifest",
    "CoverageError",
    "EmbeddingFormatError",
    "filter_complexes",
    "label_interface",
    "expand_labels",
    "split_dataset",
    "encode_features",
    "load_external_embeddings",
    "parse_external_embeddings",
    "write_external_embeddings",
    "ALPHABET",
    "PHYSCHEM_TABLE",
]

PEPTIDE_PAD = 50
PROTEIN_PAD = 500

# 20 canonical residues in alphabetical one-letter order, then X
ALPHABET = "ACDEFGHIKLMNPQRSTVWY" + "X"


class CoverageError(ValueError):
    """External embeddings do not cover every real residue."""


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FilterRules:
    min_peptide_exclusive: int = 10
    max_peptide: int = 50
    max_protein_exclusive: int = 500
    max_xray_resolution: float = 2.5


def _pair_rejection(comp: Complex, pep_len: int, prot_len: int, rules: FilterRules) -> str | None:
    if pep_len <= rules.min_peptide_exclusive:
        return "peptide_too_short"
    if pep_len > rules.max_peptide:
        return "peptide_too_long"
    if prot_len < 1:
        return "protein_empty"
    if prot_len >= rules.max_protein_exclusive:
        return "protein_too_long"
    if (comp.method == "xray" and comp.resolution is not None
            and comp.resolution > rules.max_xray_resolution):
        return "resolution"
    return None


def filter_complexes(complexes: Iterable[Complex], rules: FilterRules | None = None,
                     rejections: Counter | None = None) -> list[tuple[Complex, str, str]]:
    """Every ordered (peptide chain, protein chain) combination passing the
    size and resolution rules.

    NMR entries skip the resolution rule.  ``rejections`` (if given) counts
    rejected chain combinations by rule name.
    """
    rules = rules or FilterRules()
    out = []
    for comp in complexes:
        for pep in comp.chains:
            for prot in comp.chains:
                if pep.id == prot.id:
                    continue
                why = _pair_rejection(comp, len(pep), len(prot), rules)
                if why is None:
                    out.append((comp, pep.id, prot.id))
                else:
                    log.debug("%s %s/%s rejected: %s", comp.pdb_id, pep.id, prot.id, why)
                    if rejections is not None:
                        rejections[why] += 1
    return out


@dataclass
class LabeledPair:
    """One peptide/protein chain instance with padded interface labels.

    ``labels`` and ``mask`` have the padded protein length; ``centers`` and
    ``heavy_atoms`` cover only the real residues.
    """

    pdb_id: str
    peptide_chain: str
    protein_chain: str
    peptide_seq: str
    protein_seq: str
    labels: np.ndarray
    mask: np.ndarray
    residue_keys: list[tuple[int, str]]
    centers: np.ndarray
    heavy_atoms: list[np.ndarray]

    @property
    def n_residues(self) -> int:
        return len(self.residue_keys)

    @property
    def instance_id(self) -> str:
        return f"{self.pdb_id}_{self.peptide_chain}_{self.protein_chain}"

    @property
    def real_labels(self) -> np.ndarray:
        return self.labels[: self.n_residues]


def label_interface(pair: tuple[Complex, str, str], cutoff: float = 6.0,
                    pad: int | None = PROTEIN_PAD) -> LabeledPair:
    """Label protein residues with any heavy atom within ``cutoff`` of a
    peptide heavy atom (inclusive).

    ``pad=None`` disables padding.
    """
    comp, pep_id, prot_id = pair
    pep = comp.chain(pep_id)
    prot = comp.chain(prot_id)
    if not len(pep) or not len(prot):
        raise ValueError(f"{comp.pdb_id}: empty chain in pair {pep_id}/{prot_id}")
    n = len(prot)
    length = n if pad is None else pad
    if n > length:
        raise ValueError(f"{comp.pdb_id}:{prot_id} has {n} residues, exceeds padding {length}")

    heavy = [r.heavy_coords for r in prot.residues]
    owner = np.concatenate([np.full(len(h), i) for i, h in enumerate(heavy)])
    prot_xyz = np.concatenate(heavy)
    pep_xyz = np.concatenate([r.heavy_coords for r in pep.residues])

    labels = np.zeros(length, dtype=np.int8)
    for i, _ in neighbor_pairs(prot_xyz, pep_xyz, cutoff):
        labels[owner[i]] = 1
    mask = np.zeros(length, dtype=np.int8)
    mask[:n] = 1
    return LabeledPair(
        pdb_id=comp.pdb_id,
        peptide_chain=pep_id,
        protein_chain=prot_id,
        peptide_seq=pep.sequence,
        protein_seq=prot.sequence,
        labels=labels,
        mask=mask,
        residue_keys=[r.key for r in prot.residues],
        centers=np.array([r.mass_center for r in prot.residues]),
        heavy_atoms=heavy,
    )


def expand_labels(labels, window: int, mask=None) -> np.ndarray:
    """Dilate positive labels by ``window`` positions along the sequence.

    Only unmasked positives seed the dilation; masked outputs stay 0.
    """
    if window < 0:
        raise ValueError("window must be >= 0")
    labels = np.asarray(labels).astype(np.int8)
    mask = np.ones_like(labels) if mask is None else np.asarray(mask).astype(np.int8)
    seeds = (labels == 1) & (mask == 1)
    out = seeds.copy()
    for k in range(1, window + 1):
        out[k:] |= seeds[:-k]
        out[:-k] |= seeds[k:]
    out &= mask == 1
    return out.astype(np.int8)


@dataclass
class SplitManifest:
    seed: int
    train_ids: list[str]
    val_ids: list[str]

    def to_text(self) -> str:
        lines = [f"seed={self.seed}"]
        lines += [f"train {i}" for i in self.train_ids]
        lines += [f"val {i}" for i in self.val_ids]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        seed = None
        train, val = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("seed="):
                seed = int(line[5:])
                continue
            kind, _, ident = line.partition(" ")
            (train if kind == "train" else val).append(ident)
        if seed is None:
            raise ValueError("manifest without seed")
        return cls(seed, train, val)


def split_dataset(ids: Sequence[str], seed: int, train_fraction: float = 0.9) -> SplitManifest:
    """Seeded random split; ``floor(train_fraction * n)`` ids go to training.

    With two or more ids both sides keep at least one id.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    n = len(ids)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(train_fraction * n + 1e-9))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    else:
        n_train = n
    shuffled = [ids[i] for i in perm]
    return SplitManifest(seed, shuffled[:n_train], shuffled[n_train:])


# -- features ---------------------------------------------------------------------

# hydropathy (Kyte-Doolittle), charge at pH 7, polar, aromatic,
# molecular weight (Da), isoelectric point, residue volume (A^3)
_PHYSCHEM_RAW = {
    "A": (1.8, 0, 0, 0, 89.09, 6.00, 88.6),
    "C": (2.5, 0, 0, 0, 121.16, 5.07, 108.5),
    "D": (-3.5, -1, 1, 0, 133.10, 2.77, 111.1),
    "E": (-3.5, -1, 1, 0, 147.13, 3.22, 138.4),
    "F": (2.8, 0, 0, 1, 165.19, 5.48, 189.9),
    "G": (-0.4, 0, 0, 0, 75.07, 5.97, 60.1),
    "H": (-3.2, 0, 1, 1, 155.16, 7.59, 153.2),
    "I": (4.5, 0, 0, 0, 131.17, 6.02, 166.7),
    "K": (-3.9, 1, 1, 0, 146.19, 9.74, 168.6),
    "L": (3.8, 0, 0, 0, 131.17, 5.98, 166.7),
    "M": (1.9, 0, 0, 0, 149.21, 5.74, 162.9),
    "N": (-3.5, 0, 1, 0, 132.12, 5.41, 114.1),
    "P": (-1.6, 0, 0, 0, 115.13, 6.30, 112.7),
    "Q": (-3.5, 0, 1, 0, 146.15, 5.65, 143.8),
    "R": (-4.5, 1, 1, 0, 174.20, 10.76, 173.4),
    "S": (-0.8, 0, 1, 0, 105.09, 5.68, 89.0),
    "T": (-0.7, 0, 1, 0, 119.12, 5.60, 116.1),
    "V": (4.2, 0, 0, 0, 117.15, 5.96, 140.0),
    "W": (-0.9, 0, 0, 1, 204.23, 5.89, 227.8),
    "Y": (-1.3, 0, 1, 1, 181.19, 5.66, 193.6),
}
_PHYSCHEM_SCALE = np.array([4.5, 1.0, 1.0, 1.0, 200.0, 14.0, 230.0])


def _physchem_table() -> dict[str, np.ndarray]:
    table = {k: np.array(v, dtype=float) / _PHYSCHEM_SCALE for k, v in _PHYSCHEM_RAW.items()}
    table["X"] = np.mean(list(table.values()), axis=0)
    return table


PHYSCHEM_TABLE = _physchem_table()
SCHEMES = ("onehot", "physchem", "external")


@dataclass
class FeatureMatrix:
    rows: np.ndarray          # (padded_len, D)
    global_row: np.ndarray    # (D,)
    scheme: str

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def inputs(self) -> np.ndarray:
        """Per-residue network inputs: each row joined with the global row."""
        g = np.broadcast_to(self.global_row, self.rows.shape)
        return np.concatenate([self.rows, g], axis=1)


def encode_features(pair: LabeledPair, scheme: str = "onehot",
                    embeddings: dict[int, np.ndarray] | None = None) -> FeatureMatrix:
    """Per-residue features for the protein chain of ``pair``.

    ``embeddings`` (``external`` scheme) maps 0-based residue index to a
    vector, as read by :func:`load_external_embeddings`.
    """
    n = pair.n_residues
    length = len(pair.mask)
    seq = pair.protein_seq
    if scheme == "onehot":
        rows = np.zeros((length, len(ALPHABET)))
        for i, aa in enumerate(seq):
            rows[i, ALPHABET.index(aa if aa in ALPHABET else "X")] = 1.0
    elif scheme == "physchem":
        rows = np.zeros((length, 7))
        for i, aa in enumerate(seq):
            rows[i] = PHYSCHEM_TABLE.get(aa, PHYSCHEM_TABLE["X"])
    elif scheme == "external":
        if embeddings is None:
            raise ValueError("external scheme needs an embedding table")
        missing = [i for i in range(n) if i not in embeddings]
        if missing:
            raise CoverageError(f"{pair.instance_id}: no embedding for residues {missing}")
        dim = len(next(iter(embeddings.values())))
        rows = np.zeros((length, dim))
        for i in range(n):
            rows[i] = embeddings[i]
    else:
        raise ValueError(f"unknown feature scheme {scheme!r}")
    rows[n:] = 0.0
    return FeatureMatrix(rows, rows[:n].mean(axis=0), scheme)


# -- external embedding files -------------------------------------------------------
#
#   D=<dim>
#   <res_index> v1 ... vD
#
# res_index is the 0-based position in the protein chain.

def parse_external_embeddings(text: str) -> dict[int, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("D="):
        raise EmbeddingFormatError("missing 'D=<dim>' header")
    try:
        dim = int(lines[0][2:])
    except ValueError:
        raise EmbeddingFormatError(f"bad header {lines[0]!r}") from None
    table = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise EmbeddingFormatError(
                f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
        try:
            table[int(parts[0])] = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise EmbeddingFormatError(f"line {lineno}: {exc}") from None
    return table


def load_external_embeddings(path) -> dict[int, np.ndarray]:
    return parse_external_embeddings(Path(path).read_text())


def write_external_embeddings(table: dict[int, np.ndarray], path=None) -> str:
    dims = {len(v) for v in table.values()}
    if len(dims) != 1:
        raise EmbeddingFormatError(f"inconsistent dimensions {sorted(dims)}")
    lines = [f"D={dims.pop()}"]
    for k in sorted(table):
        lines.append(" ".join([str(k)] + [repr(float(v)) for v in table[k]]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
