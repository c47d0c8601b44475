"""PDB ingestion, the internal structure cache format, and prediction CSVs.

Only the first MODEL of a multi-model file is read.  Hydrogens, waters and
HETATM records never become atoms; alternate locations collapse to the
highest-occupancy conformer.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Atom",
    "Residue",
    "Chain",
    "Complex",
    "PdbParseError",
    "EmptyStructureError",
    "AlignmentError",
    "PredictionFormatError",
    "ParseStats",
    "THREE_TO_ONE",
    "parse_pdb",
    "read_pdb",
    "write_structure",
    "read_structure",
    "PredictionRow",
    "PredictionTable",
    "write_predictions",
    "read_predictions",
]

THREE_TO_ONE = {
    "ALA": "A", "ARG": "R", "ASN": "N", "ASP": "D", "CYS": "C",
    "GLN": "Q", "GLU": "E", "GLY": "G", "HIS": "H", "ILE": "I",
    "LEU": "L", "LYS": "K", "MET": "M", "PHE": "F", "PRO": "P",
    "SER": "S", "THR": "T", "TRP": "W", "TYR": "Y", "VAL": "V",
}

_WATER = {"HOH", "WAT", "DOD", "H2O"}
_HYDROGEN = {"H", "D"}


class PdbParseError(ValueError):
    """Malformed record in a PDB file."""


class EmptyStructureError(ValueError):
    """No usable ATOM records."""


class AlignmentError(ValueError):
    """Probability vector does not line up with the residues it describes."""


class PredictionFormatError(ValueError):
    """Invalid predictions CSV."""


@dataclass
class Atom:
    serial: int
    name: str
    element: str
    coord: np.ndarray
    occupancy: float = 1.0
    altloc: str = ""
    is_hetero: bool = False

    @property
    def is_heavy(self) -> bool:
        return self.element.upper() not in _HYDROGEN


@dataclass
class Residue:
    seq_id: int
    insertion_code: str
    name: str
    atoms: list[Atom]

    @property
    def key(self) -> tuple[int, str]:
        return (self.seq_id, self.insertion_code)

    @property
    def one_letter(self) -> str:
        return THREE_TO_ONE.get(self.name, "X")

    @property
    def heavy_coords(self) -> np.ndarray:
        """(n, 3) array of heavy-atom coordinates."""
        xyz = [a.coord for a in self.atoms if a.is_heavy]
        if not xyz:
            return np.zeros((0, 3))
        return np.asarray(xyz, dtype=float)

    @property
    def mass_center(self) -> np.ndarray:
        # unweighted mean of heavy atoms
        return self.heavy_coords.mean(axis=0)


@dataclass
class Chain:
    id: str
    residues: list[Residue]

    @property
    def sequence(self) -> str:
        return "".join(r.one_letter for r in self.residues)

    def __len__(self) -> int:
        return len(self.residues)


@dataclass
class Complex:
    pdb_id: str
    chains: list[Chain]
    resolution: float | None = None
    method: str | None = None  # "xray" | "nmr" | "other"

    def __post_init__(self):
        ids = [c.id for c in self.chains]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate chain ids in {self.pdb_id}: {ids}")
        if not self.pdb_id:
            raise ValueError("pdb_id must be nonempty")

    def chain(self, chain_id: str) -> Chain:
        for c in self.chains:
            if c.id == chain_id:
                return c
        raise KeyError(f"chain {chain_id!r} not in {self.pdb_id}")

    @property
    def chain_ids(self) -> list[str]:
        return [c.id for c in self.chains]

    def atoms(self) -> list[Atom]:
        return [a for c in self.chains for r in c.residues for a in r.atoms]


@dataclass
class ParseStats:
    """Counts of ATOM/HETATM records by fate."""

    kept: int = 0
    hydrogen: int = 0
    water: int = 0
    hetatm: int = 0
    altloc: int = 0
    later_model: int = 0

    @property
    def total(self) -> int:
        return (self.kept + self.hydrogen + self.water + self.hetatm
                + self.altloc + self.later_model)


def _infer_element(atom_name_field: str) -> str:
    # columns 13-14 hold the element for standard names; fall back to first letter
    letters = "".join(ch for ch in atom_name_field if ch.isalpha())
    if not letters:
        return ""
    if atom_name_field[:1].isalpha() and len(letters) >= 2 and atom_name_field[0] != " ":
        # four-character names like "HG21" or two-letter elements like "FE"
        two = atom_name_field[:2].strip().upper()
        if two in {"FE", "ZN", "MG", "CA", "CL", "BR", "NA", "MN", "CU", "NI", "CO", "SE"}:
            return two
        return letters[0].upper()
    return letters[0].upper()


def _altloc_rank(atom: Atom) -> tuple:
    # highest occupancy wins; ties prefer blank, then 'A', then alphabetical
    return (-atom.occupancy, 0 if atom.altloc == "" else 1, atom.altloc)


def parse_pdb(text: str, pdb_id: str | None = None,
              stats: ParseStats | None = None) -> Complex:
    """Parse fixed-column PDB text into a :class:`Complex`.

    Parameters
    ----------
    text : str
        Contents of a PDB file.
    pdb_id : str, optional
        Identifier to use when the file has no HEADER id.
    stats : ParseStats, optional
        Filled in with per-rule record counts when given.

    Raises
    ------
    PdbParseError
        A coordinate or numeric field cannot be read; the message names the
        1-based line number.
    EmptyStructureError
        The file contains no ATOM records.
    """
    stats = stats if stats is not None else ParseStats()
    header_id = None
    resolution = None
    method = None
    n_atom_records = 0
    n_models = 0
    inside_model = False
    # (chain, seq_id, icode) -> [resname, {atom_name: [Atom...]}] in file order
    residues: dict[tuple[str, int, str], list] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        rec = raw[:6]
        if rec.startswith("HEADER") and len(raw) >= 66:
            header_id = raw[62:66].strip() or None
        elif rec.startswith("EXPDTA"):
            desc = raw[10:].upper()
            if "X-RAY" in desc:
                method = "xray"
            elif "NMR" in desc:
                method = "nmr"
            else:
                method = "other"
        elif raw.startswith("REMARK   2 RESOLUTION."):
            tok = raw[22:].split()
            if tok:
                try:
                    resolution = float(tok[0])
                except ValueError:
                    resolution = None
        elif rec.startswith("MODEL"):
            n_models += 1
            inside_model = True
        elif rec.startswith("ENDMDL"):
            inside_model = False
        elif rec == "ATOM  " or rec == "HETATM":
            if rec == "ATOM  ":
                n_atom_records += 1
            # records inside the second and later MODEL blocks are skipped
            if inside_model and n_models > 1:
                stats.later_model += 1
                continue
            if rec == "HETATM":
                stats.hetatm += 1
                continue
            try:
                serial = int(raw[6:11]) if raw[6:11].strip() else 0
                name_field = raw[12:16]
                altloc = raw[16:17].strip()
                resname = raw[17:20].strip()
                chain_id = raw[21:22].strip()
                seq_id = int(raw[22:26])
                icode = raw[26:27].strip()
                x = float(raw[30:38])
                y = float(raw[38:46])
                z = float(raw[46:54])
                occ_field = raw[54:60].strip()
                occupancy = float(occ_field) if occ_field else 1.0
            except ValueError as exc:
                raise PdbParseError(f"line {lineno}: malformed ATOM record ({exc}): {raw!r}") from None
            if not all(math.isfinite(v) for v in (x, y, z)):
                raise PdbParseError(f"line {lineno}: non-finite coordinate: {raw!r}")
            if not 0.0 <= occupancy <= 1.0:
                raise PdbParseError(f"line {lineno}: occupancy {occupancy} outside [0, 1]")
            element = raw[76:78].strip().upper() or _infer_element(name_field)
            if resname in _WATER:
                stats.water += 1
                continue
            if element in _HYDROGEN:
                stats.hydrogen += 1
                continue
            atom = Atom(serial=serial, name=name_field.strip(), element=element,
                        coord=np.array([x, y, z], dtype=float), occupancy=occupancy,
                        altloc=altloc, is_hetero=False)
            key = (chain_id, seq_id, icode)
            entry = residues.setdefault(key, [resname, {}])
            entry[1].setdefault(atom.name, []).append(atom)

    if n_atom_records == 0:
        raise EmptyStructureError("no ATOM records found")

    chains: dict[str, list[Residue]] = {}
    for (chain_id, seq_id, icode), (resname, by_name) in residues.items():
        atoms = []
        for alts in by_name.values():
            best = min(alts, key=_altloc_rank)
            stats.altloc += len(alts) - 1
            atoms.append(best)
        stats.kept += len(atoms)
        chains.setdefault(chain_id, []).append(Residue(seq_id, icode, resname, atoms))

    chain_objs = []
    for cid, res in chains.items():
        res.sort(key=lambda r: (r.seq_id, r.insertion_code))
        chain_objs.append(Chain(cid, res))
    if not chain_objs:
        raise EmptyStructureError("no heavy protein atoms after filtering")
    return Complex(pdb_id=pdb_id or header_id or "UNKN", chains=chain_objs,
                   resolution=resolution, method=method)


def read_pdb(path, pdb_id: str | None = None, stats: ParseStats | None = None) -> Complex:
    """Parse a PDB file from disk; the file stem is the fallback id."""
    from pathlib import Path

    path = Path(path)
    text = path.read_text(errors="replace")
    comp = parse_pdb(text, pdb_id=None, stats=stats)
    if pdb_id is not None:
        comp.pdb_id = pdb_id
    elif comp.pdb_id == "UNKN":
        comp.pdb_id = path.stem
    return comp


# -- internal structure cache --------------------------------------------------
#
# Line-oriented text.  Header lines start with '#':
#     #pdb_id=1ABC
#     #resolution=2.1          (or "none")
#     #method=xray             (or "none")
# then one atom per line, whitespace separated:
#     chain res_seq icode resname atomname x y z element
# Blank chain ids and insertion codes are written as '-'.  Coordinates use
# repr() so a write/read cycle is bit exact.

def write_structure(comp: Complex) -> str:
    out = [
        f"#pdb_id={comp.pdb_id}",
        f"#resolution={'none' if comp.resolution is None else repr(comp.resolution)}",
        f"#method={comp.method or 'none'}",
    ]
    for ch in comp.chains:
        cid = ch.id or "-"
        for res in ch.residues:
            ic = res.insertion_code or "-"
            for a in res.atoms:
                x, y, z = (repr(float(v)) for v in a.coord)
                out.append(f"{cid} {res.seq_id} {ic} {res.name} {a.name} {x} {y} {z} {a.element}")
    return "\n".join(out) + "\n"


def read_structure(text: str) -> Complex:
    meta = {}
    chains: dict[str, dict[tuple[int, str], Residue]] = {}
    serial = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            meta[k.strip()] = v.strip()
            continue
        parts = line.split()
        if len(parts) != 9:
            raise PdbParseError(f"line {lineno}: expected 9 fields, got {len(parts)}")
        cid, seq, ic, resname, aname, x, y, z, elem = parts
        cid = "" if cid == "-" else cid
        ic = "" if ic == "-" else ic
        serial += 1
        try:
            atom = Atom(serial, aname, elem, np.array([float(x), float(y), float(z)]))
            key = (int(seq), ic)
        except ValueError as exc:
            raise PdbParseError(f"line {lineno}: {exc}") from None
        res_map = chains.setdefault(cid, {})
        if key not in res_map:
            res_map[key] = Residue(key[0], ic, resname, [])
        res_map[key].atoms.append(atom)
    res_ = meta.get("resolution", "none")
    method = meta.get("method", "none")
    return Complex(
        pdb_id=meta.get("pdb_id", "UNKN"),
        chains=[Chain(cid, list(rm.values())) for cid, rm in chains.items()],
        resolution=None if res_ == "none" else float(res_),
        method=None if method == "none" else method,
    )


# -- predictions CSV -------------------------------------------------------------

PREDICTION_HEADER = ["pdb_id", "protein_chain", "peptide_chain", "res_seq", "icode",
                     "probability", "label"]


@dataclass(frozen=True)
class PredictionRow:
    probability: float
    label: int | None


@dataclass
class PredictionTable:
    """Per-residue probabilities keyed by
    ``(pdb_id, protein_chain, peptide_chain, res_seq, icode)``."""

    rows: dict[tuple[str, str, str, int, str], PredictionRow] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def lookup(self, pdb_id: str, protein_chain: str, peptide_chain: str,
               residue_keys: Sequence[tuple[int, str]]) -> np.ndarray:
        """Probabilities for the given residues, in order; KeyError when absent."""
        out = np.empty(len(residue_keys))
        for i, (seq, ic) in enumerate(residue_keys):
            k = (pdb_id, protein_chain, peptide_chain, int(seq), ic)
            if k not in self.rows:
                raise KeyError(f"no prediction for {k}")
            out[i] = self.rows[k].probability
        return out


def write_predictions(pairs: Iterable[tuple[object, Sequence[float]]]) -> str:
    """Serialize per-residue probabilities for labeled pairs.

    ``pairs`` yields ``(LabeledPair, probs)`` where ``probs`` holds one value
    per real (unmasked) protein residue, or a padded vector whose masked tail
    is ignored.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for pair, probs in pairs:
        probs = np.asarray(probs, dtype=float)
        n = pair.n_residues
        if probs.shape[0] == len(pair.mask) and probs.shape[0] != n:
            probs = probs[:n]
        if probs.shape[0] != n:
            raise AlignmentError(
                f"{pair.pdb_id}:{pair.protein_chain}: {probs.shape[0]} probabilities "
                f"for {n} residues")
        for i, (seq, ic) in enumerate(pair.residue_keys):
            w.writerow([pair.pdb_id, pair.protein_chain, pair.peptide_chain, seq, ic,
                        f"{probs[i]:.6f}", int(pair.labels[i])])
    return buf.getvalue()


def read_predictions(text: str) -> PredictionTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise PredictionFormatError("empty predictions file") from None
    header = [h.strip() for h in header]
    if header not in (PREDICTION_HEADER, PREDICTION_HEADER[:-1]):
        raise PredictionFormatError(f"unexpected header {header}")
    has_label = len(header) == len(PREDICTION_HEADER)
    table = PredictionTable()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise PredictionFormatError(f"line {lineno}: expected {len(header)} columns")
        try:
            p = float(row[5])
            seq = int(row[3])
            label = int(row[6]) if has_label and row[6].strip() != "" else None
        except ValueError as exc:
            raise PredictionFormatError(f"line {lineno}: {exc}") from None
        if not 0.0 <= p <= 1.0:
            raise PredictionFormatError(f"line {lineno}: probability {p} outside [0, 1]")
        key = (row[0], row[1], row[2], seq, row[4])
        if key in table.rows:
            raise PredictionFormatError(f"line {lineno}: duplicate key {key}")
        table.rows[key] = PredictionRow(p, label)
    return table
