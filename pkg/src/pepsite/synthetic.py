"""Synthetic fixtures: small peptide/protein PDB complexes with a learnable
sequence signal, and an additive-spline classification target."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .loss import distance_field
from .model import SplineGrid, bspline_basis
from .train import TrainInstance

__all__ = [
    "HYDROPHOBIC",
    "POLAR",
    "make_complex_pdb",
    "write_bundle",
    "bundle_dir",
    "spline_target_instances",
    "random_instance",
]

HYDROPHOBIC = ["TRP", "PHE", "TYR", "LEU", "ILE", "MET"]
POLAR = ["LYS", "GLU", "ASP", "ARG", "SER", "THR", "ASN", "GLN", "GLY", "ALA", "PRO", "HIS"]
_ALL = HYDROPHOBIC + POLAR + ["VAL", "CYS"]

# pseudo backbone + CB offsets around the residue position (Angstrom)
_ATOM_TEMPLATE = [("N", "N", (-1.2, 0.6, 0.0)), ("CA", "C", (0.0, 0.0, 0.0)),
                  ("C", "C", (1.2, 0.6, 0.0)), ("O", "O", (1.4, 1.8, 0.0)),
                  ("CB", "C", (0.0, -1.0, 1.2))]


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _atom_line(serial, name, resname, chain, seq, xyz, element, bfactor=20.0) -> str:
    padded = f" {name:<3}" if len(name) < 4 else name
    return (f"ATOM  {serial:5d} {padded:4s} {resname:3s} {chain}{seq:4d}    "
            f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{1.0:6.2f}{bfactor:6.2f}"
            f"          {element:>2s}")


def _residue_atoms(center, resname, rng):
    rot = _rotation(rng)
    out = []
    for name, el, off in _ATOM_TEMPLATE:
        if name == "CB" and resname == "GLY":
            continue
        out.append((name, el, center + rot @ np.asarray(off)))
    return out


def make_complex_pdb(pdb_id: str, rng, protein_len: int, peptide_len: int,
                     method: str = "xray", resolution: float | None = 2.0,
                     signal: float = 0.8) -> str:
    """One two-chain complex: a globular protein ``A`` and a peptide ``P``
    lying along its surface.

    Protein residues near the peptide are drawn from hydrophobic types with
    probability ``signal``; the rest of the surface mostly from polar types.
    """
    # protein residues on a Fibonacci sphere, ~30 A^2 surface per residue
    radius = math.sqrt(30.0 * protein_len / (4 * math.pi))
    k = np.arange(protein_len) + 0.5
    phi = np.arccos(1 - 2 * k / protein_len)
    theta = math.pi * (1 + 5 ** 0.5) * k
    dirs = np.column_stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)])
    rot = _rotation(rng)
    dirs = dirs @ rot.T
    centers = radius * dirs + rng.normal(scale=0.4, size=dirs.shape)

    # peptide along a great-circle arc, 1.5 A rise per residue
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    v = np.cross(u, rng.normal(size=3))
    v /= np.linalg.norm(v)
    pep_r = radius + 5.0
    span = 1.5 * (peptide_len - 1) / pep_r
    angles = np.linspace(-span / 2, span / 2, peptide_len)
    pep_centers = pep_r * (np.outer(np.cos(angles), u) + np.outer(np.sin(angles), v))
    pep_centers += rng.normal(scale=0.3, size=pep_centers.shape)

    d = np.linalg.norm(centers[:, None, :] - pep_centers[None, :, :], axis=-1).min(axis=1)
    near = d <= 8.0
    names = []
    for i in range(protein_len):
        if near[i]:
            pool = HYDROPHOBIC if rng.random() < signal else POLAR
        else:
            pool = POLAR if rng.random() < 0.85 else HYDROPHOBIC
        names.append(pool[rng.integers(len(pool))])
    pep_names = [_ALL[rng.integers(len(_ALL))] for _ in range(peptide_len)]

    lines = [f"HEADER    SYNTHETIC COMPLEX                       01-JAN-00   {pdb_id:4s}"]
    if method == "xray":
        lines.append("EXPDTA    X-RAY DIFFRACTION")
        lines.append(f"REMARK   2 RESOLUTION.    {resolution:4.2f} ANGSTROMS.")
    else:
        lines.append("EXPDTA    SOLUTION NMR")
        lines.append("REMARK   2 RESOLUTION. NOT APPLICABLE.")
    serial = 1
    for chain, cs, rn in (("A", centers, names), ("P", pep_centers, pep_names)):
        for i, (c, name) in enumerate(zip(cs, rn), start=1):
            for aname, el, xyz in _residue_atoms(c, name, rng):
                lines.append(_atom_line(serial, aname, name, chain, i, xyz, el))
                serial += 1
        lines.append(f"TER   {serial:5d}      {rn[-1]:3s} {chain}{len(cs):4d}")
        serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"


def write_bundle(out_dir, n_complexes: int = 40, seed: int = 2024) -> list[Path]:
    """Write the synthetic PDB bundle; a few entries deliberately fail the
    ingestion filters (short peptide, poor resolution)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_complexes):
        pdb_id = f"S{i:03d}"
        prot_len = int(rng.integers(51, 91))
        pep_len = int(rng.integers(11, 21))
        method, res = "xray", round(float(rng.uniform(1.2, 2.4)), 2)
        if i % 10 == 3:
            method, res = "nmr", None
        if i == 7:
            pep_len = 8          # fails the peptide length rule
        if i == 17:
            res = 3.1            # fails the resolution rule
        text = make_complex_pdb(pdb_id, rng, prot_len, pep_len, method, res)
        path = out / f"{pdb_id}.pdb"
        path.write_text(text)
        paths.append(path)
    return paths


def bundle_dir() -> Path:
    """Location of the shipped bundle inside the installed package."""
    return Path(__file__).parent / "data" / "bundle"


def spline_target_instances(n_instances: int = 24, rows: int = 40, dim: int = 3,
                            seed: int = 11, grid: SplineGrid | None = None) -> list[TrainInstance]:
    """Binary labels from the sign of a sum of random univariate splines.

    Features are uniform on [-1, 1]; the label of a row is
    ``sum_i f_i(x_i) > 0`` where each ``f_i`` is a cubic spline with random
    coefficients on ``grid``.  A single spline layer can represent the
    decision function exactly.
    """
    grid = grid or SplineGrid(8, 3)
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(size=(dim, grid.n_basis))
    out = []
    for k in range(n_instances):
        x = rng.uniform(-1, 1, size=(rows, dim))
        score = (bspline_basis(x, grid) * coeffs).sum(axis=(1, 2))
        y = (score > 0).astype(float)
        out.append(TrainInstance(f"spline{k:03d}", x, y, np.ones(rows, dtype=np.int8), None))
    return out


def random_instance(seed: int, n_residues: int = 12, input_dim: int = 6,
                    padded: int | None = None) -> TrainInstance:
    """Small random instance for gradient checks.

    Residues sit on a random walk with three atoms each; at least one and at
    most half of them are binding.  ``padded`` appends masked rows.
    """
    rng = np.random.default_rng(seed)
    length = padded or n_residues
    x = np.zeros((length, input_dim))
    x[:n_residues] = rng.uniform(-1, 1, size=(n_residues, input_dim))
    walk = np.cumsum(rng.normal(scale=2.0, size=(n_residues, 3)), axis=0)
    coords = [c + rng.normal(scale=0.8, size=(3, 3)) for c in walk]
    y = np.zeros(length)
    n_pos = int(rng.integers(1, max(2, n_residues // 2 + 1)))
    y[rng.choice(n_residues, n_pos, replace=False)] = 1.0
    mask = np.zeros(length, dtype=np.int8)
    mask[:n_residues] = 1
    return TrainInstance(f"rand{seed:04d}", x, y, mask, distance_field(coords, y[:n_residues]))
