"""Spatial primitives: grid neighbor search, residue distances, hull volume, SASA."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SpatialGrid",
    "HullResult",
    "SasaResult",
    "VDW_RADII",
    "vdw_radius",
    "min_atom_distance",
    "neighbor_pairs",
    "brute_force_pairs",
    "convex_hull_volume",
    "golden_spiral_points",
    "shrake_rupley_sasa",
]

VDW_RADII = {"C": 1.70, "N": 1.55, "O": 1.52, "S": 1.80, "P": 1.80, "H": 1.10}
DEFAULT_HEAVY_RADIUS = 1.70

_ELEMENTS = set("""
H HE LI BE B C N O F NE NA MG AL SI P S CL AR K CA SC TI V CR MN FE CO NI CU ZN
GA GE AS SE BR KR RB SR Y ZR NB MO TC RU RH PD AG CD IN SN SB TE I XE CS BA LA
CE PR ND PM SM EU GD TB DY HO ER TM YB LU HF TA W RE OS IR PT AU HG TL PB BI PO
AT RN FR RA AC TH PA U NP PU AM CM BK CF ES FM MD NO LR D
""".split())


def vdw_radius(element: str) -> float:
    el = element.strip().upper()
    if el in VDW_RADII:
        return VDW_RADII[el]
    if el in _ELEMENTS:
        return DEFAULT_HEAVY_RADIUS
    raise KeyError(f"no van der Waals radius for element {element!r}")


def _coords(obj) -> np.ndarray:
    """Coerce a Residue, a list of Atoms, or an array into an (n, 3) array."""
    if hasattr(obj, "heavy_coords"):
        return obj.heavy_coords
    if isinstance(obj, np.ndarray):
        return obj.reshape(-1, 3).astype(float, copy=False)
    obj = list(obj)
    if obj and hasattr(obj[0], "coord"):
        return np.array([a.coord for a in obj], dtype=float).reshape(-1, 3)
    return np.asarray(obj, dtype=float).reshape(-1, 3)


class SpatialGrid:
    """Uniform hash grid over a fixed point set.

    Points are bucketed into cubic cells of side ``cell_size``; any point
    within ``cell_size`` of a query lies in the 27 cells around it.
    """

    def __init__(self, coords, cell_size: float):
        if not cell_size > 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.coords = _coords(coords)
        keys = np.floor(self.coords / self.cell_size).astype(np.int64)
        cells: dict[tuple[int, int, int], list[int]] = {}
        for i, k in enumerate(map(tuple, keys)):
            cells.setdefault(k, []).append(i)
        self.cells = {k: np.array(v, dtype=np.int64) for k, v in cells.items()}

    def __len__(self) -> int:
        return len(self.coords)

    def cell_of(self, point) -> tuple[int, int, int]:
        return tuple(int(v) for v in np.floor(np.asarray(point, dtype=float) / self.cell_size))

    def candidates(self, point) -> np.ndarray:
        """Indices of points in the 27 cells surrounding ``point``."""
        cx, cy, cz = self.cell_of(point)
        found = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    idx = self.cells.get((cx + dx, cy + dy, cz + dz))
                    if idx is not None:
                        found.append(idx)
        if not found:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(found))

    def query(self, point, radius: float | None = None) -> np.ndarray:
        """Indices of points with distance <= radius (default cell_size)."""
        radius = self.cell_size if radius is None else radius
        if radius > self.cell_size:
            raise ValueError("query radius exceeds cell size")
        cand = self.candidates(point)
        if cand.size == 0:
            return cand
        diff = self.coords[cand] - np.asarray(point, dtype=float)
        d2 = (diff ** 2).sum(axis=1)
        return cand[d2 <= radius * radius]


def min_atom_distance(res_a, res_b) -> float:
    """Smallest heavy-atom distance between two residues (or coordinate sets)."""
    a = _coords(res_a)
    b = _coords(res_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("residue without heavy atoms")
    diff = a[:, None, :] - b[None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=-1).min()))


def neighbor_pairs(atoms_a, atoms_b, cutoff: float) -> list[tuple[int, int]]:
    """All index pairs ``(i, j)`` with ``|a_i - b_j| <= cutoff``, sorted."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    a = _coords(atoms_a)
    b = _coords(atoms_b)
    if len(a) == 0 or len(b) == 0:
        return []
    grid = SpatialGrid(b, cutoff)
    out = []
    for i, p in enumerate(a):
        for j in grid.query(p, cutoff):
            out.append((i, int(j)))
    return out


def brute_force_pairs(atoms_a, atoms_b, cutoff: float) -> list[tuple[int, int]]:
    """O(N*M) reference for :func:`neighbor_pairs`."""
    a = _coords(atoms_a)
    b = _coords(atoms_b)
    if len(a) == 0 or len(b) == 0:
        return []
    diff = a[:, None, :] - b[None, :, :]
    d2 = (diff ** 2).sum(axis=-1)
    ii, jj = np.nonzero(d2 <= cutoff * cutoff)
    return [(int(i), int(j)) for i, j in zip(ii, jj)]


# -- convex hull -----------------------------------------------------------------

@dataclass(frozen=True)
class HullResult:
    volume: float
    vertex_count: int
    degenerate: bool


class _Face:
    __slots__ = ("v", "normal", "offset", "outside", "alive")

    def __init__(self, v, pts):
        self.v = v
        a, b, c = pts[v[0]], pts[v[1]], pts[v[2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        self.normal = n / norm if norm > 0 else n
        self.offset = float(self.normal @ a)
        self.outside: list[int] = []
        self.alive = True

    def dist(self, p) -> float:
        return float(self.normal @ p) - self.offset


def _initial_simplex(pts: np.ndarray, tol: float):
    ext = np.concatenate([pts.argmin(axis=0), pts.argmax(axis=0)])
    best, i0, i1 = -1.0, 0, 0
    for a in ext:
        for b in ext:
            d = np.linalg.norm(pts[a] - pts[b])
            if d > best:
                best, i0, i1 = d, int(a), int(b)
    if best <= tol:
        return None
    u = (pts[i1] - pts[i0]) / best
    rel = pts - pts[i0]
    perp = rel - np.outer(rel @ u, u)
    dline = np.linalg.norm(perp, axis=1)
    i2 = int(dline.argmax())
    if dline[i2] <= tol:
        return None
    n = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    n /= np.linalg.norm(n)
    dplane = rel @ n
    i3 = int(np.abs(dplane).argmax())
    if abs(dplane[i3]) <= tol:
        return None
    return i0, i1, i2, i3


def convex_hull_volume(points) -> HullResult:
    """Volume of the 3-D convex hull by quickhull.

    Fewer than four affinely independent points give a degenerate result with
    zero volume.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 4:
        return HullResult(0.0, len(np.unique(pts, axis=0)) if len(pts) else 0, True)
    scale = float(np.abs(pts).max()) + float(np.ptp(pts, axis=0).max())
    tol = 1e-11 * max(scale, 1e-300)
    simplex = _initial_simplex(pts, tol)
    if simplex is None:
        return HullResult(0.0, len(np.unique(pts, axis=0)), True)

    i0, i1, i2, i3 = simplex
    interior = pts[[i0, i1, i2, i3]].mean(axis=0)
    faces: list[_Face] = []
    edge_face: dict[tuple[int, int], int] = {}

    def add_face(a, b, c):
        f = _Face((a, b, c), pts)
        if f.dist(interior) > 0:
            f = _Face((a, c, b), pts)
        faces.append(f)
        fid = len(faces) - 1
        x, y, z = f.v
        for e in ((x, y), (y, z), (z, x)):
            edge_face[e] = fid
        return fid

    for tri in ((i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)):
        add_face(*tri)

    used = {i0, i1, i2, i3}
    for p in range(len(pts)):
        if p in used:
            continue
        for f in faces:
            if f.dist(pts[p]) > tol:
                f.outside.append(p)
                break

    pending = [fid for fid, f in enumerate(faces) if f.outside]
    while pending:
        fid = pending.pop()
        face = faces[fid]
        if not face.alive or not face.outside:
            continue
        eye = max(face.outside, key=lambda q: face.dist(pts[q]))
        ep = pts[eye]

        visible = {fid}
        stack = [fid]
        while stack:
            cur = faces[stack.pop()]
            x, y, z = cur.v
            for u, v in ((x, y), (y, z), (z, x)):
                nb = edge_face.get((v, u))
                if nb is None or nb in visible:
                    continue
                if faces[nb].dist(ep) > tol:
                    visible.add(nb)
                    stack.append(nb)

        horizon = []
        orphans = []
        for vid in visible:
            f = faces[vid]
            f.alive = False
            orphans.extend(q for q in f.outside if q != eye)
            x, y, z = f.v
            for u, v in ((x, y), (y, z), (z, x)):
                if edge_face.get((v, u)) not in visible:
                    horizon.append((u, v))
        for vid in visible:
            x, y, z = faces[vid].v
            for e in ((x, y), (y, z), (z, x)):
                if edge_face.get(e) == vid:
                    del edge_face[e]

        new_ids = []
        for u, v in horizon:
            f = _Face((u, v, eye), pts)
            faces.append(f)
            nid = len(faces) - 1
            for e in ((u, v), (v, eye), (eye, u)):
                edge_face[e] = nid
            new_ids.append(nid)

        for q in orphans:
            for nid in new_ids:
                if faces[nid].dist(pts[q]) > tol:
                    faces[nid].outside.append(q)
                    break
        pending.extend(nid for nid in new_ids if faces[nid].outside)

    live = [f for f in faces if f.alive]
    tris = np.array([f.v for f in live], dtype=np.int64)
    a = pts[tris[:, 0]] - interior
    b = pts[tris[:, 1]] - interior
    c = pts[tris[:, 2]] - interior
    vol = float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
    return HullResult(abs(vol), len(np.unique(tris)), False)


# -- solvent accessible surface area --------------------------------------------

@dataclass
class SasaResult:
    per_atom_area: np.ndarray
    per_residue_area: np.ndarray


def golden_spiral_points(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on a Fibonacci spiral."""
    if n < 1:
        raise ValueError("n_points must be >= 1")
    k = np.arange(n, dtype=float)
    inc = math.pi * (3.0 - math.sqrt(5.0))
    off = 2.0 / n
    y = k * off - 1.0 + off / 2.0
    r = np.sqrt(np.clip(1.0 - y * y, 0.0, None))
    phi = k * inc
    return np.column_stack([np.cos(phi) * r, y, np.sin(phi) * r])


def _sasa_areas(coords: np.ndarray, radii: np.ndarray, n_points: int,
                query: np.ndarray | None = None) -> np.ndarray:
    """Shrake-Rupley areas; ``radii`` already include the probe."""
    n = len(coords)
    areas = np.zeros(n)
    if n == 0:
        return areas
    sphere = golden_spiral_points(n_points)
    grid = SpatialGrid(coords, 2.0 * float(radii.max()))
    targets = range(n) if query is None else np.flatnonzero(query)
    for i in targets:
        ri = radii[i]
        cand = grid.candidates(coords[i])
        cand = cand[cand != i]
        if cand.size:
            d = np.linalg.norm(coords[cand] - coords[i], axis=1)
            cand = cand[d < ri + radii[cand]]
        surf = coords[i] + ri * sphere
        if cand.size:
            diff = surf[:, None, :] - coords[cand][None, :, :]
            buried = ((diff ** 2).sum(axis=-1) < radii[cand] ** 2).any(axis=1)
            frac = 1.0 - buried.mean()
        else:
            frac = 1.0
        areas[i] = 4.0 * math.pi * ri * ri * frac
    return areas


def shrake_rupley_sasa(atoms, probe: float = 1.4, n_points: int = 960,
                       residue_ids: Sequence | None = None,
                       radii: Sequence[float] | None = None) -> SasaResult:
    """Per-atom and per-residue solvent accessible surface area.

    Parameters
    ----------
    atoms : list of Atom
        Heavy atoms of the structure.
    probe : float
        Probe radius in Angstrom.
    n_points : int
        Golden-spiral test points per atom.
    residue_ids : sequence, optional
        Residue label per atom; per-residue areas follow first-appearance
        order.  Without it every atom is its own residue.
    radii : sequence of float, optional
        Explicit van der Waals radii, overriding the element table.
    """
    if probe < 0:
        raise ValueError("probe must be >= 0")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    atoms = list(atoms)
    coords = _coords(atoms) if atoms else np.zeros((0, 3))
    if radii is None:
        radii = np.array([vdw_radius(a.element) for a in atoms], dtype=float)
    else:
        radii = np.asarray(radii, dtype=float)
    per_atom = _sasa_areas(coords, radii + probe, n_points)
    if residue_ids is None:
        return SasaResult(per_atom, per_atom.copy())
    order: dict = {}
    for rid in residue_ids:
        order.setdefault(rid, len(order))
    per_res = np.zeros(len(order))
    np.add.at(per_res, [order[r] for r in residue_ids], per_atom)
    return SasaResult(per_atom, per_res)
