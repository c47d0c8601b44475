from pathlib import Path

import numpy as np
import pytest

from pepsite.synthetic import bundle_dir

DATA = Path(__file__).parent / "data"
REAL_PDBS = sorted((DATA / "real").glob("*.pdb"))


def pdb_atom(serial, name, resname, chain, seq, xyz, element="C", occ=1.0,
             altloc=" ", icode=" ", record="ATOM  "):
    """One fixed-column ATOM/HETATM record."""
    padded = f" {name:<3}" if len(name) < 4 else name
    return (f"{record}{serial:5d} {padded:4s}{altloc}{resname:3s} {chain}{seq:4d}{icode}   "
            f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{occ:6.2f}{20.0:6.2f}"
            f"          {element:>2s}")


def two_chain_pdb(prot_xyz, pep_xyz, prot_chain="A", pep_chain="P", header=None):
    """PDB text with one single-atom residue per coordinate."""
    lines = [header] if header else []
    serial = 1
    for chain, coords in ((prot_chain, prot_xyz), (pep_chain, pep_xyz)):
        for i, xyz in enumerate(coords, start=1):
            lines.append(pdb_atom(serial, "CA", "ALA", chain, i, xyz))
            serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def real_pdbs():
    return REAL_PDBS


@pytest.fixture(scope="session")
def bundle():
    return sorted(bundle_dir().glob("*.pdb"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -------------------------------------------------------------

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; returns the verdict so tests can assert on it."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
