import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pepsite.dataset import label_interface
from pepsite.structio import (
    AlignmentError,
    Atom,
    Chain,
    Complex,
    EmptyStructureError,
    ParseStats,
    PdbParseError,
    PredictionFormatError,
    Residue,
    parse_pdb,
    read_pdb,
    read_predictions,
    read_structure,
    write_predictions,
    write_structure,
)

from conftest import pdb_atom, two_chain_pdb


def test_single_atom_line():
    comp = parse_pdb(pdb_atom(1, "CA", "ALA", "A", 1, (1.0, 2.0, 3.0)) + "\n")
    assert len(comp.chains) == 1
    res = comp.chains[0].residues
    assert len(res) == 1 and len(res[0].atoms) == 1
    np.testing.assert_array_equal(res[0].atoms[0].coord, [1.0, 2.0, 3.0])
    assert res[0].atoms[0].element == "C"
    assert comp.chains[0].sequence == "A"


def test_two_chains_residue_counts():
    text = two_chain_pdb([(i, 0, 0) for i in range(3)], [(i, 5, 0) for i in range(2)],
                         prot_chain="A", pep_chain="B")
    comp = parse_pdb(text)
    assert comp.chain_ids == ["A", "B"]
    assert [len(c) for c in comp.chains] == [3, 2]


def test_bad_coordinate_names_line():
    good = pdb_atom(1, "CA", "ALA", "A", 1, (0, 0, 0))
    bad = good[:30] + "     abc" + good[38:]
    with pytest.raises(PdbParseError, match="line 2"):
        parse_pdb(good + "\n" + bad + "\n")


def test_no_atoms_is_empty_structure():
    with pytest.raises(EmptyStructureError):
        parse_pdb("HEADER    NOTHING\nEND\n")


def test_exclusions_and_counts():
    lines = [
        pdb_atom(1, "N", "GLY", "A", 1, (0, 0, 0), "N"),
        pdb_atom(2, "H", "GLY", "A", 1, (0, 1, 0), "H"),
        pdb_atom(3, "D1", "GLY", "A", 1, (0, 2, 0), "D"),
        pdb_atom(4, "O", "HOH", "A", 50, (9, 9, 9), "O", record="HETATM"),
        pdb_atom(5, "O", "HOH", "W", 51, (9, 9, 8), "O"),
        pdb_atom(6, "ZN", "ZN", "A", 60, (3, 3, 3), "ZN", record="HETATM"),
    ]
    stats = ParseStats()
    comp = parse_pdb("\n".join(lines) + "\n", stats=stats)
    assert [a.name for a in comp.atoms()] == ["N"]
    assert comp.chain_ids == ["A"]
    assert (stats.kept, stats.hydrogen, stats.water, stats.hetatm) == (1, 2, 1, 2)
    assert stats.total == 6


def test_altloc_highest_occupancy_wins():
    lines = [
        pdb_atom(1, "CA", "SER", "A", 1, (0, 0, 0), altloc="A", occ=0.4),
        pdb_atom(2, "CA", "SER", "A", 1, (1, 0, 0), altloc="B", occ=0.6),
    ]
    comp = parse_pdb("\n".join(lines) + "\n")
    (atom,) = comp.atoms()
    assert atom.altloc == "B"
    np.testing.assert_array_equal(atom.coord, [1, 0, 0])


@pytest.mark.parametrize("alts,expected", [((" ", "A"), ""), (("B", "A"), "A")])
def test_altloc_ties(alts, expected):
    lines = [pdb_atom(i + 1, "CA", "SER", "A", 1, (i, 0, 0), altloc=a, occ=0.5)
             for i, a in enumerate(alts)]
    (atom,) = parse_pdb("\n".join(lines) + "\n").atoms()
    assert atom.altloc == expected


def test_first_model_only():
    lines = ["MODEL        1", pdb_atom(1, "CA", "ALA", "A", 1, (0, 0, 0)), "ENDMDL",
             "MODEL        2", pdb_atom(1, "CA", "ALA", "A", 1, (5, 5, 5)), "ENDMDL"]
    stats = ParseStats()
    comp = parse_pdb("\n".join(lines) + "\n", stats=stats)
    np.testing.assert_array_equal(comp.atoms()[0].coord, [0, 0, 0])
    assert stats.later_model == 1


def test_header_fields():
    text = "\n".join([
        "HEADER    TEST                                    01-JAN-00   1ABC",
        "EXPDTA    X-RAY DIFFRACTION",
        "REMARK   2 RESOLUTION.    1.90 ANGSTROMS.",
        pdb_atom(1, "CA", "ALA", "A", 1, (0, 0, 0)),
    ]) + "\n"
    comp = parse_pdb(text)
    assert comp.pdb_id == "1ABC"
    assert comp.method == "xray"
    assert comp.resolution == pytest.approx(1.90)


def test_residue_order_and_insertion_codes():
    lines = [
        pdb_atom(1, "CA", "ALA", "A", 10, (0, 0, 0)),
        pdb_atom(2, "CA", "GLY", "A", 5, (1, 0, 0)),
        pdb_atom(3, "CA", "SER", "A", 5, (2, 0, 0), icode="A"),
        pdb_atom(4, "CA", "XYZ", "A", 7, (3, 0, 0)),
    ]
    comp = parse_pdb("\n".join(lines) + "\n")
    ch = comp.chains[0]
    assert [r.key for r in ch.residues] == [(5, ""), (5, "A"), (7, ""), (10, "")]
    assert ch.sequence == "GSXA"


def test_mass_center_is_unweighted_heavy_mean():
    atoms = [Atom(1, "N", "N", np.array([0.0, 0, 0])), Atom(2, "C", "C", np.array([2.0, 0, 0])),
             Atom(3, "H", "H", np.array([100.0, 0, 0]))]
    np.testing.assert_allclose(Residue(1, "", "GLY", atoms).mass_center, [1.0, 0, 0])


def test_complex_invariants():
    ch = Chain("A", [Residue(1, "", "ALA", [Atom(1, "CA", "C", np.zeros(3))])])
    with pytest.raises(ValueError):
        Complex("1ABC", [ch, ch])
    with pytest.raises(ValueError):
        Complex("", [ch])


def test_real_files_parse_totally(real_pdbs):
    """Every ATOM/HETATM record is kept or accounted to an exclusion rule."""
    assert len(real_pdbs) >= 10
    for path in real_pdbs:
        stats = ParseStats()
        comp = read_pdb(path, stats=stats)
        n_records = sum(line[:6] in ("ATOM  ", "HETATM")
                        for line in path.read_text().splitlines())
        assert stats.total == n_records, path.name
        assert stats.kept == len(comp.atoms())
        assert all(a.is_heavy for a in comp.atoms())


def test_real_file_metadata(real_pdbs):
    by_name = {p.name: p for p in real_pdbs}
    xray = read_pdb(by_name["2XHE.pdb"])
    assert xray.method == "xray" and xray.resolution == pytest.approx(2.80)
    assert read_pdb(by_name["2n0n_M1.pdb"]).method == "nmr"
    # 1LCD is a multi-model NMR entry; later models are dropped
    stats = ParseStats()
    read_pdb(by_name["1LCD.pdb"], stats=stats)
    assert stats.later_model > 0


def test_repeated_parse_is_stable(real_pdbs):
    for path in real_pdbs:
        a, b = read_pdb(path), read_pdb(path)
        assert write_structure(a) == write_structure(b)


def test_structure_cache_fixpoint(real_pdbs):
    for path in real_pdbs:
        comp = read_pdb(path)
        text = write_structure(comp)
        back = read_structure(text)
        assert write_structure(back) == text
        assert back.chain_ids == comp.chain_ids
        assert back.resolution == comp.resolution and back.method == comp.method


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-999, 999), st.floats(-999, 999), st.floats(-999, 999)),
                min_size=1, max_size=20))
def test_structure_cache_is_bit_exact(coords):
    atoms = [Atom(i, "CA", "C", np.array(c)) for i, c in enumerate(coords)]
    comp = Complex("T1", [Chain("", [Residue(i, "", "ALA", [a]) for i, a in enumerate(atoms)])])
    back = read_structure(write_structure(comp))
    got = np.array([a.coord for a in back.atoms()])
    np.testing.assert_array_equal(got, np.array(coords))


# -- predictions CSV ---------------------------------------------------------------

def _pair(n_prot=2):
    text = two_chain_pdb([(10.0 * i, 0, 0) for i in range(n_prot)],
                         [(0, 3.0, 0)] * 1 + [(0, 3.0 + k, 0) for k in range(1, 11)],
                         header="HEADER    TEST                                    01-JAN-00   9XYZ")
    return label_interface((parse_pdb(text), "P", "A"))


def test_write_predictions_rows():
    pair = _pair()
    text = write_predictions([(pair, [0.25, 0.75])])
    lines = text.splitlines()
    assert lines[0] == "pdb_id,protein_chain,peptide_chain,res_seq,icode,probability,label"
    assert lines[1:] == ["9XYZ,A,P,1,,0.250000,1", "9XYZ,A,P,2,,0.750000,0"]


def test_write_predictions_empty_and_mismatch():
    assert write_predictions([]).splitlines() == [
        "pdb_id,protein_chain,peptide_chain,res_seq,icode,probability,label"]
    with pytest.raises(AlignmentError):
        write_predictions([(_pair(), [0.1, 0.2, 0.3])])


def test_predictions_round_trip(rng):
    pair = _pair(6)
    probs = rng.random(6)
    table = read_predictions(write_predictions([(pair, probs)]))
    got = table.lookup("9XYZ", "A", "P", pair.residue_keys)
    np.testing.assert_allclose(got, probs, atol=1e-6)
    again = read_predictions(write_predictions([(pair, got)]))
    assert again.rows == table.rows


def test_read_predictions_validation():
    head = "pdb_id,protein_chain,peptide_chain,res_seq,icode,probability,label\n"
    with pytest.raises(PredictionFormatError):
        read_predictions(head + "1ABC,A,P,1,,1.5,0\n")
    with pytest.raises(PredictionFormatError):
        read_predictions(head + "1ABC,A,P,1,,0.5,0\n1ABC,A,P,1,,0.6,1\n")
    with pytest.raises(PredictionFormatError):
        read_predictions("a,b\n")


def test_read_predictions_without_labels():
    text = "pdb_id,protein_chain,peptide_chain,res_seq,icode,probability\n1ABC,A,P,3,B,0.125\n"
    table = read_predictions(text)
    row = table.rows[("1ABC", "A", "P", 3, "B")]
    assert row.probability == 0.125 and row.label is None
