from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pepsite.dataset import (
    ALPHABET,
    PHYSCHEM_TABLE,
    PROTEIN_PAD,
    CoverageError,
    EmbeddingFormatError,
    FilterRules,
    SplitManifest,
    encode_features,
    expand_labels,
    filter_complexes,
    label_interface,
    parse_external_embeddings,
    split_dataset,
    write_external_embeddings,
)
from pepsite.structio import Atom, Chain, Complex, Residue, parse_pdb, read_pdb
from pepsite.synthetic import make_complex_pdb

from conftest import two_chain_pdb


def _chain(cid, n, offset=(0, 0, 0), spacing=3.8):
    res = []
    for i in range(n):
        xyz = np.array(offset, float) + np.array([spacing * i, 0, 0])
        res.append(Residue(i + 1, "", "ALA", [Atom(i, "CA", "C", xyz)]))
    return Chain(cid, res)


def _brute_labels(comp, pep, prot, cutoff=6.0):
    pep_xyz = np.concatenate([r.heavy_coords for r in comp.chain(pep).residues])
    out = []
    for r in comp.chain(prot).residues:
        d = np.sqrt(((r.heavy_coords[:, None, :] - pep_xyz[None]) ** 2).sum(-1))
        out.append(int((d <= cutoff).any()))
    return np.array(out)


# -- filtering --------------------------------------------------------------------

def test_filter_basic_pair():
    comp = Complex("1ABC", [_chain("P", 12), _chain("A", 300, (0, 10, 0))], 2.0, "xray")
    rej = Counter()
    assert [(p, q) for _, p, q in filter_complexes([comp], rejections=rej)] == [("P", "A")]
    assert rej["peptide_too_long"] == 1


@pytest.mark.parametrize("pep_len,prot_len,why", [
    (8, 300, "peptide_too_short"),
    (10, 300, "peptide_too_short"),
    (51, 300, "peptide_too_long"),
    (12, 600, "protein_too_long"),
    (12, 500, "protein_too_long"),
])
def test_filter_rules(pep_len, prot_len, why):
    comp = Complex("1ABC", [_chain("P", pep_len), _chain("A", prot_len, (0, 10, 0))], 2.0, "xray")
    rej = Counter()
    pairs = [(p, q) for _, p, q in filter_complexes([comp], rejections=rej)]
    assert ("P", "A") not in pairs
    assert rej[why] >= 1


def test_filter_resolution_and_nmr():
    bad = Complex("1BAD", [_chain("P", 12), _chain("A", 100, (0, 10, 0))], 3.0, "xray")
    nmr = Complex("1NMR", [_chain("P", 12), _chain("A", 100, (0, 10, 0))], None, "nmr")
    edge = Complex("1EDG", [_chain("P", 12), _chain("A", 100, (0, 10, 0))], 2.5, "xray")
    rej = Counter()
    ids = [c.pdb_id for c, _, _ in filter_complexes([bad, nmr, edge], FilterRules(), rej)]
    assert ids == ["1NMR", "1EDG"]
    assert rej["resolution"] == 1


# -- labels -----------------------------------------------------------------------

def test_label_boundary_inclusive():
    text = two_chain_pdb([(6.0, 0, 0), (30, 0, 0)], [(0, 0, 0)])
    pair = label_interface((parse_pdb(text), "P", "A"))
    assert list(pair.real_labels) == [1, 0]
    assert len(pair.labels) == PROTEIN_PAD and pair.mask.sum() == 2
    assert pair.labels[2:].sum() == 0


def test_label_far_apart():
    text = two_chain_pdb([(0, 0, 0), (3, 0, 0)], [(25, 0, 0), (28, 0, 0)])
    pair = label_interface((parse_pdb(text), "P", "A"))
    assert pair.real_labels.sum() == 0


def test_label_missing_chain():
    comp = parse_pdb(two_chain_pdb([(0, 0, 0)], [(1, 0, 0)]))
    with pytest.raises(KeyError):
        label_interface((comp, "Q", "A"))


@pytest.mark.parametrize("seed", range(10))
def test_labels_match_brute_force_synthetic(seed):
    rng = np.random.default_rng(seed)
    text = make_complex_pdb("T%03d" % seed, rng, 50, 15)
    comp = parse_pdb(text)
    pair = label_interface((comp, "P", "A"))
    np.testing.assert_array_equal(pair.real_labels, _brute_labels(comp, "P", "A"))
    assert 0 < pair.real_labels.sum() < 50


def test_labels_match_brute_force_real(real_pdbs):
    checked = 0
    for path in real_pdbs:
        comp = read_pdb(path)
        for pep in comp.chain_ids:
            for prot in comp.chain_ids:
                if pep == prot:
                    continue
                pair = label_interface((comp, pep, prot), pad=None)
                np.testing.assert_array_equal(pair.real_labels, _brute_labels(comp, pep, prot))
                checked += 1
    assert checked >= 10


def test_pair_fields():
    comp = parse_pdb(make_complex_pdb("T1", np.random.default_rng(3), 60, 12))
    pair = label_interface((comp, "P", "A"))
    assert pair.instance_id == "T1_P_A"
    assert len(pair.protein_seq) == 60 and len(pair.peptide_seq) == 12
    assert pair.centers.shape == (60, 3) and len(pair.heavy_atoms) == 60
    assert len(pair.labels) == len(pair.mask) == PROTEIN_PAD


# -- expand_labels ----------------------------------------------------------------

def test_expand_examples():
    assert list(expand_labels([0, 0, 1, 0, 0], 1)) == [0, 1, 1, 1, 0]
    assert list(expand_labels([1, 0, 0], 1)) == [1, 1, 0]
    assert list(expand_labels([0, 1, 0, 1], 0)) == [0, 1, 0, 1]
    assert list(expand_labels([0, 1, 0, 0], 1, mask=[1, 1, 1, 0])) == [1, 1, 1, 0]
    with pytest.raises(ValueError):
        expand_labels([0, 1], -1)


labels_st = st.lists(st.integers(0, 1), min_size=1, max_size=60).map(np.array)


@settings(max_examples=200, deadline=None)
@given(labels_st, st.integers(0, 5), st.integers(0, 5))
def test_expand_monotone_and_composes(y, a, b):
    once = expand_labels(y, a)
    assert np.all(once >= y)
    np.testing.assert_array_equal(expand_labels(once, b), expand_labels(y, a + b))


# -- splitting --------------------------------------------------------------------

def test_split_sizes():
    m = split_dataset([f"id{i}" for i in range(10)], seed=7)
    assert (len(m.train_ids), len(m.val_ids)) == (9, 1)
    m5 = split_dataset([f"id{i}" for i in range(5)], seed=0)
    assert (len(m5.train_ids), len(m5.val_ids)) == (4, 1)
    assert split_dataset(["only"], seed=0).train_ids == ["only"]
    with pytest.raises(ValueError):
        split_dataset([], seed=0)


def test_split_follows_reference_shuffle():
    ids = [f"x{i:03d}" for i in range(100)]
    for seed in (1, 2):
        perm = np.random.default_rng(seed).permutation(100)
        m = split_dataset(ids, seed)
        assert m.train_ids + m.val_ids == [ids[i] for i in perm]
    assert split_dataset(ids, 1).train_ids != split_dataset(ids, 2).train_ids


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31))
def test_split_invariants(n, seed):
    ids = [f"i{k}" for k in range(n)]
    m = split_dataset(ids, seed)
    assert not set(m.train_ids) & set(m.val_ids)
    assert sorted(m.train_ids + m.val_ids) == sorted(ids)
    assert abs(len(m.train_ids) - 0.9 * n) <= 1
    text = m.to_text()
    assert split_dataset(ids, seed).to_text() == text
    assert SplitManifest.from_text(text) == m


# -- features ---------------------------------------------------------------------

def _small_pair():
    comp = parse_pdb(make_complex_pdb("F1", np.random.default_rng(5), 55, 12))
    return label_interface((comp, "P", "A"))


def test_onehot():
    pair = _small_pair()
    fm = encode_features(pair, "onehot")
    assert fm.dim == 21 and fm.rows.shape == (PROTEIN_PAD, 21)
    n = pair.n_residues
    np.testing.assert_array_equal(fm.rows[:n].sum(axis=1), 1.0)
    np.testing.assert_array_equal(fm.rows[n:], 0.0)
    for i, aa in enumerate(pair.protein_seq):
        assert fm.rows[i, ALPHABET.index(aa)] == 1.0
    assert ALPHABET.index("A") == 0
    np.testing.assert_allclose(fm.global_row, fm.rows[:n].mean(axis=0))
    assert fm.inputs().shape == (PROTEIN_PAD, 42)


def test_physchem_and_global_mean():
    pair = _small_pair()
    fm = encode_features(pair, "physchem")
    assert fm.dim == 7
    np.testing.assert_allclose(fm.rows[0], PHYSCHEM_TABLE[pair.protein_seq[0]])
    np.testing.assert_allclose(fm.global_row, np.mean(fm.rows[: pair.n_residues], axis=0))
    assert np.all(fm.rows[pair.n_residues:] == 0)
    assert np.abs(np.stack(list(PHYSCHEM_TABLE.values()))).max() < 1.1


def test_global_row_three_residues():
    comp = Complex("G1", [Chain("A", [Residue(i, "", n, [Atom(i, "CA", "C", np.array([4.0 * i, 0, 0]))])
                                      for i, n in enumerate(["ALA", "CYS", "ALA"])]),
                          _chain("P", 12, (0, 5, 0))])
    pair = label_interface((comp, "P", "A"))
    fm = encode_features(pair, "onehot")
    expected = np.zeros(21)
    expected[0], expected[1] = 2 / 3, 1 / 3
    np.testing.assert_allclose(fm.global_row, expected)


def test_external_embeddings(rng, tmp_path):
    pair = _small_pair()
    table = {i: rng.normal(size=4) for i in range(pair.n_residues)}
    path = tmp_path / "e.emb"
    write_external_embeddings(table, path)
    back = parse_external_embeddings(path.read_text())
    for i in table:
        np.testing.assert_allclose(back[i], table[i], atol=1e-6)
    fm = encode_features(pair, "external", back)
    assert fm.dim == 4
    del back[3]
    with pytest.raises(CoverageError, match="3"):
        encode_features(pair, "external", back)


def test_embedding_format_errors():
    assert len(parse_external_embeddings("D=4\n0 1 2 3 4\n1 5 6 7 8\n")) == 2
    with pytest.raises(EmbeddingFormatError):
        parse_external_embeddings("D=4\n0 1 2 3\n")
    with pytest.raises(EmbeddingFormatError):
        parse_external_embeddings("0 1 2 3\n")


def test_unknown_scheme():
    with pytest.raises(ValueError):
        encode_features(_small_pair(), "bogus")
