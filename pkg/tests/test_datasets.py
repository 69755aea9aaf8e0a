import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmdlab.datasets import (
    BLANK_ID,
    EOS_ID,
    SEP_ID,
    SUDOKU_LEN,
    all_sudoku_grids,
    dataset_spec,
    exact_distribution,
    gen_d1,
    gen_d2,
    gen_det2,
    gen_minisudoku,
    gen_nonuni2,
    gen_varp2,
    is_valid_grid,
    is_valid_sudoku_sequence,
    sample_batch,
    sudoku_prompt_mask,
)


def tv_distance(samples, dist):
    keys, counts = np.unique(samples, axis=0, return_counts=True)
    emp = {tuple(k): c / len(samples) for k, c in zip(keys, counts)}
    seen = set(emp)
    tv = 0.0
    for s, p in zip(dist.support, dist.probs):
        tv += abs(emp.get(s, 0.0) - p)
        seen.discard(s)
    tv += sum(emp[s] for s in seen)  # mass outside the support
    return tv / 2.0


# ---------------------------------------------------------------------------
# two-token families
# ---------------------------------------------------------------------------

def test_det2_pairs():
    d = exact_distribution(dataset_spec("det2"))
    assert len(d.support) == 10
    assert all(abs(p - 0.1) < 1e-15 for p in d.probs)
    assert (9, 0) in d.support          # wrap-around
    assert (0, 1) in d.support
    assert d.validity((3, 4)) and not d.validity((3, 5))


def test_det2_sampling_statistics():
    samples = gen_det2(np.random.default_rng(0), size=100_000)
    keys, counts = np.unique(samples, axis=0, return_counts=True)
    assert len(keys) == 10
    assert np.all(np.abs(counts / 100_000 - 0.1) < 0.01)


def test_nonuni2_probabilities():
    d = exact_distribution(dataset_spec("nonuni2"))
    assert abs(sum(d.probs) - 1.0) < 1e-12
    assert abs(d.prob((9, 0)) - 10 / 55) < 1e-15
    assert abs(d.prob((0, 1)) - 1 / 55) < 1e-15
    samples = gen_nonuni2(np.random.default_rng(1), size=100_000)
    emp01 = np.mean((samples[:, 0] == 0) & (samples[:, 1] == 1))
    assert abs(emp01 - 1 / 55) < 0.004


def test_varp2_table():
    d = exact_distribution(dataset_spec("varp2", p=0.5))
    assert len(d.support) == 100
    assert abs(d.prob((3, 4)) - 0.05) < 1e-15
    assert abs(d.prob((3, 7)) - 0.05 / 9) < 1e-15


def test_varp2_p1_equals_det2():
    a = exact_distribution(dataset_spec("varp2", p=1.0))
    b = exact_distribution(dataset_spec("det2"))
    assert a.support == b.support
    assert np.allclose(a.probs, b.probs)


def test_varp2_p0_uniform_over_non_successors():
    d = exact_distribution(dataset_spec("varp2", p=0.0))
    assert len(d.support) == 90
    assert all((j != (k + 1) % 10) for k, j in d.support)
    assert np.allclose(d.probs, 1 / 90)


def test_varp2_conditional_split():
    samples = gen_varp2(0.5, 10, np.random.default_rng(2), size=200_000)
    succ = np.mean(samples[:, 1] == (samples[:, 0] + 1) % 10)
    assert abs(succ - 0.5) < 0.01


@pytest.mark.parametrize("name,p", [("det2", None), ("nonuni2", None), ("varp2", 0.5),
                                    ("d1", None), ("d2", None)])
def test_generators_match_tables(name, p):
    spec = dataset_spec(name, p=p)
    dist = exact_distribution(spec)
    samples = sample_batch(spec, np.random.default_rng(3), 1_000_000)
    assert tv_distance(samples, dist) < 0.005


# ---------------------------------------------------------------------------
# four-token families
# ---------------------------------------------------------------------------

def test_d1_support():
    d = exact_distribution(dataset_spec("d1"))
    assert len(d.support) == 10
    assert (7, 8, 9, 0) in d.support
    s = gen_d1(np.random.default_rng(4), size=1000)
    assert np.all((s[:, 1] - s[:, 0]) % 10 == 1)
    assert np.all((s[:, 3] - s[:, 2]) % 10 == 1)


def test_d2_support_and_block_independence():
    d = exact_distribution(dataset_spec("d2"))
    assert len(d.support) == 100
    s = gen_d2(np.random.default_rng(5), size=1_000_000)
    # plug-in mutual information between the two halves (the first token of
    # each pair determines it, so token marginals suffice)
    a = s[:, 0]
    b = s[:, 2]
    joint = np.zeros((10, 10))
    np.add.at(joint, (a, b), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
    assert mi < 0.01


# ---------------------------------------------------------------------------
# mini-Sudoku
# ---------------------------------------------------------------------------

def brute_force_grid_count():
    """Independent oracle: build all grids from row permutations."""
    rows = list(itertools.permutations((1, 2, 3, 4)))
    count = 0
    found = set()
    for r0 in rows:
        for r1 in rows:
            for r2 in rows:
                for r3 in rows:
                    g = np.array([r0, r1, r2, r3])
                    if is_valid_grid(g.reshape(-1)):
                        count += 1
                        found.add(tuple(g.reshape(-1)))
    return count, found


def test_grid_enumeration_matches_brute_force():
    grids = all_sudoku_grids()
    assert len(grids) == 288
    count, found = brute_force_grid_count()
    assert count == 288
    assert set(grids) == found


def test_all_grids_reachable():
    spec = dataset_spec("minisudoku")
    batch = sample_batch(spec, np.random.default_rng(6), 100_000)
    distinct = {tuple(row[17:33]) for row in batch}
    assert len(distinct) >= 287


def test_sudoku_sequence_layout_and_validity():
    spec = dataset_spec("minisudoku")
    batch = sample_batch(spec, np.random.default_rng(7), 500)
    assert batch.shape == (500, SUDOKU_LEN)
    assert np.all(batch[:, 16] == SEP_ID)
    assert np.all(batch[:, 33] == EOS_ID)
    for row in batch[:100]:
        assert is_valid_sudoku_sequence(row)
    givens_counts = (batch[:, :16] != BLANK_ID).sum(axis=1)
    assert givens_counts.min() >= 6 and givens_counts.max() <= 12


def test_full_givens_puzzle_equals_solution():
    puzzle, solution, seq = gen_minisudoku(np.random.default_rng(8), givens=16)
    assert np.array_equal(puzzle, solution)
    assert is_valid_sudoku_sequence(seq)


def test_sudoku_validity_rejects_bad_sequences():
    _, _, seq = gen_minisudoku(np.random.default_rng(9))
    bad = seq.copy()
    bad[17] = bad[18]                      # duplicate in a row
    assert not is_valid_sudoku_sequence(bad)
    bad = seq.copy()
    bad[16] = EOS_ID                       # wrong separator
    assert not is_valid_sudoku_sequence(bad)
    given = np.flatnonzero(seq[:16] != BLANK_ID)
    if len(given):
        bad = seq.copy()
        pos = int(given[0])
        bad[17 + pos] = seq[17 + pos] % 4 + 1  # contradict a given
        assert not is_valid_sudoku_sequence(bad)


def test_prompt_mask_marks_puzzle_sep_eos():
    m = sudoku_prompt_mask()
    assert m.shape == (SUDOKU_LEN,)
    assert m[:17].all() and m[33] and not m[17:33].any()


def test_validity_only_distribution_has_no_table():
    d = exact_distribution(dataset_spec("minisudoku"))
    assert not d.enumerable
    with pytest.raises(ValueError, match="validity-only"):
        d.sample(np.random.default_rng(0), 3)
    _, _, seq = gen_minisudoku(np.random.default_rng(10))
    assert d.validity(seq)


# ---------------------------------------------------------------------------
# spec plumbing
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError, match="unknown dataset"):
        dataset_spec("nope")
    with pytest.raises(ValueError, match="p in"):
        dataset_spec("varp2", p=1.5)
    with pytest.raises(ValueError, match="givens"):
        dataset_spec("minisudoku", givens=(3, 20))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(2, 12))
def test_varp2_tables_always_normalized(p, V):
    d = exact_distribution(dataset_spec("varp2", p=p, vocab=V))
    assert abs(d.probs.sum() - 1.0) < 1e-9
    assert all(d.validity(s) for s in d.support)
