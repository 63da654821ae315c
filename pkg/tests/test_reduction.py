import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from residualvit.reduction import (ReductionConfig, area_matrix, downsample_frame, drop_indices,
                                   merge_plan, merge_schedule, merge_step, retained_count, select_drop)
from residualvit.teacher import EncoderConfig, Frame, TokenSequence

from conftest import random_frame

GRID = np.stack(np.divmod(np.arange(16), 4), axis=1)


@pytest.mark.parametrize("K,k", [(49, 8), (196, 30), (256, 39), (16, 3)])
def test_retained_count_backbones(K, k):
    assert retained_count(K, 0.85) == k


def test_retained_count_edges():
    assert retained_count(37, 0.0) == 37
    assert retained_count(40, 0.85) == 6  # (1-p)K lands a hair above 6 in floating point
    assert retained_count(3, 0.99) == 1


@given(st.integers(1, 500), st.floats(0, 0.99), st.floats(0, 0.99))
def test_retained_count_monotone(K, p1, p2):
    lo, hi = sorted((p1, p2))
    assert retained_count(K, hi) <= retained_count(K, lo)
    assert retained_count(K + 1, lo) >= retained_count(K, lo)


def test_config_validation():
    with pytest.raises(ValueError):
        ReductionConfig(mode="merge", r=0)
    with pytest.raises(ValueError):
        ReductionConfig(mode="resolution")
    with pytest.raises(ValueError):
        ReductionConfig(strategy="diagonal")
    with pytest.raises(ValueError):
        ReductionConfig(p=1.0)


def test_center_four_middle():
    keep = drop_indices(GRID, (4, 4), 4, "center")
    assert {tuple(GRID[i]) for i in keep} == {(1, 1), (1, 2), (2, 1), (2, 2)}


def test_motion_ties_row_major():
    assert list(drop_indices(GRID, (4, 4), 3, "motion", scores=np.ones(16))) == [0, 1, 2]


def test_motion_picks_highest():
    scores = np.zeros(16)
    scores[[5, 9, 14]] = [3.0, 2.0, 1.0]
    assert list(drop_indices(GRID, (4, 4), 2, "motion", scores=scores)) == [5, 9]


def test_motion_needs_scores():
    with pytest.raises(ValueError):
        drop_indices(GRID, (4, 4), 3, "motion")
    with pytest.raises(ValueError):
        drop_indices(GRID, (4, 4), 3, "motion", scores=np.ones(5))


def test_uniform_stride_pattern():
    # stride 16 // 3 = 5, first index 2
    assert list(drop_indices(GRID, (4, 4), 3, "uniform")) == [2, 7, 12]


@pytest.mark.parametrize("strategy", ["random", "uniform", "center", "motion"])
@given(seed=st.integers(0, 2**31), p=st.floats(0, 0.95))
@settings(max_examples=20, deadline=None)
def test_select_drop_invariants(model, cfg, strategy, seed, p):
    seq = model.patchify(random_frame(cfg, seed))
    rcfg = ReductionConfig(p=p, strategy=strategy, rng_seed=seed)
    scores = np.random.default_rng(seed).random(cfg.K)
    out = select_drop(seq, rcfg, scores, grid=cfg.grid)
    k = retained_count(cfg.K, p)
    assert out.n_patches == k
    assert np.array_equal(out.tokens[0], seq.tokens[0])  # CLS kept
    # survivors are a subset and keep relative order
    idx = [int(r * 4 + c) for r, c in out.positions]
    assert idx == sorted(idx)
    assert np.array_equal(out.patch_tokens, seq.patch_tokens[idx])
    again = select_drop(seq, rcfg, scores, grid=cfg.grid)
    assert np.array_equal(again.tokens, out.tokens)


def test_drop_p0_identity(model, cfg):
    seq = model.patchify(random_frame(cfg, 1))
    out = select_drop(seq, ReductionConfig(p=0.0, strategy="random"), grid=cfg.grid)
    assert np.array_equal(out.tokens, seq.tokens)


def _seq(tokens):
    n = tokens.shape[0]
    return TokenSequence(np.vstack([np.zeros((1, tokens.shape[1])), tokens]),
                         np.stack([np.zeros(n, int), np.arange(n)], axis=1), np.ones(n))


def test_merge_r0_identity():
    seq = _seq(np.random.default_rng(0).standard_normal((6, 3)))
    assert merge_step(seq, seq.tokens, 0) is seq


def test_merge_two_identical():
    v = np.array([0.3, -1.0, 2.0])
    seq = _seq(np.stack([v, v]))
    out = merge_step(seq, seq.tokens, 1)
    assert out.n_patches == 1
    assert out.weights.tolist() == [2.0]
    assert np.allclose(out.patch_tokens[0], v, atol=1e-15)


@given(st.integers(0, 2**31), st.integers(2, 30), st.integers(1, 20))
@settings(max_examples=60)
def test_merge_conserves_weight(seed, n, r):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((n, 4))
    w = rng.integers(1, 5, n).astype(float)
    pos = np.stack([np.zeros(n, int), np.arange(n)], axis=1)
    M, new_w, new_pos = merge_plan(keys, w, pos, r)
    assert new_w.sum() == pytest.approx(w.sum(), rel=1e-12)
    assert M.shape == (n - min(n // 2, r), n)
    assert np.allclose(M.sum(axis=1), 1.0)  # rows are weighted averages
    assert np.allclose(M.T @ new_w, w)  # every input token's mass lands exactly once
    assert {tuple(p) for p in new_pos} <= {tuple(p) for p in pos}


def test_merge_schedule_collapses():
    counts = merge_schedule(196, 45, 12)
    assert counts[:10] == [196, 151, 106, 61, 31, 16, 8, 4, 2, 1]
    assert counts.index(1) <= 9


def test_downsample_identity_and_count():
    f = random_frame(EncoderConfig(), 2)
    assert np.array_equal(downsample_frame(f, 32, 32, 8).pixels, f.pixels)
    big = Frame(np.random.default_rng(0).integers(0, 256, (224, 224, 3), dtype=np.uint8))
    small = downsample_frame(big, 96, 96, 16)
    assert small.pixels.shape == (96, 96, 3)
    assert (96 // 16) ** 2 == 36


def test_downsample_constant_color():
    f = Frame(np.full((224, 224, 3), 77, np.uint8))
    assert np.all(downsample_frame(f, 96, 96, 16).pixels == 77)


def test_downsample_bad_target():
    with pytest.raises(ValueError):
        downsample_frame(random_frame(EncoderConfig(), 0), 20, 20, 8)


def test_area_matrix_rows_average():
    R = area_matrix(7, 3)
    assert np.allclose(R.sum(axis=1), 1.0)
    assert np.allclose(R.sum(axis=0), 3 / 7)
