import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from residualvit.autodiff import DimensionError
from residualvit.distill import default_interleave, gen_synthetic_corpus
from residualvit.reduction import ReductionConfig
from residualvit.residual import (InterleaveConfig, ResidualTokenizer, encode_p, encode_video_interleaved,
                                  naive_cost, extended_cost, frame_kinds, residual_tokenize, savings)
from residualvit.teacher import EncoderConfig, Feature, count_flops_full, model_parameter_count

from conftest import random_frame

GOLDEN = json.loads((Path(__file__).parent / "golden" / "reference.json").read_text())
NO_REDUCTION = InterleaveConfig(N=2, reduction=ReductionConfig(mode="none"), use_residual=False)


def test_tokenize_zero_and_identity():
    f = Feature(np.random.default_rng(0).standard_normal(8))
    assert np.array_equal(residual_tokenize(f, ResidualTokenizer.zeros(8, 5)), np.zeros(5))
    eye = ResidualTokenizer(np.eye(8), np.zeros(8))
    assert np.array_equal(residual_tokenize(f, eye), f.values)


def test_tokenize_oracle():
    rng = np.random.default_rng(1)
    A = ResidualTokenizer(rng.standard_normal((6, 4)), rng.standard_normal(4))
    f = rng.standard_normal(6)
    oracle = [sum(f[i] * A.weight[i, j] for i in range(6)) + A.bias[j] for j in range(4)]
    assert np.allclose(residual_tokenize(f, A), oracle, atol=1e-12)
    with pytest.raises(DimensionError):
        residual_tokenize(np.ones(5), A)


def test_tokenizer_param_count(cfg):
    assert ResidualTokenizer.init(cfg.b, cfg.d).n_params == cfg.b * cfg.d + cfg.d


def test_tokenizer_param_share_at_large_geometry():
    big = EncoderConfig(H=224, W=224, P=14, L=24, d=1024, n_heads=16, b=768, vocab=8)
    share = (big.b * big.d + big.d) / model_parameter_count(big, vision_only=True)
    assert share < 0.003


@pytest.mark.parametrize("seed", range(10))
def test_encode_p_degenerate_identity(model, cfg, seed):
    seq = model.patchify(random_frame(cfg, seed))
    for icfg in (NO_REDUCTION, InterleaveConfig(reduction=ReductionConfig(p=0.0), use_residual=False)):
        assert np.array_equal(encode_p(model, None, seq, icfg).values, model.encode_full(seq).values)


def test_residual_token_changes_output(model, cfg):
    seq = model.patchify(random_frame(cfg, 0))
    ref = model.encode_full(seq)
    icfg = InterleaveConfig(reduction=ReductionConfig(p=0.0))
    out = encode_p(model, ref, seq, icfg, ResidualTokenizer.init(cfg.b, cfg.d, 0))
    assert not np.array_equal(out.values, ref.values)


def test_encode_p_needs_reference(model, cfg):
    with pytest.raises(ValueError):
        encode_p(model, None, model.patchify(random_frame(cfg, 0)), InterleaveConfig())


def test_golden_student_cosine(model, cfg):
    f0, f1 = gen_synthetic_corpus(1, 2, seed=0, cfg=cfg).videos[0].frame_list()
    student = encode_p(model, model.encode_full(model.patchify(f0)), model.patchify(f1),
                       default_interleave(2), ResidualTokenizer.init(cfg.b, cfg.d, 0))
    cos = student.cosine(model.encode_full(model.patchify(f1)))
    assert cos == pytest.approx(GOLDEN["student_cosine"], abs=1e-12)


@pytest.mark.parametrize("n,N,expect", [(7, 2, "IPPIPPI"), (5, 2, "IPPIP"), (4, 0, "IIII"), (3, 5, "IPP")])
def test_frame_kinds(n, N, expect):
    kinds, _ = frame_kinds(n, N)
    assert "".join(kinds) == expect


@given(st.integers(1, 60), st.integers(0, 8))
def test_refs_nearest_preceding_i(n, N):
    kinds, refs = frame_kinds(n, N)
    assert kinds[0] == "I"
    for t in range(n):
        r = refs[t]
        assert kinds[r] == "I" and r <= t
        assert all(kinds[u] == "P" for u in range(r + 1, t + 1))


def test_interleaved_n0_is_teacher(model, cfg):
    frames = [random_frame(cfg, s, t) for t, s in enumerate(range(4))]
    seq = encode_video_interleaved(model, frames, InterleaveConfig(N=0), ResidualTokenizer.init(64, 64))
    assert seq.kinds == ["I"] * 4
    for f, row in zip(frames, seq.features):
        assert np.array_equal(row, model.encode_full(model.patchify(f)).values)


def test_interleaved_p_uses_reference(model, cfg):
    frames = gen_synthetic_corpus(1, 7, seed=3, cfg=cfg).videos[0].frame_list()
    A = ResidualTokenizer.init(cfg.b, cfg.d, 0)
    icfg = default_interleave(2)
    seq = encode_video_interleaved(model, frames, icfg, A)
    for t in (1, 2, 4, 5):
        ref = Feature(seq.features[seq.refs[t]])
        direct = encode_p(model, ref, model.patchify(frames[t]), icfg, A)
        assert np.allclose(direct.values, seq.features[t], atol=1e-12)


@pytest.mark.parametrize("rcfg", [
    ReductionConfig(strategy="motion"),
    ReductionConfig(strategy="random", rng_seed=4),
    ReductionConfig(mode="merge", r=3),
    ReductionConfig(mode="resolution", target_resolution=(16, 24)),
])
def test_interleaved_modes_and_workers(model, cfg, rcfg):
    frames = gen_synthetic_corpus(1, 9, seed=5, cfg=cfg).videos[0].frame_list()
    A = ResidualTokenizer.init(cfg.b, cfg.d, 1)
    icfg = InterleaveConfig(N=2, reduction=rcfg)
    one = encode_video_interleaved(model, frames, icfg, A, workers=1)
    three = encode_video_interleaved(model, frames, icfg, A, workers=3)
    assert np.allclose(np.linalg.norm(one.features, axis=1), 1, atol=1e-9)
    assert np.array_equal(one.features, three.features)


def test_motion_field_shape_checked(model, cfg):
    frames = [random_frame(cfg, s, s) for s in range(3)]
    icfg = InterleaveConfig(reduction=ReductionConfig(strategy="motion"))
    with pytest.raises(DimensionError):
        encode_video_interleaved(model, frames, icfg, ResidualTokenizer.init(64, 64), motion=np.zeros((3, 4, 4, 4)))


# cost models

def test_naive_fixed_points():
    assert naive_cost(233.4, 0, 0.85) == pytest.approx(233.4)
    assert naive_cost(233.4, 5, 0.0) == pytest.approx(233.4)
    assert naive_cost(233.4, 2, 0.85) == pytest.approx(101.1, abs=0.1)


@given(st.floats(1, 1e3), st.integers(0, 20), st.floats(0.01, 0.98))
def test_naive_monotone_and_below_extended(c, N, p):
    assert naive_cost(c, N + 1, p) < naive_cost(c, N, p)
    assert naive_cost(c, N + 1, min(p + 0.01, 0.99)) < naive_cost(c, N + 1, p)
    assert extended_cost(c, 256, N, p) >= naive_cost(c, N, p) - 1e-9


def test_cost_rejects_nonpositive():
    with pytest.raises(ValueError):
        naive_cost(0.0, 2, 0.5)


@pytest.mark.parametrize("c,K,cost", [(13.2, 49, 6.1), (50.7, 196, 22.4), (233.4, 256, 102.6)])
def test_extended_cost_table(c, K, cost):
    assert extended_cost(c, K, 2, 0.85) == pytest.approx(cost, abs=0.1)


def test_analytic_mix_near_extended(cfg):
    full = count_flops_full(cfg, cfg.K + 1)
    k = 3
    student = count_flops_full(cfg, k + 2, n_patches=k) + cfg.b * cfg.d
    mix = (full + 2 * student) / 3
    ext = extended_cost(full, cfg.K, 2, 0.85)
    assert abs(mix - ext) / ext < 0.10


def test_savings_helper():
    assert savings(50.0, 200.0) == 0.75
