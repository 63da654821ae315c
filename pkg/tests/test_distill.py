import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from residualvit import autodiff as ad
from residualvit.autodiff import Tape, Tensor
from residualvit.distill import (TrainConfig, TrainingError, default_interleave, gen_synthetic_corpus,
                                 grounding_corpus, mean_cosine_to_teacher, mse_loss, soft_target_loss, train)
from residualvit.residual import ResidualTokenizer


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def batch(seed, B=3, N=2, b=6):
    rng = np.random.default_rng(seed)
    return unit(rng.standard_normal((B, N, b))), unit(rng.standard_normal((B, N, b))), unit(rng.standard_normal((B, b)))


def direct_ce(FS, FV, G, tau=1.0):
    """Loop-level evaluation of both directions with math.fsum."""
    B, N, _ = FS.shape

    def softmax(zs):
        m = max(zs)
        e = [math.exp(z - m) for z in zs]
        s = math.fsum(e)
        return [x / s for x in e]

    terms = []
    for i in range(B):
        for n in range(N):
            q = softmax([float(FV[i, n] @ G[j]) / tau for j in range(B)])
            logits = [float(FS[i, n] @ G[j]) / tau for j in range(B)]
            m = max(logits)
            lse = m + math.log(math.fsum(math.exp(z - m) for z in logits))
            terms += [-q[j] * (logits[j] - lse) for j in range(B)]
    frames = [(i, n) for i in range(B) for n in range(N)]
    for j in range(B):
        q = softmax([float(FV[i, n] @ G[j]) / tau for i, n in frames])
        logits = [float(FS[i, n] @ G[j]) / tau for i, n in frames]
        m = max(logits)
        lse = m + math.log(math.fsum(math.exp(z - m) for z in logits))
        terms += [-qq * (z - lse) for qq, z in zip(q, logits)]
    return math.fsum(terms)


def test_ce_hand_case_oracle():
    FS = unit(np.array([[[1.0, 0.0, 0.0]], [[0.6, 0.8, 0.0]]]))
    FV = unit(np.array([[[0.0, 1.0, 0.0]], [[0.0, 0.6, 0.8]]]))
    G = unit(np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    assert abs(soft_target_loss(FS, FV, G).item() - direct_ce(FS, FV, G)) < 1e-10


@given(st.integers(0, 2**31), st.floats(0.05, 5.0))
@settings(max_examples=30)
def test_ce_random_oracle(seed, tau):
    FS, FV, G = batch(seed)
    assert abs(soft_target_loss(FS, FV, G, tau).item() - direct_ce(FS, FV, G, tau)) < 1e-10


def _entropy(q):
    return float(-(q * np.log(q)).sum())


def test_ce_at_teacher_is_entropy_and_stationary():
    _, FV, G = batch(4)
    B, N, b = FV.shape
    q_lv = ad.softmax(np.einsum("inb,jb->inj", FV, G), axis=-1).data
    q_vl = ad.softmax(G @ FV.reshape(B * N, b).T, axis=-1).data
    assert soft_target_loss(FV, FV, G).item() == pytest.approx(_entropy(q_lv) + _entropy(q_vl), abs=1e-12)
    # soft-target CE has zero gradient wrt its own logits when q == p
    for logits_np, target in ((np.einsum("inb,jb->inj", FV, G), q_lv), (G @ FV.reshape(B * N, b).T, q_vl)):
        logits = Tensor(logits_np, requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(ad.log_softmax(logits, axis=-1) * target) * -1.0
        assert np.max(np.abs(tape.gradient(loss, [logits])[0])) < 1e-15


def test_ce_single_text_lv_zero():
    FS, FV, G = batch(5, B=1, N=3)
    # with one text the L->V softmax is identically 1; only V->L remains
    total = soft_target_loss(FS, FV, G).item()
    assert total == pytest.approx(direct_ce(FS, FV, G), abs=1e-12)
    logits = np.einsum("inb,jb->inj", FS, G)
    assert np.allclose(ad.log_softmax(logits, axis=-1).data, 0.0)


@given(st.integers(0, 2**31))
@settings(max_examples=10)
def test_ce_large_tau_limit(seed):
    FS, FV, G = batch(seed, B=4, N=3)
    B, N = 4, 3
    # L->V direction alone approaches B*N*log B; V->L approaches B*log(B*N)
    limit = B * N * math.log(B) + B * math.log(B * N)
    assert abs(soft_target_loss(FS, FV, G, tau=1e6).item() - limit) < 1e-3


@given(st.integers(0, 2**31), st.permutations(range(4)))
@settings(max_examples=20)
def test_ce_batch_permutation_invariant(seed, perm):
    FS, FV, G = batch(seed, B=4)
    perm = list(perm)
    a = soft_target_loss(FS, FV, G).item()
    b = soft_target_loss(FS[perm], FV[perm], G[perm]).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_ce_validates_inputs():
    FS, FV, G = batch(0)
    with pytest.raises(ValueError):
        soft_target_loss(FS * 2, FV, G)
    with pytest.raises(ValueError):
        soft_target_loss(FS, FV, G[:2])
    with pytest.raises(ValueError):
        soft_target_loss(FS, FV, G, tau=0)


def test_mse_cases():
    FS, FV, _ = batch(1)
    assert mse_loss(FV, FV).item() == 0.0
    a = np.zeros((1, 1, 4))
    b = a.copy()
    b[0, 0, 2] = 0.25
    assert mse_loss(a, b).item() == pytest.approx(0.0625)
    assert mse_loss(a, b, plain_norm=True).item() == pytest.approx(0.25)
    oracle = 0.0
    for i in range(FS.shape[0]):
        for n in range(FS.shape[1]):
            oracle += sum((FS[i, n, k] - FV[i, n, k]) ** 2 for k in range(FS.shape[2]))
    assert mse_loss(FS, FV).item() == pytest.approx(oracle, abs=1e-12)


# corpus

def test_corpus_deterministic(cfg):
    a = gen_synthetic_corpus(4, 5, seed=9, cfg=cfg)
    b = gen_synthetic_corpus(4, 5, seed=9, cfg=cfg)
    assert all(np.array_equal(x.frames, y.frames) and x.text_ids == y.text_ids
               for x, y in zip(a.videos, b.videos))


def test_corpus_temporal_redundancy(train_corpus):
    near, far = [], []
    for v in train_corpus.videos:
        f = v.frames.astype(float)
        near.append(np.abs(f[1] - f[0]).mean())
        far.append(np.abs(f[7] - f[0]).mean())
    assert np.mean(near) < np.mean(far)


def test_grounding_corpus_spans(cfg):
    base = gen_synthetic_corpus(9, 4, seed=2, cfg=cfg)
    videos, queries = grounding_corpus(base, 3, seed=0)
    assert len(videos) == 3 and len(queries) == 9
    assert videos.videos[0].frames.shape[0] == 12
    assert [(q["gt_start"], q["gt_end"]) for q in queries[:3]] == [(0, 4), (4, 8), (8, 12)]


# training

def test_single_frame_videos_rejected(model, cfg):
    corpus = gen_synthetic_corpus(4, 1, seed=0, cfg=cfg)
    with pytest.raises(ValueError, match="n_train"):
        train(corpus, TrainConfig(epochs=1), model, ResidualTokenizer.init(64, 64))


def test_lr_zero_keeps_tokenizer(model, cfg):
    corpus = gen_synthetic_corpus(8, 4, seed=0, cfg=cfg)
    A = ResidualTokenizer.init(64, 64, 0)
    res = train(corpus, TrainConfig(lr=0.0, epochs=2, batch_size=4), model, A, default_interleave(3))
    assert np.array_equal(res.tokenizer.weight, A.weight) and np.array_equal(res.tokenizer.bias, A.bias)
    ce = [h["ce"] for h in res.history]
    assert max(ce) - min(ce) < 1e-12


@pytest.fixture(scope="module")
def trained(aligned_model, train_corpus):
    A0 = ResidualTokenizer.init(64, 64, 0)
    checksum = aligned_model.checksum()
    res = train(train_corpus, TrainConfig(), aligned_model, A0, default_interleave(3))
    assert aligned_model.checksum() == checksum
    return A0, res


def test_ce_training_reduces_loss(trained):
    _, res = trained
    assert len(res.history) == 6
    assert res.history[-1]["ce"] < res.history[0]["ce"]


def test_mse_training_raises_cosine(aligned_model, train_corpus, eval_corpus):
    A0 = ResidualTokenizer.init(64, 64, 0)
    res = train(train_corpus, TrainConfig(loss="mse"), aligned_model, A0, default_interleave(3))
    icfg = default_interleave(2)
    before = mean_cosine_to_teacher(aligned_model, eval_corpus, icfg, A0)
    after = mean_cosine_to_teacher(aligned_model, eval_corpus, icfg, res.tokenizer)
    assert after > before


def test_random_subset_sampling_runs(model, cfg):
    corpus = gen_synthetic_corpus(6, 4, seed=1, cfg=cfg)
    res = train(corpus, TrainConfig(epochs=2, batch_size=3, sampling="random-subset", optimizer="sgd", lr=0.1),
                model, ResidualTokenizer.init(64, 64), default_interleave(3))
    assert len(res.history) == 3


def test_nonfinite_training_raises(model, cfg):
    corpus = gen_synthetic_corpus(4, 4, seed=1, cfg=cfg)
    with pytest.raises(TrainingError) as err:
        train(corpus, TrainConfig(epochs=1, optimizer="sgd", lr=float("inf")), model,
              ResidualTokenizer.init(64, 64), default_interleave(3))
    assert err.value.step == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="l1")
