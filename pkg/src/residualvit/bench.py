"""Latency harness, cost sweeps and the cost/quality trade-off report."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .distill import Corpus, default_interleave, drop_only, mean_cosine_to_teacher
from .grounding import GroundingConfig, evaluate, ground_many
from .residual import (InterleaveConfig, ResidualTokenizer, encode_i_phase, encode_p_phase,
                       encode_video_interleaved, extended_cost, frame_kinds, naive_cost, savings,
                       token_ratio, worker_count)
from .reduction import retained_count
from .teacher import DualEncoder, Frame, count_flops_full


class UsageError(ValueError):
    pass


@dataclass
class BenchRow:
    batch: int
    N: int
    p: float
    strategy: str
    naive_cost: float
    extended_cost: float
    flops_full: int
    flops_interleaved: float
    full_mean_s: float
    full_std_s: float
    interleaved_mean_s: float
    interleaved_std_s: float
    i_phase_mean_s: float
    p_phase_mean_s: float
    speedup: float
    repetitions: int
    workers: int


@dataclass
class BenchReport:
    rows: list[BenchRow]

    @property
    def columns(self) -> list[str]:
        return list(BenchRow.__dataclass_fields__)

    def as_rows(self) -> list[list]:
        return [list(asdict(r).values()) for r in self.rows]


def _student_flops(model: DualEncoder, icfg: InterleaveConfig) -> int:
    cfg = model.cfg
    r = icfg.reduction
    if r.mode == "drop":
        k = retained_count(cfg.K, r.p)
    elif r.mode == "resolution":
        k = (r.target_resolution[0] // cfg.P) * (r.target_resolution[1] // cfg.P)
    else:
        k = cfg.K
    n = k + 1 + int(icfg.use_residual)
    extra = cfg.b * cfg.d if icfg.use_residual else 0
    return count_flops_full(cfg, n, n_patches=k) + extra


def analytic_flops(model: DualEncoder, icfg: InterleaveConfig) -> tuple[int, float]:
    """Per-frame MACs of the full pass and of the interleaved average."""
    full = count_flops_full(model.cfg, model.cfg.K + 1)
    student = _student_flops(model, icfg)
    return full, (full + icfg.N * student) / (1 + icfg.N)


def random_frames(model: DualEncoder, n: int, seed: int = 0) -> list[Frame]:
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    return [Frame(rng.integers(0, 256, (cfg.H, cfg.W, cfg.C), dtype=np.uint8), t) for t in range(n)]


def _time(fn, repetitions: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(repetitions)
    for i in range(repetitions):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out


def bench_latency(model: DualEncoder, icfg: InterleaveConfig, batch_sizes, A: ResidualTokenizer | None = None,
                  repetitions: int = 100, warmup: int = 3, workers: int | None = None,
                  seed: int = 0) -> BenchReport:
    """Full-encoder vs interleaved wall-clock on the same random frames."""
    if repetitions < 10:
        raise ValueError("repetitions must be >= 10")
    workers = worker_count() if workers is None else workers
    if icfg.use_residual and A is None:
        A = ResidualTokenizer.init(model.cfg.b, model.cfg.d, seed)
    c_full, c_inter = analytic_flops(model, icfg)
    r = icfg.reduction
    rows = []
    for batch in batch_sizes:
        frames = random_frames(model, batch, seed)
        kinds, refs = frame_kinds(batch, icfg.N)
        i_idx = [t for t, k in enumerate(kinds) if k == "I"]
        p_idx = [t for t, k in enumerate(kinds) if k == "P"]
        i_times, p_times = [], []

        def interleaved():
            t0 = time.perf_counter()
            feats = np.zeros((batch, model.cfg.b))
            feats[i_idx] = encode_i_phase(model, frames, i_idx, workers)
            t1 = time.perf_counter()
            encode_p_phase(model, frames, p_idx, feats[refs[p_idx]], icfg, A, workers=workers)
            i_times.append(t1 - t0)
            p_times.append(time.perf_counter() - t1)

        full = _time(lambda: encode_i_phase(model, frames, list(range(batch)), workers), repetitions, warmup)
        inter = _time(interleaved, repetitions, warmup)
        rows.append(BenchRow(
            batch=batch, N=icfg.N, p=r.p, strategy=r.strategy if r.mode == "drop" else r.mode,
            naive_cost=naive_cost(c_full, icfg.N, r.p),
            extended_cost=extended_cost(c_full, model.cfg.K, icfg.N, r.p),
            flops_full=c_full, flops_interleaved=c_inter,
            full_mean_s=float(full.mean()), full_std_s=float(full.std(ddof=1)),
            interleaved_mean_s=float(inter.mean()), interleaved_std_s=float(inter.std(ddof=1)),
            i_phase_mean_s=float(np.mean(i_times[warmup:])), p_phase_mean_s=float(np.mean(p_times[warmup:])),
            speedup=float(full.mean() / inter.mean()), repetitions=repetitions, workers=workers))
    return BenchReport(rows)


# cost sweeps

SWEEP_COLUMNS = ["N", "p", "naive_cost", "naive_savings_pct", "extended_cost", "extended_savings_pct"]


def sweep_costs(c_full: float, K: int, Ns, p: float) -> list[list]:
    rows = []
    for N in Ns:
        nv = naive_cost(c_full, N, p)
        ex = extended_cost(c_full, K, N, p)
        rows.append([N, p, nv, 100 * savings(nv, c_full), ex, 100 * savings(ex, c_full)])
    return rows


# trade-off report

TRADEOFF_COLUMNS = ["setting", "N", "use_residual", "cost", "savings_pct", "mean_cosine", "r_at_1"]


def ground_corpus(model: DualEncoder, videos: Corpus, queries: list[dict], icfg: InterleaveConfig,
                  A: ResidualTokenizer | None, gcfg: GroundingConfig, fps: float = 1.0,
                  workers: int = 1) -> dict[str, float]:
    index = {f"v{i:05d}": i for i in range(len(videos))}
    feats = {}
    for vid, i in index.items():
        feats[vid] = encode_video_interleaved(model, videos.videos[i].frame_list(), icfg, A).features
    jobs = [(feats[q["video_id"]], model.encode_text(q["text_ids"]).values) for q in queries]
    preds = ground_many(jobs, gcfg, fps, workers)
    return evaluate([(p, (q["gt_start"], q["gt_end"])) for p, q in zip(preds, queries)])


def tradeoff_rows(model: DualEncoder, eval_corpus: Corpus, grounding: tuple[Corpus, list[dict]],
                  A: ResidualTokenizer, Ns, p: float, gcfg: GroundingConfig, c_full: float | None = None,
                  strategy: str = "center") -> list[dict]:
    """Cost and quality for each N, with and without the residual token."""
    c_full = c_full or float(count_flops_full(model.cfg, model.cfg.K + 1))
    out = []
    for N in Ns:
        base = default_interleave(N, p, strategy)
        for use_res in (True, False):
            icfg = base if use_res else drop_only(base)
            cost = extended_cost(c_full, model.cfg.K, N, p)
            if not use_res:  # one token fewer per P-frame
                rho = token_ratio(model.cfg.K, p) - 1 / (model.cfg.K + 1)
                cost = c_full * (1 + N * rho) / (1 + N)
            metrics = ground_corpus(model, grounding[0], grounding[1], icfg, A if use_res else None, gcfg)
            out.append({
                "setting": f"N={N}{'+res' if use_res else ''}", "N": N, "use_residual": use_res,
                "cost": cost, "savings_pct": 100 * savings(cost, c_full),
                "mean_cosine": mean_cosine_to_teacher(model, eval_corpus, icfg, A if use_res else None)
                if N > 0 else 1.0,
                "r_at_1": metrics["R@1@0.5"],
            })
    return out


def report_tradeoff(results: list[dict]) -> tuple[list[str], list[list]]:
    """Plot-ready (cost, quality) table; needs at least two settings."""
    if len(results) < 2:
        raise UsageError("a trade-off report needs at least two settings")
    return TRADEOFF_COLUMNS, [[r[c] for c in TRADEOFF_COLUMNS] for r in results]
