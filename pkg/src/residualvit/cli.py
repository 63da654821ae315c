"""``rvt`` command-line interface.

Exit codes: 0 success, 1 usage error (bad flags or config), 2 data error
(missing or malformed input files).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, formats
from .config import ConfigError, RunConfig, apply_overrides, load
from .distill import align_text_tower, gen_synthetic_corpus, grounding_corpus, train
from .formats import FormatError
from .grounding import MomentPrediction, evaluate, ground_many
from .residual import ResidualTokenizer, encode_video_interleaved, extended_cost, savings, worker_count
from .teacher import DualEncoder, count_flops_full, init_weights

log = logging.getLogger("residualvit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# flag -> dotted config key
_FLAG_KEYS = {
    "out": "paths.out", "corpus": "paths.corpus", "weights": "paths.weights",
    "tokenizer": "paths.tokenizer", "features": "paths.features", "queries": "paths.queries",
    "results": "paths.results", "motion": "paths.motion",
    "n": "interleave.N", "p": "reduction.p", "strategy": "reduction.strategy",
    "no_residual": None, "epochs": "train.epochs", "lr": "train.lr", "loss": "train.loss",
    "tau": "train.tau", "window": "grounding.window", "alpha": "grounding.alpha",
    "beta": "grounding.beta", "mode": "grounding.mode",
}


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rvt", description="Interleaved I/P feature video encoding toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="synthetic corpora, queries and teacher weights")

    p = sub.add_parser("distill", parents=[common], help="train the residual tokenizer")
    p.add_argument("--corpus")
    p.add_argument("--weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=["ce", "mse"])
    p.add_argument("--tau", type=float)

    p = sub.add_parser("encode", parents=[common], help="interleaved feature extraction")
    for flag in ("--corpus", "--weights", "--tokenizer", "--motion", "--features"):
        p.add_argument(flag)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--strategy")
    p.add_argument("--no-residual", action="store_true")

    p = sub.add_parser("ground", parents=[common], help="zero-shot moment localization")
    for flag in ("--features", "--queries", "--weights", "--results", "--mode"):
        p.add_argument(flag)
    p.add_argument("--window", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)

    p = sub.add_parser("eval", parents=[common], help="R@1 and mIoU of grounding results")
    p.add_argument("--queries")
    p.add_argument("--results")

    p = sub.add_parser("cost", parents=[common], help="analytic encoding cost")
    p.add_argument("--cev", type=float, required=True, help="full-encoder cost per frame")
    p.add_argument("--k", type=int, required=True, help="patch tokens per frame")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=float, required=True)

    p = sub.add_parser("bench", parents=[common], help="wall-clock latency")
    p.add_argument("--batch", type=_int_list, default=[1, 8, 64])
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--workers", type=int)
    p.add_argument("--weights")
    p.add_argument("--tokenizer")
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=float)

    p = sub.add_parser("sweep", parents=[common], help="cost versus interleave factor")
    p.add_argument("--n", type=_int_list, default=[1, 2, 3, 5, 10])
    p.add_argument("--p", type=float)
    p.add_argument("--cev", type=float, help="full cost (default: toy analytic MACs)")
    p.add_argument("--k", type=int)
    p.add_argument("--tradeoff", action="store_true",
                   help="also measure quality per setting (needs gen-data and distill outputs)")
    p.add_argument("--weights")
    p.add_argument("--tokenizer")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if key is None or value is None or isinstance(value, list):
            continue
        overrides[key] = value
    if getattr(args, "no_residual", False):
        overrides["interleave.use_residual"] = False
    overrides.update(_parse_set(args.set))
    return apply_overrides(cfg, overrides) if overrides else cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path(cfg: RunConfig, key: str, default: str) -> Path:
    value = getattr(cfg.paths, key)
    return Path(value) if value else Path(cfg.paths.out) / default


def _emit_config(cfg: RunConfig, command: str) -> None:
    formats.atomic_write_text(_out(cfg) / f"{command}.config.json", cfg.to_json())


def _load_model(cfg: RunConfig) -> DualEncoder:
    path = _path(cfg, "weights", "teacher.rvtw")
    model = formats.read_weights(path)
    if model.cfg != cfg.encoder_config():
        raise FormatError(f"{path}: encoder geometry differs from the configured one")
    return model


def _load_tokenizer(cfg: RunConfig, model: DualEncoder, required: bool) -> ResidualTokenizer | None:
    path = _path(cfg, "tokenizer", "tokenizer.rvta")
    if not path.exists():
        if required:
            raise FileNotFoundError(f"no such file: {path} (run `rvt distill` first)")
        return None
    A = formats.read_tokenizer(path)
    if A.weight.shape != (model.cfg.b, model.cfg.d):
        raise FormatError(f"{path}: tokenizer is {A.weight.shape}, model needs {(model.cfg.b, model.cfg.d)}")
    return A


# subcommands

def cmd_gen_data(cfg: RunConfig, args) -> None:
    enc = cfg.encoder_config()
    d = cfg.data
    out = _out(cfg)
    train_c = gen_synthetic_corpus(d.n_videos, d.frames_per_video, cfg.seed, enc)
    eval_c = gen_synthetic_corpus(d.eval_videos, d.frames_per_video, cfg.seed + 1, enc)
    g_corpus, queries = grounding_corpus(eval_c, d.clips_per_video, cfg.seed + 2, cfg.grounding.fps)
    model = DualEncoder(enc, init_weights(enc))
    if d.align_text:
        model = align_text_tower(model, train_c)
    formats.write_corpus(out / "corpus.rvtc", train_c)
    formats.write_corpus(out / "eval_corpus.rvtc", eval_c)
    formats.write_corpus(out / "grounding.rvtc", g_corpus)
    formats.write_queries(out / "queries.csv", queries)
    formats.write_weights(out / "teacher.rvtw", model)
    print(f"wrote {len(train_c)} training videos, {len(eval_c)} eval videos, "
          f"{len(queries)} grounding queries to {out}")


def cmd_distill(cfg: RunConfig, args) -> None:
    model = _load_model(cfg)
    corpus = formats.read_corpus(_path(cfg, "corpus", "corpus.rvtc"))
    tcfg = cfg.train_config()
    icfg = cfg.interleave_config()
    A0 = ResidualTokenizer.init(model.cfg.b, model.cfg.d, tcfg.seed)
    result = train(corpus, tcfg, model, A0, icfg)
    out = _out(cfg)
    formats.write_tokenizer(_path(cfg, "tokenizer", "tokenizer.rvta"), result.tokenizer)
    formats.write_loss_history(out / "loss_history.csv", result.history)
    first, last = result.history[0], result.history[-1]
    print(f"mean cosine {first['mean_cosine']:.4f} -> {last['mean_cosine']:.4f} "
          f"({tcfg.epochs} epochs, {tcfg.loss} loss)")


def cmd_encode(cfg: RunConfig, args) -> None:
    model = _load_model(cfg)
    icfg = cfg.interleave_config()
    A = _load_tokenizer(cfg, model, required=icfg.use_residual)
    corpus = formats.read_corpus(_path(cfg, "corpus", "grounding.rvtc"))
    feat_dir = _path(cfg, "features", "features")
    motion_dir = Path(cfg.paths.motion) if cfg.paths.motion else None
    workers = worker_count()
    for i, v in enumerate(corpus.videos):
        motion = None
        if motion_dir is not None:
            motion = formats.read_motion(motion_dir / f"v{i:05d}.rvtm")
        seq = encode_video_interleaved(model, v.frame_list(), icfg, A, motion, workers)
        formats.write_features(feat_dir / f"v{i:05d}.rvtf", seq)
    print(f"encoded {len(corpus)} videos into {feat_dir}")


def cmd_ground(cfg: RunConfig, args) -> None:
    model = _load_model(cfg)
    gcfg = cfg.grounding_config()
    queries = formats.read_queries(_path(cfg, "queries", "queries.csv"))
    feat_dir = _path(cfg, "features", "features")
    feats = {}
    for q in queries:
        if q["video_id"] not in feats:
            feats[q["video_id"]] = formats.read_features(feat_dir / f"{q['video_id']}.rvtf")[0].astype(np.float64)
    jobs = [(feats[q["video_id"]], model.encode_text(q["text_ids"]).values) for q in queries]
    preds = ground_many(jobs, gcfg, cfg.grounding.fps, worker_count())
    rows = [[q["query_id"], rank, m.start, m.end, m.score]
            for q, ps in zip(queries, preds) for rank, m in enumerate(ps, 1)]
    path = _path(cfg, "results", "results.csv")
    formats.write_csv(path, formats.RESULT_COLUMNS, rows)
    print(f"grounded {len(queries)} queries into {path}")


def cmd_eval(cfg: RunConfig, args) -> None:
    queries = formats.read_queries(_path(cfg, "queries", "queries.csv"))
    path = _path(cfg, "results", "results.csv")
    rows = formats.read_csv(path)
    missing = [c for c in formats.RESULT_COLUMNS if rows and c not in rows[0]]
    if missing:
        raise FormatError(f"{path}: missing result columns {missing}")
    by_query: dict[str, list] = {}
    for r in sorted(rows, key=lambda r: int(r["rank"])):
        by_query.setdefault(r["query_id"], []).append(
            MomentPrediction(float(r["start"]), float(r["end"]), float(r["score"])))
    metrics = evaluate([(by_query.get(q["query_id"], []), (q["gt_start"], q["gt_end"])) for q in queries])
    formats.atomic_write_text(_out(cfg) / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for k, v in metrics.items():
        print(f"{k}: {v:.4f}")


def cmd_cost(cfg: RunConfig, args) -> None:
    try:
        cost = extended_cost(args.cev, args.k, args.n, args.p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{cost:.1f} GFLOPs (−{round(100 * savings(cost, args.cev))}%)")


def cmd_bench(cfg: RunConfig, args) -> None:
    path = _path(cfg, "weights", "teacher.rvtw")
    enc = cfg.encoder_config()
    model = _load_model(cfg) if path.exists() else DualEncoder(enc, init_weights(enc))
    icfg = cfg.interleave_config()
    A = _load_tokenizer(cfg, model, required=False)
    try:
        report = bench.bench_latency(model, icfg, args.batch, A, args.repetitions, args.warmup,
                                     args.workers, cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(cfg) / "bench.csv"
    formats.write_csv(out, report.columns, report.as_rows())
    for r in report.rows:
        print(f"batch {r.batch:4d}: full {1e3 * r.full_mean_s:.2f}±{1e3 * r.full_std_s:.2f} ms, "
              f"interleaved {1e3 * r.interleaved_mean_s:.2f}±{1e3 * r.interleaved_std_s:.2f} ms, "
              f"speedup {r.speedup:.2f}x")


def cmd_sweep(cfg: RunConfig, args) -> None:
    enc = cfg.encoder_config()
    p = cfg.reduction.p
    c_full = args.cev if args.cev else float(count_flops_full(enc, enc.K + 1))
    K = args.k if args.k else enc.K
    try:
        rows = bench.sweep_costs(c_full, K, args.n, p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(cfg)
    formats.write_csv(out / "sweep.csv", bench.SWEEP_COLUMNS, rows)
    print("N,naive_savings_pct,extended_savings_pct")
    for r in rows:
        print(f"{r[0]},{r[3]:.1f},{r[5]:.1f}")
    if args.tradeoff:
        model = _load_model(cfg)
        A = _load_tokenizer(cfg, model, required=True)
        eval_c = formats.read_corpus(out / "eval_corpus.rvtc")
        g = (formats.read_corpus(out / "grounding.rvtc"), formats.read_queries(_path(cfg, "queries", "queries.csv")))
        results = bench.tradeoff_rows(model, eval_c, g, A, args.n, p, cfg.grounding_config(),
                                      strategy=cfg.reduction.strategy)
        header, trows = bench.report_tradeoff(results)
        formats.write_csv(out / "tradeoff.csv", header, trows)
        print(f"wrote {len(trows)} trade-off rows to {out / 'tradeoff.csv'}")


COMMANDS = {
    "gen-data": cmd_gen_data, "distill": cmd_distill, "encode": cmd_encode, "ground": cmd_ground,
    "eval": cmd_eval, "cost": cmd_cost, "bench": cmd_bench, "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"rvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"rvt: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command != "cost":
            _emit_config(cfg, args.command)
        COMMANDS[args.command](cfg, args)
    except (UsageError, bench.UsageError) as exc:
        print(f"rvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, ValueError) as exc:
        print(f"rvt: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
