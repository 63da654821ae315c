"""Cost versus quality across interleave factors, with and without the
residual token. Writes plot-ready CSV."""
import argparse
import time

from residualvit import bench, formats
from residualvit.distill import (TrainConfig, align_text_tower, default_interleave, gen_synthetic_corpus,
                                 grounding_corpus, train)
from residualvit.grounding import GroundingConfig
from residualvit.residual import ResidualTokenizer
from residualvit.teacher import DualEncoder, EncoderConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/tradeoff.csv")
    ap.add_argument("--n", default="1,2,3,5")
    ap.add_argument("--p", type=float, default=0.85)
    ap.add_argument("--window", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = EncoderConfig()
    t0 = time.perf_counter()
    train_c = gen_synthetic_corpus(64, 8, args.seed, cfg)
    eval_c = gen_synthetic_corpus(32, 8, args.seed + 1, cfg)
    model = align_text_tower(DualEncoder(cfg), train_c)
    res = train(train_c, TrainConfig(), model, ResidualTokenizer.init(cfg.b, cfg.d, args.seed),
                default_interleave(3, args.p))
    grounding = grounding_corpus(eval_c, 4, args.seed + 2)
    rows = bench.tradeoff_rows(model, eval_c, grounding, res.tokenizer,
                               [int(x) for x in args.n.split(",")], args.p,
                               GroundingConfig(window=args.window))
    header, table = bench.report_tradeoff(rows)
    formats.write_csv(args.out, header, table)
    for r in rows:
        print(f"{r['setting']:>10}  savings {r['savings_pct']:5.1f}%  "
              f"cos {r['mean_cosine']:.4f}  R@1 {r['r_at_1']:.3f}")
    print(f"done in {time.perf_counter() - t0:.1f}s -> {args.out}")


if __name__ == "__main__":
    main()
