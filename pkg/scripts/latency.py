"""Wall-clock latency of full versus interleaved encoding across batch sizes."""
import argparse

from residualvit import bench, formats
from residualvit.distill import default_interleave
from residualvit.teacher import DualEncoder, EncoderConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/latency.csv")
    ap.add_argument("--batch", default="1,2,4,8,16,32,64,128")
    ap.add_argument("--repetitions", type=int, default=100)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    model = DualEncoder(EncoderConfig())
    report = bench.bench_latency(model, default_interleave(2, 0.85), [int(b) for b in args.batch.split(",")],
                                 repetitions=args.repetitions, workers=args.workers)
    formats.write_csv(args.out, report.columns, report.as_rows())
    for r in report.rows:
        print(f"batch {r.batch:4d}  full {1e3 * r.full_mean_s:8.2f} ms  "
              f"interleaved {1e3 * r.interleaved_mean_s:8.2f} ms  speedup {r.speedup:.2f}x")


if __name__ == "__main__":
    main()
