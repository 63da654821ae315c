"""Regenerate tests/golden/reference.json from the current build.

Run only when a deliberate numerical change is made; the test suite treats
the stored values as the reference.
"""
import json
from pathlib import Path

import numpy as np

from residualvit.distill import default_interleave, gen_synthetic_corpus
from residualvit.residual import ResidualTokenizer, encode_p
from residualvit.teacher import DualEncoder, EncoderConfig, Frame

OUT = Path(__file__).resolve().parents[1] / "tests" / "golden" / "reference.json"


def checkerboard(cfg: EncoderConfig) -> Frame:
    gy, gx = np.indices(cfg.grid)
    cells = ((gy + gx) % 2 * 255).astype(np.uint8)
    pix = np.kron(cells, np.ones((cfg.P, cfg.P), dtype=np.uint8))
    return Frame(np.repeat(pix[:, :, None], cfg.C, axis=2), 0)


def main() -> None:
    cfg = EncoderConfig()
    model = DualEncoder(cfg)
    image = model.encode_full(model.patchify(checkerboard(cfg))).values
    text = model.encode_text([3, 1, 4]).values

    video = gen_synthetic_corpus(1, 2, seed=0, cfg=cfg).videos[0]
    f0, f1 = video.frame_list()
    A = ResidualTokenizer.init(cfg.b, cfg.d, 0)
    student = encode_p(model, model.encode_full(model.patchify(f0)), model.patchify(f1),
                       default_interleave(2), A)
    teacher = model.encode_full(model.patchify(f1))

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps({
        "checksum": model.checksum(),
        "checkerboard_feature": image.tolist(),
        "text_3_1_4": text.tolist(),
        "student_cosine": float(student.cosine(teacher)),
    }, indent=1) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
