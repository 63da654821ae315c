import numpy as np
import pytest
from hypothesis import settings

from residualvit.distill import align_text_tower, gen_synthetic_corpus
from residualvit.teacher import DualEncoder, EncoderConfig, Frame

# fixed example streams keep runs reproducible
settings.register_profile("repro", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("repro")


@pytest.fixture(scope="session")
def cfg():
    return EncoderConfig()


@pytest.fixture(scope="session")
def model(cfg):
    return DualEncoder(cfg)


@pytest.fixture(scope="session")
def train_corpus(cfg):
    return gen_synthetic_corpus(64, 8, seed=0, cfg=cfg)


@pytest.fixture(scope="session")
def eval_corpus(cfg):
    return gen_synthetic_corpus(32, 8, seed=1, cfg=cfg)


@pytest.fixture(scope="session")
def aligned_model(model, train_corpus):
    return align_text_tower(model, train_corpus)


def random_frame(cfg, seed, t=0):
    rng = np.random.default_rng(seed)
    return Frame(rng.integers(0, 256, (cfg.H, cfg.W, cfg.C), dtype=np.uint8), t)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
