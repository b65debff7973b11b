import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tokenhorizon.engine import ArchConfig, MultimodalSequence, init_params  # noqa: E402
from tokenhorizon.harness.recipes import TrainRecipe, cached_model  # noqa: E402

REPO = Path(__file__).resolve().parent.parent
CACHE_DIR = os.environ.get("TOKENHORIZON_TEST_CACHE", str(REPO / ".cache" / "models"))

BASE_RECIPE = TrainRecipe()


def tiny_arch(precision="double", layers=2, width=8, heads=2, vocab=11, max_len=24):
    return ArchConfig(layers, width, heads, 2 * width, vocab, max_len, precision)


def random_sequence(arch, rng, n_prefix=1, n_visual=4, n_question=3, label=None):
    return MultimodalSequence(
        prefix_ids=list(rng.integers(0, arch.vocab_size, n_prefix)),
        visual=rng.normal(size=(n_visual, arch.width)),
        question_ids=list(rng.integers(0, arch.vocab_size, n_question)),
        label=int(rng.integers(0, arch.vocab_size)) if label is None else label,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    arch = tiny_arch()
    return init_params(arch, seed=3)


def trained(seed: int = 0, recipe: TrainRecipe = BASE_RECIPE):
    """Base-preset model trained on both tasks (memoised on disk)."""
    return cached_model(recipe, seed, CACHE_DIR)


@pytest.fixture(scope="session")
def base_model():
    return trained(0)
