import numpy as np
import pytest

from gifl.core_types import save_image, save_mask
from gifl.dataset import DatasetConfig, build_dataset, make_mask_bank, make_toy_sources
from gifl.model import EncoderConfig
from gifl.uflt import UFLTConfig

TOY_SIZE = 32

# verdict lines filled in by test_acceptance.py, printed after the run
ACCEPTANCE_LINES = {}


def tiny_uflt(**kw) -> UFLTConfig:
    base = dict(layers=2, dim=64, heads=4, patch=4, seed=0)
    base.update(kw)
    return UFLTConfig(**base)


def tiny_encoder(**kw) -> EncoderConfig:
    base = dict(layers=2, dim=64, heads=4, patch=4, pos_grid=TOY_SIZE // 4)
    base.update(kw)
    return EncoderConfig(**base)


def write_corpus(root, n_sources=8, n_masks=16, seed=7):
    for i, img in enumerate(make_toy_sources(n_sources, TOY_SIZE, seed)):
        save_image(img, root / "src" / f"s{i:02d}.png")
    for i, m in enumerate(make_mask_bank(n_masks, TOY_SIZE, seed + 1)):
        save_mask(m, root / "masks" / f"m{i:02d}.png")
    return root


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("toy_corpus"))


@pytest.fixture(scope="session")
def toy_manifest(toy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_ds")
    cfg = DatasetConfig(
        str(toy_corpus / "src"), str(toy_corpus / "masks"), str(out), image_size=TOY_SIZE, test_fraction=0.25, neg_ratio="2:1"
    )
    build_dataset(cfg)
    return out / "manifest.tsv"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(0)
