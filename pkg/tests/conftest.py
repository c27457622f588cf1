import numpy as np
import pytest
import torch

from retina_hybrid.backbones import BackboneConfig
from retina_hybrid.config import EnsembleBlock, IEViTBlock, ModelConfig
from retina_hybrid.ctran import TransformerStackConfig
from retina_hybrid.data import generate_synthetic_dataset

TINY = BackboneConfig("tiny_test", 8)


def tiny_stack(layers=2, d=16, heads=2, dropout=0.0):
    return TransformerStackConfig(layers=layers, heads=heads, d=d, ffn_dim=2 * d, dropout=dropout)


def tiny_model_config(model_type: str, **kw) -> ModelConfig:
    base = dict(
        type=model_type, backbone="tiny_test", backbone2="tiny_test", backbone_dim=8,
        num_labels=20, image_size=64, layers=2, heads=2, embed_dim=16, ffn_dim=32, dropout=0.0,
        ensemble=EnsembleBlock(variant=2 if model_type == "ensemble_v2" else 1),
        ievit=IEViTBlock(patch_mode="uniform", patch_size=16, layers=2, dim=16, heads=2),
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def synth16(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth16")
    manifest = generate_synthetic_dataset(16, seed=7, class_skew=0.3, out_dir=out, image_size=64)
    return manifest, out


# --- acceptance summary ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    mark = _MARKS.get(report.nodeid)
    if mark is None:
        return
    n, title = mark
    outcome = "PASS" if report.passed else "FAIL"
    prev = _CRITERIA.get(n)
    if prev is None or prev[0] == "PASS":
        _CRITERIA[n] = (outcome, title)


_MARKS: dict[str, tuple[int, str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _MARKS[item.nodeid] = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, title = _CRITERIA[n]
        terminalreporter.write_line(f"[{outcome}] {n:2d}. {title}")
