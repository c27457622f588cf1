"""Acceptance gate: one test per criterion, summarised in the terminal report.

Each test carries ``@pytest.mark.criterion(n, title)``; conftest prints one
``[PASS]``/``[FAIL]`` line per criterion after the run.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import TINY, tiny_model_config, tiny_stack
from gradcheck import pass_fraction, sampled_gradcheck
from retina_hybrid.backbones import BackboneConfig
from retina_hybrid.config import MODEL_TYPES, TrainConfig, build_model
from retina_hybrid.ctran import CTran, ctran_forward
from retina_hybrid.data import (
    generate_synthetic_dataset,
    lp_ros_oversample,
    weighted_sample_weights,
)
from retina_hybrid.ensemble import EnsembleV1, EnsembleWeights, combined_loss, ensemble_v1_forward
from retina_hybrid.ie_ctran import IECTran, ieect_forward
from retina_hybrid.ievit import IEViT, IEViTConfig, ievit_forward
from retina_hybrid.metrics import average_precision, binary_auc, composite_scores, model_score
from retina_hybrid.patches import (
    ImportanceWeights,
    adapt_mlp_head,
    compute_npd,
    dpd_decompose,
    head_token_source,
    unequal_patchify,
    uniform_grid,
)
from retina_hybrid.trainer import bce_logits_loss, load_model, lr_at, save_checkpoint, train

criterion = pytest.mark.criterion


# --- independent oracles ---------------------------------------------------

def oracle_auc(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [a for a, t in zip(s, y) if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def oracle_ap(s, y):
    order = sorted(range(len(s)), key=lambda i: -s[i])
    hits, total = 0, 0.0
    for k, i in enumerate(order, start=1):
        if y[i]:
            hits += 1
            total += hits / k
    return total / sum(y)


def painted(grid, h=384, w=384):
    canvas = np.zeros((h, w), dtype=np.int32)
    for x, y, s in zip(grid.xs.tolist(), grid.ys.tolist(), grid.sizes.tolist()):
        canvas[y : y + s, x : x + s] += 1
    return canvas


# --- criteria --------------------------------------------------------------

@criterion(1, "composite formula reproduces 0.8332 / 0.9166")
def test_c01_composites():
    t0 = time.perf_counter()
    ml, model = composite_scores(0.7120, 0.9544, 1.0)
    assert abs(ml - 0.8332) <= 1e-12
    assert abs(model - 0.9166) <= 1e-12
    assert abs(model_score(0.8332, 1.0) - 0.9166) <= 1e-12
    assert time.perf_counter() - t0 < 1.0


@criterion(2, "binary_auc / average_precision match brute-force oracles")
def test_c02_metric_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 101))
        s = rng.random(n)
        if seed % 2:
            s = np.round(s, 1)  # ties
        y = rng.integers(0, 2, n)
        y[rng.integers(n)] = 1
        if y.all():
            y[0] = 0
            y[min(1, n - 1)] = 1
        sl, yl = s.tolist(), y.tolist()
        worst = max(worst, abs(binary_auc(s, y) - oracle_auc(sl, yl)), abs(average_precision(s, y) - oracle_ap(sl, yl)))
    assert worst <= 1e-9
    assert time.perf_counter() - t0 < 10.0


@criterion(3, "IE sequence-length law")
@pytest.mark.parametrize("layers", [2, 6])
def test_c03_ie_shape_law(layers):
    t0 = time.perf_counter()
    cfg = IEViTConfig(image_size=384, patch_size=32, dim=16, layers=layers, heads=2, ffn_dim=32, dropout=0.0,
                      cnn=BackboneConfig("tiny_test", 8))
    m = IEViT(cfg).eval()
    with torch.no_grad():
        assert ievit_forward(torch.randn(1, 3, 384, 384), m).shape == (1, 20)
    assert m.last_seq_lengths == [144 + 1 + l for l in range(1, layers + 1)]
    for variant, per in (("IECTe", 40), ("IeECT", 20)):
        ie = IECTran(variant, TINY, TINY, tiny_stack(layers=layers), 20, 64).eval()
        with torch.no_grad():
            ie(torch.randn(1, 3, 64, 64))
        assert ie.last_seq_lengths[-1] == per * layers
    assert time.perf_counter() - t0 < 30.0


@criterion(4, "patch tiling conservation")
def test_c04_tiling():
    t0 = time.perf_counter()
    base = uniform_grid(384, 384, 32)
    rng = np.random.default_rng(0)
    for draw in range(500):
        raw = rng.normal(0.0, rng.uniform(0.1, 2.0), 144)
        for k in (0.5, 1.0, 2.0):
            g = dpd_decompose(base, compute_npd(ImportanceWeights(raw), k))
            assert int(np.sum(g.sizes.astype(np.int64) ** 2)) == 384 ** 2
            # every pixel covered exactly once is equivalent to pairwise non-overlap here
            assert np.all(painted(g) == 1), (draw, k)
    u = unequal_patchify(np.zeros((3, 384, 384)))
    assert len(u) == 528
    assert int(np.sum(u.sizes.astype(np.int64) ** 2)) == 384 ** 2
    assert np.all(painted(u) == 1)
    assert time.perf_counter() - t0 < 30.0


@criterion(5, "NPD = 32 (1/w)^k")
def test_c05_npd():
    rng = np.random.default_rng(5)
    for k in (0.25, 0.5, 1.0, 1.5, 2.0):
        w = rng.uniform(0.05, 5.0, 144)
        got = compute_npd(w, k)
        ref = np.array([32.0 * (1.0 / v) ** k for v in w.tolist()])
        assert np.max(np.abs(got - ref) / ref) <= 1e-12
        assert compute_npd(np.array([1.0]), k)[0] == 32.0


def _gc(loss_fn, model):
    res = sampled_gradcheck(loss_fn, model.named_parameters(), per_tensor=3)
    return pass_fraction(res, 1e-4)


@criterion(6, "gradient checks (>= 95% of coordinates within 1e-4)")
@pytest.mark.parametrize("which", ["ctran", "ensemble_v1", "ievit", "ieect"])
def test_c06_gradients(which):
    torch.manual_seed(6)
    n = 3
    t = torch.randint(0, 2, (2, n)).double()
    bb = BackboneConfig("tiny_test", 8)
    stack = tiny_stack(layers=2, d=8)
    if which == "ctran":
        m = CTran(bb, stack, n, 32).double().eval()
        x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
        frac = _gc(lambda: bce_logits_loss(ctran_forward(x, m), t), m)
    elif which == "ensemble_v1":
        m = EnsembleV1(bb, bb, stack, n, 32, EnsembleWeights(0.7, 0.3)).double().eval()
        x = torch.randn(2, 3, 32, 32, dtype=torch.float64)

        def loss():
            out = ensemble_v1_forward(x, m.path1, m.path2, m.weights)
            return combined_loss(bce_logits_loss(out.logits_dn, t), bce_logits_loss(out.logits_rn, t), m.weights)

        frac = _gc(loss, m)
    elif which == "ievit":
        cfg = IEViTConfig(image_size=384, patch_mode="dpd", dim=8, layers=2, heads=2, ffn_dim=16, dropout=0.0,
                          n_labels=n, cnn=bb)
        m = IEViT(cfg).double().eval()
        with torch.no_grad():
            m.ievit.dpd.weights.normal_(0.0, 0.8)
        m.ievit.freeze_grid()
        x = torch.randn(2, 3, 384, 384, dtype=torch.float64)
        frac = _gc(lambda: bce_logits_loss(ievit_forward(x, m), t), m)
    else:
        m = IECTran("IeECT", bb, bb, stack, n, 32).double().eval()
        x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
        frac = _gc(lambda: bce_logits_loss(ieect_forward(x, m), t), m)
    assert frac >= 0.95, frac


@criterion(7, "ensemble linearity and weighted loss")
def test_c07_ensemble_linearity():
    rng = np.random.default_rng(7)
    m = EnsembleV1(TINY, TINY, tiny_stack(), 20, 64).double().eval()
    x = torch.randn(3, 3, 64, 64, dtype=torch.float64)
    for _ in range(20):
        a = float(rng.uniform())
        w = EnsembleWeights(a, 1.0 - a)
        with torch.no_grad():
            out = ensemble_v1_forward(x, m.path1, m.path2, w)
        ref = a * out.p_dn + (1.0 - a) * out.p_rn
        assert float((out.p_c - ref).abs().max()) <= 1e-12
        l_dn, l_rn = float(rng.uniform(0, 3)), float(rng.uniform(0, 3))
        assert combined_loss(l_dn, l_rn, w) == a * l_dn + (1.0 - a) * l_rn


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    return generate_synthetic_dataset(16, seed=7, class_skew=0.3, out_dir=out, image_size=64), out


@criterion(8, "overfit smoke test (BCE < 0.05 within 300 epochs)")
@pytest.mark.parametrize("model_type", MODEL_TYPES)
def test_c08_overfit(model_type, overfit_data):
    manifest, root = overfit_data
    t0 = time.perf_counter()
    torch.manual_seed(0)
    # one cosine cycle over the whole run, no augmentation, full-batch steps
    cfg = TrainConfig(epochs=300, batch_size=16, lr=1e-2, weight_decay=0.0, t_0=300, t_mult=1,
                      sampler="none", seed=0, eval_every=0)
    res = train(tiny_model_config(model_type), manifest, cfg, image_root=root)
    losses = [h["loss"] for h in res.history]
    assert len(losses) <= 300
    assert min(losses) < 0.05, f"best training BCE {min(losses):.4f}"
    assert time.perf_counter() - t0 < 600.0


@criterion(9, "sampler contracts")
def test_c09_samplers(tmp_path):
    m = generate_synthetic_dataset(100, seed=9, class_skew=0.8, out_dir=tmp_path, image_size=16)
    over = lp_ros_oversample(m, pct=0.10, seed=0)
    assert len(over) == 110
    assert over.entries[:100] == m.entries
    groups = {}
    for _, bits in m.entries:
        groups[bits] = groups.get(bits, 0) + 1
    mean = 100 / len(groups)
    assert all(groups[bits] < mean for _, bits in over.entries[100:])
    assert all(e in m.entries for e in over.entries[100:])

    w = weighted_sample_weights(m)
    y = m.label_matrix()
    counts = y.sum(axis=0)
    ref = [np.mean([100 / counts[j] for j in range(20) if row[j]]) for row in y]
    assert max(abs(a - b) for a, b in zip(w, ref)) <= 1e-12
    for i in range(1, 100):
        assert abs(w[i] / w[0] - ref[i] / ref[0]) <= 1e-12


@criterion(10, "scheduler restarts and midpoints")
def test_c10_scheduler():
    cfg = TrainConfig(lr=5e-5, t_0=10, t_mult=2, eta_min=0.0)
    start, length = 0, 10
    for _ in range(6):
        assert abs(lr_at(start, cfg) - 5e-5) <= 1e-12
        assert abs(lr_at(start + length // 2, cfg) - 2.5e-5) <= 1e-12
        start, length = start + length, length * 2


@criterion(11, "MLP-head grow-then-slice round trip")
def test_c11_head_round_trip():
    rng = np.random.default_rng(11)
    base = uniform_grid(384, 384, 32)
    d, L = 8, 6
    old = 1 + 144 + L
    for trial in range(10):
        g = dpd_decompose(base, compute_npd(ImportanceWeights(rng.normal(0, 1.5, 144)), 1.0))
        w, b = torch.randn(20, old * d, dtype=torch.float64), torch.randn(20, dtype=torch.float64)
        src = head_token_source(g, 144, L)
        grown, gb = adapt_mlp_head(w, b, old, len(src), src)
        _, first = np.unique(src, return_index=True)
        back, bb = adapt_mlp_head(grown, gb, len(src), old, first)
        x = torch.randn(5, old * d, dtype=torch.float64)
        assert torch.equal(x @ back.T + bb, x @ w.T + b)


@criterion(12, "checkpoint round trip is bitwise")
@pytest.mark.parametrize("model_type", MODEL_TYPES)
def test_c12_checkpoint(model_type, tmp_path):
    cfg = tiny_model_config(model_type)
    model = build_model(cfg).eval()
    x = torch.randn(3, 3, 64, 64)
    path = save_checkpoint(tmp_path / "ckpt.safetensors", model, cfg)
    loaded, _ = load_model(path)
    with torch.no_grad():
        a, b = model(x), loaded(x)
    if model_type == "ensemble_v1":
        a, b = a.p_c, b.p_c
    assert torch.equal(a, b)
    assert math.isfinite(float(a.sum()))
