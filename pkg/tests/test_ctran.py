import math

import numpy as np
import pytest
import torch

from conftest import TINY, tiny_stack
from gradcheck import pass_fraction, sampled_gradcheck
from retina_hybrid.backbones import BackboneConfig, project_to_class_tokens
from retina_hybrid.ctran import (
    CTran,
    LabelHeads,
    PositionalReduction,
    TransformerStackConfig,
    ctran_forward,
    positional_encoding_2d,
    predict,
    reduce_and_add_positional,
)
from retina_hybrid.trainer import bce_logits_loss


def brute_pe(i, j, k, d):
    if k % 2 == 0:
        return math.sin(i / 10000 ** (2 * k / d))
    return math.cos(j / 10000 ** (2 * k / d))


def test_pe_zero_cases():
    g = positional_encoding_2d(3, 5, 8)
    assert g.shape == (3, 5, 8)
    assert np.all(g[0, :, 0] == 0.0)
    assert np.all(g[:, 0, 1] == 1.0)


def test_pe_known_value():
    g = positional_encoding_2d(2, 2, 4)
    assert g[1, 0, 0] == pytest.approx(0.8414709848078965, abs=1e-15)


def test_pe_matches_loop_evaluation():
    hp, wp, d = 4, 3, 10
    g = positional_encoding_2d(hp, wp, d)
    for i in range(hp):
        for j in range(wp):
            for k in range(d):
                assert g[i, j, k] == pytest.approx(brute_pe(i, j, k, d), abs=1e-15)
    assert np.all(np.abs(g) <= 1.0)
    assert np.array_equal(g, positional_encoding_2d(hp, wp, d))


def test_pe_odd_dim_rejected():
    with pytest.raises(ValueError):
        positional_encoding_2d(2, 2, 5)


def test_zero_reduction_is_identity():
    pe = PositionalReduction(4, 4, 16, 5)
    with torch.no_grad():
        pe.reduce.weight.zero_()
        pe.reduce.bias.zero_()
    x = torch.randn(5, 3, 16)
    assert torch.equal(reduce_and_add_positional(x, pe), x)


def test_zero_visual_gives_broadcast_pe():
    pe = PositionalReduction(4, 4, 16, 5)
    out = reduce_and_add_positional(torch.zeros(5, 3, 16), pe)
    for b in range(3):
        torch.testing.assert_close(out[:, b], pe.reduced())
    assert torch.equal(out[:, 0], out[:, 2])


def test_reduction_shape_mismatch():
    pe = PositionalReduction(4, 4, 16, 5)
    with pytest.raises(ValueError):
        reduce_and_add_positional(torch.zeros(6, 1, 16), pe)


def test_stack_config_validation():
    assert TransformerStackConfig().layers == 6
    assert TransformerStackConfig().d == 960
    with pytest.raises(ValueError):
        TransformerStackConfig(d=10, heads=3)


def test_heads_are_independent():
    heads = LabelHeads(3, 4)
    tokens = torch.randn(3, 2, 4)
    out = heads(tokens)
    for n in range(3):
        torch.testing.assert_close(out[:, n], tokens[n] @ heads.weight[n] + heads.bias[n])
    # perturbing one label's head leaves the others alone
    with torch.no_grad():
        heads.weight[1] += 1.0
    out2 = heads(tokens)
    assert torch.equal(out2[:, 0], out[:, 0]) and torch.equal(out2[:, 2], out[:, 2])


def test_forward_shape_and_duplicates():
    model = CTran(TINY, tiny_stack(), 20, 64).eval()
    x = torch.randn(1, 3, 64, 64).repeat(2, 1, 1, 1)
    with torch.no_grad():
        logits = ctran_forward(x, model)
    assert logits.shape == (2, 20)
    assert torch.equal(logits[0], logits[1])


def test_batch_permutation_equivariance():
    model = CTran(TINY, tiny_stack(), 5, 64).eval()
    x = torch.randn(4, 3, 64, 64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        torch.testing.assert_close(model(x[perm]), model(x)[perm])


def test_checkpoint_key_namespaces():
    keys = CTran(TINY, tiny_stack(), 3, 64).state_dict().keys()
    assert any(k.startswith("backbone.") for k in keys)
    for prefix in ("ctran.pe.", "ctran.encoder.", "ctran.heads."):
        assert any(k.startswith(prefix) for k in keys), prefix


def test_zero_layer_model_is_affine_in_pooled_feature():
    model = CTran(TINY, tiny_stack(layers=0), 3, 64).double().eval()
    bb = model.backbone

    def logits_from_pooled(v):
        fmap = v.view(1, -1, 1, 1).expand(1, v.numel(), 4, 4)
        return model.ctran(project_to_class_tokens(fmap, bb.proj, 3, 16))

    v = torch.randn(TINY.channels, dtype=torch.float64)
    f0 = logits_from_pooled(torch.zeros_like(v))
    fv = logits_from_pooled(v)
    for alpha in (0.3, -1.7, 4.0):
        torch.testing.assert_close(logits_from_pooled(alpha * v) - f0, alpha * (fv - f0), rtol=1e-10, atol=1e-12)


def test_predict_values():
    p, y = predict(torch.tensor([[0.0, -2.0, 1e9]]))
    assert p[0, 0] == 0.5 and bool(y[0, 0])
    assert float(p[0, 1]) == pytest.approx(0.11920292202211755, abs=1e-7)
    assert not bool(y[0, 1])
    assert float(p[0, 2]) == pytest.approx(1.0)
    _, y = predict(torch.tensor([[0.2]]), threshold=0.6)
    assert not bool(y[0, 0])


def test_label_head_gradient_matches_central_difference():
    torch.manual_seed(1)
    model = CTran(TINY, tiny_stack(), 3, 64).double().eval()
    x = torch.randn(2, 3, 64, 64, dtype=torch.float64)
    res = sampled_gradcheck(lambda: model(x).mean(), [("ctran.heads.weight", model.ctran.heads.weight)],
                            per_tensor=20, step=1e-3)
    assert max(r[-1] for r in res) < 1e-4


def test_every_parameter_group_gradcheck():
    torch.manual_seed(2)
    model = CTran(BackboneConfig("tiny_test", 8), tiny_stack(layers=2, d=8), 3, 32).double().eval()
    x = torch.randn(3, 3, 32, 32, dtype=torch.float64)
    t = torch.randint(0, 2, (3, 3)).double()
    res = sampled_gradcheck(lambda: bce_logits_loss(model(x), t), model.named_parameters(), per_tensor=3)
    assert pass_fraction(res, 1e-4) >= 0.95
