import math
from collections import Counter

import numpy as np
import pytest
import torch

from icssn.classification import (LL, LS, SL, SS, ClassificationNet, PairSample,
                                  classification_loss, form_pairs, infer_object_label,
                                  joint_label)
from icssn.config import ClassifierConfig
from icssn.data import LANDSLIDE, SLOPE, Sample

from conftest import tiny_encoder_config


def sample(sid, landslide):
    mask = np.zeros((8, 8), np.uint8)
    if landslide:
        mask[2:4, 2:4] = 1
    return Sample(sid, np.zeros((8, 8, 3), np.uint8), mask)


def batch(n_land, n_slope):
    return [sample(f"l{k}", True) for k in range(n_land)] + [sample(f"s{k}", False) for k in range(n_slope)]


def test_joint_label_table():
    assert joint_label(LANDSLIDE, LANDSLIDE) == LL
    assert joint_label(LANDSLIDE, SLOPE) == LS
    assert joint_label(SLOPE, LANDSLIDE) == SL
    assert joint_label(SLOPE, SLOPE) == SS


def test_pair_label_checked():
    with pytest.raises(ValueError):
        PairSample(sample("a", True), sample("b", False), LL)


def test_two_by_two_covers_all_classes():
    for seed in range(20):
        pairs = form_pairs(batch(2, 2), seed)
        assert len(pairs) == 4
        assert sorted(p.joint_label for p in pairs) == [LL, LS, SL, SS]
        for p in pairs:
            assert joint_label(p.a.label, p.b.label) == p.joint_label
            if p.joint_label in (LL, SS):
                assert p.a is not p.b


def test_all_slope_batch(caplog):
    pairs = form_pairs(batch(0, 5), 0)
    assert {p.joint_label for p in pairs} == {SS}
    assert "single-class" in caplog.text


def test_pairing_deterministic():
    b = batch(5, 3)
    ids = lambda ps: [(p.a.id, p.b.id) for p in ps]  # noqa: E731
    assert ids(form_pairs(b, 4)) == ids(form_pairs(b, 4))


def test_pairing_balanced_for_imbalanced_data():
    counts = Counter(p.joint_label for p in form_pairs(batch(30, 10), 1))
    assert max(counts.values()) - min(counts.values()) <= 1


def tiny_net(**kw):
    return ClassificationNet(tiny_encoder_config(), ClassifierConfig(hidden_units=8, **kw)).eval()


def test_probabilities_sum_to_one():
    net = tiny_net()
    with torch.no_grad():
        p = net.classify_pair(torch.randn(3, 3, 32, 32), torch.randn(3, 3, 32, 32))
    assert p.shape == (3, 4)
    assert torch.allclose(p.sum(1), torch.ones(3), atol=1e-6)


def test_zero_final_layer_is_uniform():
    net = tiny_net()
    torch.nn.init.zeros_(net.classifier.fc2.weight)
    torch.nn.init.zeros_(net.classifier.fc2.bias)
    with torch.no_grad():
        p = net.classify_pair(torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32))
    assert torch.allclose(p, torch.full_like(p, 0.25))


def test_unequal_sizes_rejected():
    with pytest.raises(ValueError):
        tiny_net()(torch.randn(1, 3, 32, 32), torch.randn(1, 3, 40, 40))


def test_shared_encoder_is_structural():
    net = tiny_net()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        fa, fb = net.encode_pair(x, x.clone())
    assert torch.equal(fa, fb)
    assert sum(1 for n, _ in net.named_modules() if n == "encoder") == 1


@pytest.mark.parametrize("kw", [dict(fc_layers=1), dict(fc_layers=3), dict(pooling="avg"),
                                dict(head="binary")])
def test_variants_produce_distributions(kw):
    net = tiny_net(**kw)
    with torch.no_grad():
        p = net.classify_pair(torch.randn(2, 3, 32, 32), torch.randn(2, 3, 32, 32))
    assert torch.allclose(p.sum(1), torch.ones(2), atol=1e-6)


def test_loss_values():
    assert classification_loss(torch.tensor([1.0, 0, 0, 0]), LL).item() == 0.0
    for label in range(4):
        loss = classification_loss(torch.full((4,), 0.25, dtype=torch.float64), label)
        assert loss.item() == pytest.approx(math.log(4), rel=1e-12)
    assert round(math.log(4), 4) == 1.3863


def test_loss_zero_probability_is_finite():
    loss = classification_loss(torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64), LL)
    assert math.isfinite(loss.item()) and loss.item() == pytest.approx(-math.log(1e-12))


def test_loss_gradient_matches_fd(rng):
    logits = torch.tensor(rng.normal(size=(5, 4)))
    labels = torch.tensor(rng.integers(0, 4, 5))
    fn = lambda z: classification_loss(torch.softmax(z, 1), labels)  # noqa: E731
    z = logits.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(z), z)
    h = 1e-6
    fd = torch.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.clone(), logits.clone()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (fn(up) - fn(down)) / (2 * h)
    assert (g - fd).norm() / fd.norm() <= 1e-4


def test_loss_convex_along_lines(rng):
    labels = torch.tensor([2])
    for _ in range(20):
        a, b = torch.tensor(rng.normal(size=(1, 4))), torch.tensor(rng.normal(size=(1, 4)))
        f = lambda z: classification_loss(torch.softmax(z, 1), labels).item()  # noqa: E731
        for t in (0.25, 0.5, 0.75):
            assert f(t * a + (1 - t) * b) <= t * f(a) + (1 - t) * f(b) + 1e-12


@pytest.mark.parametrize("p,label", [((0.9, 0.0, 0.0, 0.1), LANDSLIDE),
                                     ((0.1, 0.0, 0.0, 0.9), SLOPE),
                                     ((0.3, 0.3, 0.2, 0.2), LANDSLIDE),
                                     ((0.1, 0.45, 0.05, 0.4), LANDSLIDE),
                                     ((0.05, 0.1, 0.5, 0.35), SLOPE)])
def test_infer_object_label(p, label):
    got, mass = infer_object_label(p)
    assert got == label
    assert mass == pytest.approx(p[0] + p[1])
