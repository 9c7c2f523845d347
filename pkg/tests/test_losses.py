import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import fd_agreement
from ugcemt.errors import ConfigurationError, DataError, ShapeError
from ugcemt.losses import consistency_loss, rampup, supervised_loss, total_objective


def test_supervised_peaked_logits():
    labels = torch.tensor([[[[0, 1], [1, 0]]]])  # (1, 1, 2, 2)
    logits = torch.stack([(labels == 0).double() * 20, (labels == 1).double() * 20], dim=1)
    logits = logits - 0.0
    assert float(supervised_loss(logits, labels)) < 1e-6


def test_supervised_uniform_ce_is_ln2():
    labels = torch.tensor([0, 1, 0, 1]).reshape(1, 1, 2, 2)
    logits = torch.zeros(1, 2, 1, 2, 2, dtype=torch.float64)
    ce = torch.nn.functional.cross_entropy(logits, labels)
    assert abs(float(ce) - math.log(2)) < 1e-12
    # dice on p=0.5 everywhere, 2 fg voxels: (2*1 + s)/(2 + 2 + s)
    s = 1e-5
    expected = 0.5 * math.log(2) + 0.5 * (1 - (2 * 1.0 + s) / (2 + 2 + s))
    assert abs(float(supervised_loss(logits, labels)) - expected) < 1e-12


def test_supervised_four_voxel_oracle():
    z = [[0.3, -0.2], [1.5, 0.1], [-0.7, 0.4], [0.0, 2.0]]  # per-voxel (bg, fg) logits
    y = [0, 0, 1, 1]
    ce, inter, psum = 0.0, 0.0, 0.0
    for (a, b), lab in zip(z, y):
        pa, pb = math.exp(a) / (math.exp(a) + math.exp(b)), math.exp(b) / (math.exp(a) + math.exp(b))
        ce -= math.log(pb if lab else pa)
        inter += pb * lab
        psum += pb
    ce /= 4
    s = 1e-5
    dice_loss = 1 - (2 * inter + s) / (psum + sum(y) + s)
    expected = 0.5 * ce + 0.5 * dice_loss
    logits = torch.tensor(z, dtype=torch.float64).T.reshape(1, 2, 4, 1, 1)
    labels = torch.tensor(y).reshape(1, 4, 1, 1)
    assert abs(float(supervised_loss(logits, labels)) - expected) < 1e-6


def test_supervised_errors():
    with pytest.raises(DataError):
        supervised_loss(torch.zeros(1, 2, 2, 2, 2), torch.full((1, 2, 2, 2), 2))
    with pytest.raises(ShapeError):
        supervised_loss(torch.zeros(1, 2, 2, 2, 2), torch.zeros(1, 3, 2, 2, dtype=torch.long))


def test_consistency_examples():
    p = torch.softmax(torch.randn(2, 3, 4, 4, 4), 1)
    assert float(consistency_loss(p, p)) == 0.0
    a = torch.tensor([0.6, 0.4], dtype=torch.float64).reshape(2, 1, 1, 1)
    b = torch.tensor([0.5, 0.5], dtype=torch.float64).reshape(2, 1, 1, 1)
    assert abs(float(consistency_loss(a, b)) - 0.02) < 1e-12
    # two voxels, squared norms 0.02 and 0.08, weights 1 and 0.5
    s = torch.tensor([[0.6, 0.7], [0.4, 0.3]], dtype=torch.float64).reshape(2, 2, 1, 1)
    t = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64).reshape(2, 2, 1, 1)
    w = torch.tensor([1.0, 0.5], dtype=torch.float64).reshape(2, 1, 1)
    assert abs(float(consistency_loss(s, t, w)) - (1 * 0.02 + 0.5 * 0.08) / 2) < 1e-12
    assert abs(0.03 - (1 * 0.02 + 0.5 * 0.08) / 2) < 1e-15
    with pytest.raises(ShapeError):
        consistency_loss(a, torch.ones(3, 1, 1, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_consistency_properties(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.softmax(torch.randn(2, 2, 3, 3, 3, generator=g, dtype=torch.float64), 1)
    q = torch.softmax(torch.randn(2, 2, 3, 3, 3, generator=g, dtype=torch.float64), 1)
    w = torch.rand(2, 3, 3, 3, generator=g, dtype=torch.float64)
    assert float(consistency_loss(p, q, w)) >= 0
    assert float(consistency_loss(p, q)) == pytest.approx(float(consistency_loss(q, p)), abs=1e-15)
    assert float(consistency_loss(p, q, torch.zeros_like(w))) == 0.0
    w2 = w.clone()
    w2.view(-1)[seed % w2.numel()] += 0.5
    assert float(consistency_loss(p, q, w2)) >= float(consistency_loss(p, q, w))


def test_consistency_accepts_uncertainty_map():
    from ugcemt.uncertainty import UncertaintyMap
    a = torch.tensor([0.6, 0.4], dtype=torch.float64).reshape(2, 1, 1, 1)
    b = torch.tensor([0.5, 0.5], dtype=torch.float64).reshape(2, 1, 1, 1)
    u = UncertaintyMap(torch.full((1, 1, 1), math.log(2)), torch.full((1, 1, 1), 0.5))
    assert abs(float(consistency_loss(a, b, u)) - 0.01) < 1e-12


def test_rampup_values():
    assert rampup(100, 100) == 0.1
    assert abs(rampup(0, 100) - 0.1 * math.exp(-5)) < 1e-12
    assert abs(rampup(0, 100) - 6.738e-4) < 1e-7
    assert abs(rampup(50, 100) - 0.1 * math.exp(-1.25)) < 1e-12
    assert abs(rampup(50, 100) - 0.02865) < 1e-5
    with pytest.raises(ConfigurationError):
        rampup(0, 0)
    with pytest.raises(ConfigurationError):
        rampup(-1, 10)


def test_rampup_monotone():
    vals = [rampup(t, 600) for t in range(601)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0 < v <= 0.1 for v in vals)


def test_total_objective():
    lb = total_objective(1.0, 2.0, 10, 10)
    assert lb.total == pytest.approx(1.2, abs=1e-12)
    assert total_objective(0.7, 0.0, 3, 10).total == 0.7
    lb = total_objective(1.0, 5.0, 0, 10)
    assert abs(lb.total - (1.0 + 0.1 * math.exp(-5) * 5.0)) < 1e-12
    assert abs(lb.total - (lb.supervised + lb.lambda_t * lb.consistency)) < 1e-9


def test_supervised_gradient_fd():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    labels = (torch.rand(1, 4, 4, 4, generator=g) > 0.5).long()
    frac, worst = fd_agreement(lambda p: supervised_loss(p["z"], labels), {"z": logits}, n_samples=60)
    assert frac >= 0.99, worst


def test_consistency_gradient_fd():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    target = torch.softmax(torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64), 1)
    w = torch.rand(1, 4, 4, 4, generator=g, dtype=torch.float64)
    frac, worst = fd_agreement(lambda p: consistency_loss(torch.softmax(p["z"], 1), target, w),
                               {"z": logits}, n_samples=60)
    assert frac >= 0.99, worst
