import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_agreement(loss_fn, params: dict, n_samples: int = 50, h: float = 1e-6, seed: int = 0,
                 names=None, floor: float = 1e-7):
    """Fraction of sampled coordinates whose autograd gradient matches a central
    difference to relative error < 1e-3, plus the worst relative error.

    ``loss_fn(params) -> scalar tensor``; params are float64 tensors.
    """
    p = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(p)
    names = list(p) if names is None else list(names)
    grads = torch.autograd.grad(loss, [p[k] for k in names], allow_unused=True)
    grads = {k: torch.zeros_like(p[k]) if g is None else g for k, g in zip(names, grads)}
    rs = np.random.default_rng(seed)
    sizes = np.array([p[k].numel() for k in names])
    ok, worst = 0, 0.0
    with torch.no_grad():
        for _ in range(n_samples):
            k = names[rs.choice(len(names), p=sizes / sizes.sum())]
            idx = int(rs.integers(p[k].numel()))
            flat = p[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = float(loss_fn(p))
            flat[idx] = orig - h
            down = float(loss_fn(p))
            flat[idx] = orig
            num = (up - down) / (2 * h)
            ana = float(grads[k].view(-1)[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            ok += rel < 1e-3
    return ok / n_samples, worst
