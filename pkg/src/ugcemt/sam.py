"""Sharpness-aware minimisation over a flat parameter dict.

One step: gradient at w, climb to w + rho * g / ||g|| (global norm), take the
gradient there, then apply momentum SGD with decoupled weight decay to the
original w. The learning rate decays by ``lr_decay_factor`` every
``lr_decay_every`` steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError, NumericError


@dataclass
class SamConfig:
    rho: float = 0.05
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 2500

    def validate(self) -> "SamConfig":
        if self.rho < 0:
            raise ConfigurationError(f"rho must be >= 0, got {self.rho}")
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.lr_decay_every <= 0:
            raise ConfigurationError("lr_decay_every must be positive")
        return self


@dataclass
class SamState:
    step: int = 0
    momentum: dict = field(default_factory=dict)
    last_loss: object = None


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def _check_finite(grads: dict, what: str):
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite {what} for parameter {k}")


@torch.no_grad()
def sam_perturb(params: dict, grads: dict, rho: float) -> dict:
    if rho < 0:
        raise ConfigurationError(f"rho must be >= 0, got {rho}")
    if grads.keys() != params.keys():
        raise ConfigurationError("gradient names do not match parameter names")
    _check_finite(grads, "gradient")
    norm = global_norm(grads)
    if norm < 1e-12 or rho == 0:
        return {k: p.detach().clone() for k, p in params.items()}
    scale = rho / norm
    return {k: p.detach() + scale * grads[k] for k, p in params.items()}


def current_lr(cfg: SamConfig, step: int) -> float:
    return cfg.lr * cfg.lr_decay_factor ** (step // cfg.lr_decay_every)


def _loss_value(loss) -> float:
    v = getattr(loss, "total", loss)
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def sam_step(loss_eval, state: SamState, params: dict, cfg: SamConfig):
    """``loss_eval(params) -> (loss, grads)`` is called exactly twice.

    Returns ``(new_params, new_state)``; ``new_state.last_loss`` holds the loss
    at the unperturbed parameters.
    """
    loss, g1 = loss_eval(params)
    if not math.isfinite(_loss_value(loss)):
        raise NumericError(f"non-finite loss at step {state.step}")
    adv = sam_perturb(params, g1, cfg.rho)
    loss2, g2 = loss_eval(adv)
    if not math.isfinite(_loss_value(loss2)):
        raise NumericError(f"non-finite perturbed loss at step {state.step}")
    _check_finite(g2, "perturbed gradient")
    lr = current_lr(cfg, state.step)
    new_params, new_buf = {}, {}
    with torch.no_grad():
        for k, p in params.items():
            p = p.detach()
            buf = state.momentum.get(k)
            buf = g2[k].clone() if buf is None else cfg.momentum * buf + g2[k]
            new_buf[k] = buf
            new_params[k] = p - lr * (buf + cfg.weight_decay * p)
    return new_params, SamState(step=state.step + 1, momentum=new_buf, last_loss=loss)
