"""Monte Carlo dropout uncertainty and uncertainty-guided maps (UGMs)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import NetworkSpec, forward
from .errors import ConfigurationError, DataError, ShapeError

EPS_LOG = 1e-12


@dataclass
class McPredictionSet:
    passes: list  # T softmax tensors of identical shape, class axis at -4

    @property
    def T(self) -> int:
        return len(self.passes)


@dataclass
class UncertaintyMap:
    entropy: torch.Tensor
    weight: torch.Tensor
    source_id: str = ""
    T_used: int = 0


def sub_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


@torch.no_grad()
def mc_forward(params, x, spec: NetworkSpec, T: int = 8, seed: int = 0) -> McPredictionSet:
    if T < 2:
        raise ConfigurationError(f"T must be >= 2, got {T}")
    passes = [forward(params, x, spec, dropout_on=True, rng_seed=s).softmax for s in sub_seeds(seed, T)]
    return McPredictionSet(passes)


def entropy_of(probs: torch.Tensor) -> torch.Tensor:
    """Natural-log entropy over the class axis (-4); clipped at 0 from below."""
    h = -(probs * torch.log(probs + EPS_LOG)).sum(dim=-4)
    return h.clamp_min(0.0)


def mean_and_entropy(preds: McPredictionSet, source_id: str = "") -> UncertaintyMap:
    if not preds.passes:
        raise DataError("empty prediction set")
    shape = preds.passes[0].shape
    if any(p.shape != shape for p in preds.passes):
        raise ShapeError("MC passes have inconsistent shapes")
    mean = torch.stack(list(preds.passes)).mean(dim=0)
    ent = entropy_of(mean)
    return UncertaintyMap(entropy=ent, weight=torch.exp(-ent), source_id=source_id, T_used=preds.T)


def max_entropy(num_classes: int) -> float:
    return math.log(num_classes)


def build_ugm(params, dataset, spec: NetworkSpec, T: int = 8, seed: int = 0) -> list[UncertaintyMap]:
    """One map per case, in dataset order.

    ``dataset`` yields ``Case`` objects (or ``(id, volume)`` pairs).
    Each volume gets its own sub-seed so maps do not depend on dataset order.
    """
    out = []
    for item in dataset:
        if item is None:
            raise DataError("missing volume in dataset")
        cid, vol = (item.id, item.volume) if hasattr(item, "volume") else item
        if vol is None:
            raise DataError(f"missing volume for {cid!r}")
        vseed = int(np.random.SeedSequence([int(seed), _stable_hash(cid)]).generate_state(1)[0])
        preds = mc_forward(params, torch.as_tensor(np.asarray(vol, dtype=np.float32)), spec, T, vseed)
        out.append(mean_and_entropy(preds, source_id=cid))
    return out


def _stable_hash(text: str) -> int:
    h = 2166136261
    for b in str(text).encode():
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


def mean_entropy(ugms) -> float:
    if not ugms:
        return float("nan")
    return float(np.mean([float(u.entropy.double().mean()) for u in ugms]))
