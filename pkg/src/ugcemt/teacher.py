"""Teacher weights as an exponential weighted average (EWA) of the student."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import StateError


@dataclass
class TeacherState:
    params: dict
    beta: float = 0.99  # alias: alpha
    steps_seen: int = 0


def init_teacher(student: dict, beta: float = 0.99) -> TeacherState:
    return TeacherState({k: v.detach().clone() for k, v in student.items()}, beta, 0)


@torch.no_grad()
def ewa_update(state: TeacherState, student: dict) -> TeacherState:
    if state.params.keys() != student.keys():
        raise StateError("teacher and student parameter names differ")
    beta = state.beta
    new = {}
    for k, t in state.params.items():
        s = student[k].detach()
        if s.shape != t.shape:
            raise StateError(f"shape mismatch for {k}: {tuple(t.shape)} vs {tuple(s.shape)}")
        new[k] = beta * t + (1.0 - beta) * s
    return TeacherState(new, beta, state.steps_seen + 1)
