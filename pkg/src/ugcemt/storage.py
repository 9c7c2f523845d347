"""Parameter containers, checkpoints and UGM files.

Parameter container (``<name>.bin`` + ``<name>.manifest``): the binary file is
the concatenation of little-endian float32 arrays in manifest order; each
manifest line reads ``<param-name> f4 <dim0>x<dim1>x... <byte-offset>``
(scalars use the shape ``-``).

UGM file: a 128-byte ASCII header
``UGM1 <D> <H> <W> T=<T> log=e id=<source_id>`` (space padded, ends in
``\\n``) followed by the float32 entropy grid and then the float32 weight grid.
"""
from __future__ import annotations

import os

import numpy as np
import torch

from .errors import FormatError, StateError
from .sam import SamState
from .teacher import TeacherState
from .uncertainty import UncertaintyMap

UGM_HEADER = 128


def save_params(params: dict, path_stem) -> None:
    lines, blobs, offset = [], [], 0
    for name, t in params.items():
        if any(c.isspace() for c in name):
            raise FormatError(f"parameter name {name!r} contains whitespace")
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4")  # keeps 0-d shapes
        shape = "x".join(map(str, arr.shape)) or "-"
        lines.append(f"{name} f4 {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(f"{path_stem}.bin", "wb") as fh:
        fh.write(b"".join(blobs))
    with open(f"{path_stem}.manifest", "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_params(path_stem) -> dict:
    with open(f"{path_stem}.bin", "rb") as fh:
        buf = fh.read()
    params, expected = {}, 0
    with open(f"{path_stem}.manifest") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4 or parts[1] != "f4":
                raise FormatError(f"{path_stem}.manifest line {n}: malformed entry {line!r}")
            name, _, shape_s, off_s = parts
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split("x"))
            off = int(off_s)
            if off != expected:
                raise FormatError(f"{name}: offset {off} does not follow previous array", expected)
            count = int(np.prod(shape)) if shape else 1
            if off + 4 * count > len(buf):
                raise FormatError(f"{name}: payload truncated", len(buf))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            params[name] = torch.from_numpy(arr.astype(np.float32))
            expected = off + 4 * count
    if expected != len(buf):
        raise FormatError(f"{len(buf) - expected} unaccounted bytes", expected)
    return params


def save_checkpoint(directory, student: dict, teacher: TeacherState, opt: SamState,
                    step: int, phase: int) -> None:
    os.makedirs(directory, exist_ok=True)
    save_params(student, os.path.join(directory, "student"))
    save_params(teacher.params, os.path.join(directory, "teacher"))
    save_params(opt.momentum, os.path.join(directory, "optimizer"))
    with open(os.path.join(directory, "state.txt"), "w") as fh:
        fh.write(f"step={step}\nphase={phase}\noptimizer_step={opt.step}\n"
                 f"teacher_steps_seen={teacher.steps_seen}\newa_beta={teacher.beta!r}\n")


def load_checkpoint(directory):
    """Returns (student, TeacherState, SamState, step, phase)."""
    kv = {}
    with open(os.path.join(directory, "state.txt")) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.strip().split("=", 1)
                kv[k] = v
    try:
        student = load_params(os.path.join(directory, "student"))
        teacher = TeacherState(load_params(os.path.join(directory, "teacher")),
                               float(kv["ewa_beta"]), int(kv["teacher_steps_seen"]))
        opt = SamState(step=int(kv["optimizer_step"]), momentum=load_params(os.path.join(directory, "optimizer")))
        return student, teacher, opt, int(kv["step"]), int(kv["phase"])
    except KeyError as exc:
        raise StateError(f"checkpoint state.txt lacks {exc}") from None


def save_ugm(ugm: UncertaintyMap, path) -> None:
    ent = np.ascontiguousarray(ugm.entropy.detach().cpu().numpy(), dtype="<f4")
    w = np.ascontiguousarray(ugm.weight.detach().cpu().numpy(), dtype="<f4")
    if ent.ndim != 3 or ent.shape != w.shape:
        raise FormatError("UGM grids must be matching 3D arrays")
    if any(c.isspace() for c in ugm.source_id):
        raise FormatError("source_id must not contain whitespace")
    text = f"UGM1 {ent.shape[0]} {ent.shape[1]} {ent.shape[2]} T={ugm.T_used} log=e id={ugm.source_id}"
    if len(text) > UGM_HEADER - 1:
        raise FormatError("source_id too long for UGM header")
    with open(path, "wb") as fh:
        fh.write((text.ljust(UGM_HEADER - 1) + "\n").encode("ascii"))
        fh.write(ent.tobytes())
        fh.write(w.tobytes())


def load_ugm(path) -> UncertaintyMap:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < UGM_HEADER:
        raise FormatError("truncated UGM header", len(buf))
    try:
        parts = buf[:UGM_HEADER].decode("ascii").split()
        if parts[0] != "UGM1" or len(parts) != 7 or parts[5] != "log=e":
            raise ValueError
        shape = tuple(int(p) for p in parts[1:4])
        T = int(parts[4].removeprefix("T="))
        sid = parts[6].removeprefix("id=")
    except (ValueError, UnicodeDecodeError, IndexError):
        raise FormatError("malformed UGM header", 0) from None
    n = int(np.prod(shape))
    if len(buf) != UGM_HEADER + 8 * n:
        raise FormatError(f"UGM payload should be {8 * n} bytes, found {len(buf) - UGM_HEADER}", UGM_HEADER)
    ent = np.frombuffer(buf, "<f4", n, UGM_HEADER).reshape(shape).astype(np.float32)
    w = np.frombuffer(buf, "<f4", n, UGM_HEADER + 4 * n).reshape(shape).astype(np.float32)
    return UncertaintyMap(torch.from_numpy(ent), torch.from_numpy(w), sid, T)
