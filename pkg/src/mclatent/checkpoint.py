"""Checkpoints: every named parameter, optimizer moments, schedule state and
the run config, as typed MCLT records."""

from __future__ import annotations

import os

import numpy as np

from . import config as config_mod
from .errors import FormatError, StructureError
from .numerics.tensorfile import load_tensors, save_tensors

FORMAT_VERSION = 1


def checkpoint_path(out_dir: str, step: int) -> str:
    return os.path.join(out_dir, f"ckpt_{step:06d}.bin")


def parameter_inventory(state) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every model tensor (trainable, EMA copies, centre)."""
    inv = {k: v.shape for k, v in state.trainable().items()}
    inv.update({k: v.shape for k, v in state.frozen().items()})
    inv["cls.center"] = state.cls.center.shape
    return inv


def state_records(state) -> list[tuple[str, np.ndarray]]:
    recs: list[tuple[str, np.ndarray]] = [
        ("meta.format_version", np.array(FORMAT_VERSION, dtype=np.int64)),
        ("meta.config", np.frombuffer(config_mod.dumps(state.cfg).encode("utf-8"), dtype=np.uint8)),
    ]
    params = state.trainable()
    for k, v in params.items():
        recs.append((k, v.data))
    for k, v in state.frozen().items():
        recs.append((k, v.data))
    recs.append(("cls.center", state.cls.center))
    for k in params:
        recs.append(("optim.m." + k, state.opt.m[k]))
        recs.append(("optim.v." + k, state.opt.v[k]))
    recs += [
        ("optim.step", np.array(state.opt.step, dtype=np.int64)),
        ("sched.step", np.array(state.step, dtype=np.int64)),
        ("sched.tau_mcl", np.array(state.tau_mcl, dtype=np.float64)),
        ("sched.lambda", np.array(state.lam, dtype=np.float64)),
        ("data.norm", np.array(state.norm, dtype=np.float64)),
    ]
    return recs


def save_checkpoint(state, path: str | os.PathLike) -> None:
    save_tensors(path, state_records(state))


def load_checkpoint(path: str | os.PathLike):
    """Rebuild a :class:`~mclatent.trainer.PretextState` from ``path``.

    The file is fully parsed and checked against the model inventory implied
    by its own config before any value is applied.
    """
    from .trainer import init_state

    recs = load_tensors(path)
    where = os.fspath(path)
    if "meta.format_version" not in recs:
        raise FormatError(f"{where}: not a checkpoint (no meta.format_version record)")
    version = int(recs["meta.format_version"])
    if version != FORMAT_VERSION:
        raise FormatError(f"{where}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    cfg = config_mod.loads(recs["meta.config"].tobytes().decode("utf-8"))
    state = init_state(cfg)
    inv = parameter_inventory(state)
    for name, shape in inv.items():
        if name not in recs:
            raise StructureError(f"{where}: missing tensor {name!r}")
        if recs[name].shape != tuple(shape):
            raise StructureError(f"{where}: tensor {name!r} has shape {recs[name].shape}, expected {tuple(shape)}")
    known = set(inv) | {"meta.format_version", "meta.config", "optim.step", "sched.step", "sched.tau_mcl", "sched.lambda", "data.norm"}
    known |= {"optim.m." + k for k in state.trainable()} | {"optim.v." + k for k in state.trainable()}
    extra = sorted(set(recs) - known)
    if extra:
        raise StructureError(f"{where}: unexpected tensors {extra[:5]}")

    for k, v in {**state.trainable(), **state.frozen()}.items():
        v.data = recs[k].copy()
    state.cls.center = recs["cls.center"].copy()
    for k in state.trainable():
        state.opt.m[k] = recs["optim.m." + k].copy()
        state.opt.v[k] = recs["optim.v." + k].copy()
    state.opt.step = int(recs["optim.step"])
    state.step = int(recs["sched.step"])
    state.tau_mcl = float(recs["sched.tau_mcl"])
    state.lam = float(recs["sched.lambda"])
    state.teacher.lam = state.lam
    state.norm = tuple(float(x) for x in recs["data.norm"])
    return state


def describe(path: str | os.PathLike) -> list[tuple[str, str, tuple[int, ...]]]:
    """``(name, dtype, shape)`` for every record, in file order."""
    return [(k, str(v.dtype), tuple(v.shape)) for k, v in load_tensors(path).items()]
