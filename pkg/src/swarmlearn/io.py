"""Persistence: experiment configs (YAML), trajectories (binary + CSV),
and kernel estimates (NPZ with JSON metadata).

Trajectory binary layout (all little-endian):

    magic   4 bytes  b"SWTR"
    version u32      1
    flags   u32      bit0: velocities present, bit1: xi present
    M, L, N, d  u32 each
    times   L f8
    then per trajectory, row-major f8 blocks:
        X  (L*N*d), V (L*N*d, if flagged), Xi (L*N, if flagged)
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import yaml

from .basis import BasisSpec, LearningDomain
from .dynamics import Trajectory
from .estimator import EstimatedKernel, KernelEstimate

_MAGIC = b"SWTR"
_VERSION = 1


class IoError(RuntimeError):
    pass


# --- configs ----------------------------------------------------------------

def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def load_config(path) -> dict:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise IoError(f"config {path} is not a key-value tree")
    return data


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v) and not isinstance(v, type):
            v = dataclasses.asdict(v)
        elif isinstance(v, dict):
            v = {k: (dataclasses.asdict(x) if dataclasses.is_dataclass(x) else x)
                 for k, x in v.items()}
        out[f.name] = v
    return out


# --- trajectories -------------------------------------------------------------

def save_trajectories(path, trajectories: list) -> None:
    trajectories = list(trajectories)
    if not trajectories:
        raise IoError("nothing to save")
    t0 = trajectories[0]
    L = t0.L
    N, d = t0.X.shape[1:]
    has_v = t0.V is not None
    has_xi = t0.Xi is not None
    flags = (1 if has_v else 0) | (2 if has_xi else 0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIIII", _VERSION, flags, len(trajectories), L, N, d))
        np.asarray(t0.times, dtype="<f8").tofile(fh)
        for tr in trajectories:
            if (tr.X.shape != (L, N, d) or (tr.V is not None) != has_v
                    or (tr.Xi is not None) != has_xi):
                raise IoError("trajectories disagree in shape or channels")
            np.ascontiguousarray(tr.X, dtype="<f8").tofile(fh)
            if has_v:
                np.ascontiguousarray(tr.V, dtype="<f8").tofile(fh)
            if has_xi:
                np.ascontiguousarray(tr.Xi, dtype="<f8").tofile(fh)


def load_trajectories(path) -> list:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise IoError(f"{path} is not a trajectory file")
        version, flags, M, L, N, d = struct.unpack("<IIIIII", fh.read(24))
        if version != _VERSION:
            raise IoError(f"unsupported trajectory format version {version}")
        has_v, has_xi = bool(flags & 1), bool(flags & 2)
        times = np.fromfile(fh, dtype="<f8", count=L)
        out = []
        for _ in range(M):
            X = np.fromfile(fh, dtype="<f8", count=L * N * d).reshape(L, N, d)
            V = None
            if has_v:
                V = np.fromfile(fh, dtype="<f8", count=L * N * d).reshape(L, N, d)
            Xi = None
            if has_xi:
                Xi = np.fromfile(fh, dtype="<f8", count=L * N).reshape(L, N)
            out.append(Trajectory(times=times.copy(), X=X, V=V, Xi=Xi))
    return out


def export_trajectory_csv(path, tr: Trajectory) -> None:
    """Delimiter-separated export: one row per (time, agent)."""
    L, N, d = tr.X.shape
    cols = ["t", "agent"] + [f"x{j}" for j in range(d)]
    if tr.V is not None:
        cols += [f"v{j}" for j in range(d)]
    if tr.Xi is not None:
        cols.append("xi")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for l in range(L):
            for i in range(N):
                row = [repr(float(tr.times[l])), str(i)]
                row += [repr(float(v)) for v in tr.X[l, i]]
                if tr.V is not None:
                    row += [repr(float(v)) for v in tr.V[l, i]]
                if tr.Xi is not None:
                    row.append(repr(float(tr.Xi[l, i])))
                fh.write(",".join(row) + "\n")


# --- kernel estimates ------------------------------------------------------------

def _bspec_to_dict(b: BasisSpec) -> dict:
    d = {"kind": b.kind, "n_r": b.n_r, "n_s": b.n_s,
         "r_min": b.domain.r_min, "r_max": b.domain.r_max,
         "s_min": b.domain.s_min, "s_max": b.domain.s_max}
    return d


def _bspec_from_dict(d: dict) -> BasisSpec:
    dom = LearningDomain(d["r_min"], d["r_max"], d["s_min"], d["s_max"])
    return BasisSpec(kind=d["kind"], domain=dom, n_r=d["n_r"], n_s=d["n_s"])


def save_estimate(path, est: KernelEstimate) -> None:
    arrays = {}
    meta = {"provenance": _jsonable(est.provenance), "blocks": {}}
    for (ch, k, kp), kern in est.blocks.items():
        name = f"{ch}__{k}__{kp}"
        arrays[name] = kern.coeffs
        meta["blocks"][name] = _bspec_to_dict(kern.bspec)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                       dtype=np.uint8)
    np.savez(path, **arrays)


def load_estimate(path) -> KernelEstimate:
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode())
    blocks = {}
    for name, bd in meta["blocks"].items():
        ch, k, kp = name.split("__")
        blocks[(ch, int(k), int(kp))] = EstimatedKernel(
            bspec=_bspec_from_dict(bd), coeffs=np.asarray(data[name], dtype=float))
    return KernelEstimate(blocks=blocks, provenance=meta.get("provenance", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
