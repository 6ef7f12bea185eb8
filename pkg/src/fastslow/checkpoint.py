"""Byte-deterministic checkpoint files ("RM2C"), sharing the container
conventions of the episode store: little-endian, canonical key-sorted text
header, named float64 arrays in sorted order."""

from __future__ import annotations

import numpy as np

from .binio import FormatError, Reader, Writer, pack_text_map, unpack_text_map
from .iql import NetParams, TrainConfig
from .nets import Params
from .planner import LocalizerParams
from .trajstore import BadMagic, UnsupportedVersion

MAGIC = b"RM2C"
VERSION = 1


def _pack_arrays(arrays: dict[str, np.ndarray], header: dict[str, str]) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.u32(VERSION)
    hb = pack_text_map(header)
    w.u64(len(hb))
    w.raw(hb)
    w.u64(len(arrays))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        w.string(name)
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u64(d)
        w.f64s(arr.ravel(order="C").tolist())
    return w.getvalue()


def _unpack_arrays(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    r = Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}")
    header = unpack_text_map(r.take(r.u64()))
    n = r.u64()
    arrays = {}
    for _ in range(n):
        name = r.string()
        ndim = r.u32()
        shape = tuple(r.u64() for _ in range(ndim))
        count = 1
        for d in shape:
            count *= d
        arrays[name] = np.array(r.f64s(count)).reshape(shape)
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes in checkpoint")
    return arrays, header


def _mlp_arrays(prefix: str, params: Params) -> dict[str, np.ndarray]:
    out = {}
    for i, (W, b) in enumerate(params):
        out[f"{prefix}.{i}.W"] = W
        out[f"{prefix}.{i}.b"] = b
    return out


def _mlp_from_arrays(prefix: str, arrays: dict[str, np.ndarray]) -> Params:
    params = []
    i = 0
    while f"{prefix}.{i}.W" in arrays:
        params.append((arrays[f"{prefix}.{i}.W"], arrays[f"{prefix}.{i}.b"]))
        i += 1
    if not params:
        raise FormatError(f"checkpoint has no arrays under {prefix!r}")
    return params


def save_iql(path, params: NetParams, cfg: TrainConfig, extra_header: dict[str, str] | None = None) -> int:
    arrays = {}
    arrays.update(_mlp_arrays("v", params.v))
    arrays.update(_mlp_arrays("q", params.q))
    arrays.update(_mlp_arrays("q_target", params.q_target))
    arrays.update(_mlp_arrays("pi_mean", params.pi_mean))
    arrays["log_std"] = params.log_std
    if params.obs_mu is not None:
        arrays["obs_mu"] = params.obs_mu
        arrays["obs_sd"] = params.obs_sd
        arrays["act_scale"] = params.act_scale
    header = {
        "kind": "iql",
        "tau": repr(cfg.tau),
        "gamma_rl": repr(cfg.gamma_rl),
        "beta": repr(cfg.beta),
        "loss_variant": cfg.loss_variant,
        "seed": str(cfg.seed),
        "hidden": str(cfg.hidden),
    }
    header.update(extra_header or {})
    data = _pack_arrays(arrays, header)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_iql(path) -> tuple[NetParams, dict[str, str]]:
    with open(path, "rb") as f:
        arrays, header = _unpack_arrays(f.read())
    if header.get("kind") not in ("iql", "bc"):
        raise FormatError(f"not a policy checkpoint: kind={header.get('kind')!r}")
    params = NetParams(
        v=_mlp_from_arrays("v", arrays),
        q=_mlp_from_arrays("q", arrays),
        q_target=_mlp_from_arrays("q_target", arrays),
        pi_mean=_mlp_from_arrays("pi_mean", arrays),
        log_std=arrays["log_std"],
        obs_mu=arrays.get("obs_mu"),
        obs_sd=arrays.get("obs_sd"),
        act_scale=arrays.get("act_scale"),
    )
    return params, header


def save_bc(path, params: NetParams, cfg: TrainConfig, extra_header: dict[str, str] | None = None) -> int:
    header = {"kind": "bc"}
    header.update(extra_header or {})
    return save_iql(path, params, cfg, header)


def save_localizer(path, params: LocalizerParams, extra_header: dict[str, str] | None = None) -> int:
    arrays = {}
    arrays.update(_mlp_arrays("trunk", params.trunk))
    arrays["index_head.W"], arrays["index_head.b"] = params.index_head
    arrays["progress_head.W"], arrays["progress_head.b"] = params.progress_head
    if params.in_mu is not None:
        arrays["in_mu"] = params.in_mu
        arrays["in_sd"] = params.in_sd
    header = {
        "kind": "localizer",
        "feature_dim": str(params.feature_dim),
        "max_subtasks": str(params.max_subtasks),
    }
    header.update(extra_header or {})
    data = _pack_arrays(arrays, header)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_localizer(path) -> tuple[LocalizerParams, dict[str, str]]:
    with open(path, "rb") as f:
        arrays, header = _unpack_arrays(f.read())
    if header.get("kind") != "localizer":
        raise FormatError(f"not a localizer checkpoint: kind={header.get('kind')!r}")
    return (
        LocalizerParams(
            trunk=_mlp_from_arrays("trunk", arrays),
            index_head=(arrays["index_head.W"], arrays["index_head.b"]),
            progress_head=(arrays["progress_head.W"], arrays["progress_head.b"]),
            feature_dim=int(header["feature_dim"]),
            max_subtasks=int(header["max_subtasks"]),
            in_mu=arrays.get("in_mu"),
            in_sd=arrays.get("in_sd"),
        ),
        header,
    )
