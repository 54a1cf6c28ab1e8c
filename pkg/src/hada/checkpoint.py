"""Binary checkpoints for :class:`~hada.model.HadaParams`.

Layout (little-endian)::

    "HADC" | u32 version | u32 config hash | u32 block count
    block  = u32 name len | utf8 name | u32 rank | rank * u32 dims | f64 payload
    tail   = f64 tau | f64 alpha | u32 phase

Optimizer moments ride along as blocks named ``opt.m.<param>`` and
``opt.v.<param>`` plus a rank-0 ``opt.step`` block. A JSON sidecar
(``<path>.json``) records the model config so a checkpoint can be reopened
without the original run config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigMismatchError
from .model import HadaParams, ModelConfig, init_params
from .numerics import AdamWState, Tensor

MAGIC = b"HADC"
VERSION = 1
_SCALARS = ("tau", "alpha")


def _blocks(params, optimizer):
    for name, t in params.tensors.items():
        if name not in _SCALARS:
            yield name, t.values
    if optimizer is not None:
        for name in params.tensors:
            if name in optimizer.m:
                yield f"opt.m.{name}", optimizer.m[name]
                yield f"opt.v.{name}", optimizer.v[name]
        yield "opt.step", np.array(float(optimizer.step))


def encode_checkpoint(params, optimizer=None):
    blocks = list(_blocks(params, optimizer))
    out = bytearray(MAGIC)
    out += struct.pack("<III", VERSION, params.config.hash(), len(blocks))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<ddI", params.tau.item(), params.alpha.item(), params.phase)
    return bytes(out)


def decode_checkpoint(buf):
    """Parse raw bytes into (config hash, blocks, tau, alpha, phase)."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("bad magic: not a HADC checkpoint")
    version, chash, count = struct.unpack("<III", take(12))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    tau, alpha, phase = struct.unpack("<ddI", take(20))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return chash, blocks, tau, alpha, phase


def save_checkpoint(params, path, optimizer=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, optimizer))
    sidecar = json.dumps(params.config.to_json(), indent=1, sort_keys=True)
    Path(f"{path}.json").write_text(sidecar + "\n", encoding="utf-8")


def load_checkpoint(path, config=None, with_optimizer=False):
    """Load parameters; ``config`` defaults to the JSON sidecar.

    Raises :class:`ConfigMismatchError` when the stored architecture hash does
    not match ``config``.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    chash, blocks, tau, alpha, phase = decode_checkpoint(buf)
    if config is None:
        sidecar = Path(f"{path}.json")
        if not sidecar.exists():
            raise CheckpointError(f"no model config given and no sidecar {sidecar}")
        config = ModelConfig.from_json(json.loads(sidecar.read_text(encoding="utf-8")))
    if config.hash() != chash:
        raise ConfigMismatchError(
            f"config mismatch: checkpoint hash {chash:#010x} != model config {config.hash():#010x}"
        )
    expected = {k: t.shape for k, t in init_params(config, 0).tensors.items() if k not in _SCALARS}
    found = {k: a.shape for k, a in blocks.items() if not k.startswith("opt.")}
    if found != expected:
        raise ConfigMismatchError("config mismatch: parameter blocks do not match the model config")
    tensors = {}
    for name, arr in blocks.items():
        if not name.startswith("opt."):
            tensors[name] = Tensor(arr, name=name, requires_grad=True)
    tensors["tau"] = Tensor(np.array(tau), name="tau", requires_grad=True)
    tensors["alpha"] = Tensor(np.array(alpha), name="alpha", requires_grad=True)
    params = HadaParams(config, tensors, phase)
    if not with_optimizer:
        return params
    opt = None
    if "opt.step" in blocks:
        opt = AdamWState(step=int(blocks["opt.step"]))
        for name in tensors:
            if f"opt.m.{name}" in blocks:
                opt.m[name] = blocks[f"opt.m.{name}"].copy()
                opt.v[name] = blocks[f"opt.v.{name}"].copy()
    return params, opt
