"""Binary checkpoint format for :class:`~n2s.field.RadianceField`.

Layout (little endian)::

    b"N2SF"                     magic
    u32  version                (currently 1)
    u32  n                      length of the config block
    n    bytes                  UTF-8 JSON: field config, parameter manifest, extras
    ...  float32 arrays         every parameter, in manifest order, C-contiguous
    ...  float32 arrays         optional optimizer moments (exp_avg, exp_avg_sq per parameter)

The manifest lists ``[name, shape]`` pairs in ``state_dict`` order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .field import FieldConfig, RadianceField

MAGIC = b"N2SF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, field: RadianceField, extras: dict | None = None, optimizer=None) -> None:
    state = field.state_dict()
    manifest = [[name, list(t.shape)] for name, t in state.items()]
    header = {"field": field.config.to_dict(), "params": manifest, "extras": extras or {}}
    moments = []
    if optimizer is not None:
        params = dict(field.named_parameters())
        opt_state = optimizer.state
        steps = {}
        for name, _ in manifest:
            p = params.get(name)
            st = opt_state.get(p) if p is not None else None
            if st:
                moments.append((st["exp_avg"], st["exp_avg_sq"]))
                steps[name] = float(st["step"])
            else:
                moments.append(None)
        header["optimizer"] = {"steps": steps, "has": [m is not None for m in moments]}
    block = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(block)))
        fh.write(block)
        for t in state.values():
            fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        for m in moments:
            if m is not None:
                for t in m:
                    fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], list | None]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt config block") from exc
    offset = 12 + n
    arrays = {}

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated parameter data")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        return arr.copy()

    for name, shape in header["params"]:
        arrays[name] = take(shape)
    moments = None
    if "optimizer" in header:
        moments = []
        for (name, shape), has in zip(header["params"], header["optimizer"]["has"]):
            moments.append((take(shape), take(shape)) if has else None)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays, moments


def load_checkpoint(path) -> tuple[RadianceField, dict]:
    header, arrays, _ = read_checkpoint(path)
    field = RadianceField(FieldConfig.from_dict(header["field"]))
    field.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return field, header.get("extras", {})


def restore_optimizer(path, field: RadianceField, optimizer) -> None:
    """Load saved moments into a freshly constructed optimizer for ``field``."""
    header, _, moments = read_checkpoint(path)
    if moments is None:
        return
    params = dict(field.named_parameters())
    steps = header["optimizer"]["steps"]
    for (name, _), m in zip(header["params"], moments):
        if m is None or name not in params:
            continue
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(m[0]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(m[1]).to(p.dtype),
        }
