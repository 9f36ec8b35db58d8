"""Binary checkpoint container shared by both networks.

Layout::

    magic  b"TGBFNCKP"            8 bytes
    version                       uint32 little-endian
    metadata length (bytes)       uint64 little-endian
    metadata                      UTF-8 JSON object
    tensors                       little-endian float64, concatenated in the
                                  order of metadata["tensors"]

The metadata object carries ``component`` ("denoiser" or "guidance"),
``config``, ``step``, ``seed``, an optional condition ``transform`` and the
``tensors`` list of ``{"name", "shape"}`` entries. Writes go to a temporary
file in the destination directory and are renamed into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

MAGIC = b"TGBFNCKP"
VERSION = 1


def save_checkpoint(path, component: str, config: dict, tensors: dict,
                    step: int = 0, seed: int = 0, extra: dict | None = None) -> None:
    meta = {
        "component": component,
        "config": config,
        "step": int(step),
        "seed": int(seed),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    meta.update(extra or {})
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(blob)))
            fh.write(blob)
            for value in tensors.values():
                fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, component: str | None = None):
    """Return ``(metadata, tensors)``; checks the component tag if given."""
    path = Path(path)
    if not path.exists():
        raise InvalidArgument(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise InvalidArgument(f"{path} is not a checkpoint (bad magic)")
    version, n_meta = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    meta = json.loads(raw[offset:offset + n_meta].decode("utf-8"))
    offset += n_meta
    if component is not None and meta["component"] != component:
        raise InvalidArgument(f"{path} holds a {meta['component']} checkpoint, not {component}")
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * size
    if offset != len(raw):
        raise InvalidArgument(f"{path} has {len(raw) - offset} trailing bytes")
    return meta, tensors


def save_denoiser(path, params, step=0, seed=0, transform=None):
    from dataclasses import asdict
    extra = {"transform": transform.to_dict()} if transform is not None else {}
    save_checkpoint(path, "denoiser", asdict(params.config), params.tensors,
                    step, seed, extra)


def load_denoiser(path):
    from .denoiser import DenoiserConfig, DenoiserParams
    meta, tensors = load_checkpoint(path, "denoiser")
    return DenoiserParams(DenoiserConfig(**meta["config"]), tensors), meta


def save_guidance(path, params, step=0, seed=0, transform=None):
    from dataclasses import asdict
    extra = {"transform": transform.to_dict()} if transform is not None else {}
    save_checkpoint(path, "guidance", asdict(params.config), params.tensors,
                    step, seed, extra)


def load_guidance(path):
    from .guidance import GuidanceConfig, GuidanceParams
    meta, tensors = load_checkpoint(path, "guidance")
    return GuidanceParams(GuidanceConfig(**meta["config"]), tensors), meta
