"""Binary checkpoints for base networks and adapters.

Layout (all integers little-endian)::

    8 bytes   magic  b"MITUNECK"
    uint32    format version
    uint32    header length H
    H bytes   UTF-8 JSON header (sorted keys)
    ...       float64 little-endian arrays, row-major, in header["arrays"] order

The header carries ``kind`` ("base" or "adapter"), the network shape,
the schedule parameters and the condition vocabulary. Adapter files hold
only adapter arrays and are loaded on top of a base network.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .adapter import AdaptedDenoiser, LowRankAdapter
from .denoiser import MlpDenoiser

MAGIC = b"MITUNECK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def params_digest(params: dict) -> str:
    """SHA-256 over names, shapes and raw bytes of a parameter dict."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def _vocabulary(num_labels: int) -> list[str]:
    return [str(c) for c in range(num_labels)] + ["null"]


def _write(path, header: dict, arrays: dict) -> None:
    header = dict(header, format_version=FORMAT_VERSION,
                  arrays=[{"name": k, "shape": list(v.shape)} for k, v in arrays.items()])
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def _read(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16:16 + hlen])
    offset = 16 + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"]))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated at array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(
            spec["shape"]).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays


def save_base(path, net: MlpDenoiser, schedule_params: dict) -> None:
    header = {"kind": "base", "net": net.config(), "schedule": schedule_params,
              "conditions": _vocabulary(net.num_labels)}
    _write(path, header, net.params)


def load_base(path, schedule_params: dict | None = None):
    """Load a base network; returns ``(net, header)``.

    With ``schedule_params`` the stored schedule must match exactly.
    """
    header, arrays = _read(path)
    if header.get("kind") != "base":
        raise CheckpointError(f"{path}: expected a base checkpoint, found {header.get('kind')}")
    check_schedule(header, schedule_params, path)
    return MlpDenoiser(**header["net"], params=arrays), header


def save_adapters(path, adapted: AdaptedDenoiser, schedule_params: dict,
                  meta: dict | None = None) -> None:
    arrays = {}
    for name, arr in adapted.trainable_params().items():
        arrays[name] = arr
    header = {"kind": "adapter", "net": adapted.base.config(), "schedule": schedule_params,
              "conditions": _vocabulary(adapted.num_labels),
              "adapters": adapted.adapter_config(),
              "base_digest": params_digest(adapted.base.params), "meta": meta or {}}
    _write(path, header, arrays)


def load_adapters(path, base: MlpDenoiser, schedule_params: dict | None = None):
    header, arrays = _read(path)
    if header.get("kind") != "adapter":
        raise CheckpointError(f"{path}: expected an adapter checkpoint")
    check_schedule(header, schedule_params, path)
    if header["base_digest"] != params_digest(base.params):
        raise CheckpointError(f"{path}: adapters were trained on a different base network")
    adapters = {}
    for key, spec in header["adapters"].items():
        i = int(key)
        adapters[i] = LowRankAdapter(i, spec["rank"], spec["scale"], spec["variant"],
                                     arrays[f"A{i}"], arrays[f"B{i}"], arrays.get(f"m{i}"))
    return AdaptedDenoiser(base, adapters), header


def check_schedule(header: dict, schedule_params: dict | None, path="checkpoint") -> None:
    if schedule_params is None:
        return
    stored = header.get("schedule", {})
    if stored != json.loads(json.dumps(schedule_params)):
        raise CheckpointError(f"{path}: schedule mismatch, checkpoint has {stored}, "
                              f"config has {schedule_params}")
