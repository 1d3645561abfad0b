"""Binary checkpoint container.

Layout, little-endian throughout:

    magic "LSVT" | u32 version | u32 json_len | config JSON (utf-8)
    u32 tensor_count
    per tensor: u16 name_len | name | u8 dtype (0=f32, 1=f64) | u8 ndim
                | u32 * ndim dims | raw values
    u8 center_flag | (u8 dtype | u32 length | raw values) when set
    u64 epoch | u64 step

The JSON block snapshots both configs plus the dataset channel statistics,
which is everything needed to rebuild the models and resume bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import BinaryIO

import numpy as np

from .augment import ChannelStats
from .distill import DistillConfig, TrainerState
from .errors import FormatError
from .vit import ViTConfig

MAGIC = b"LSVT"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read(fh: BinaryIO, count: int, what: str) -> bytes:
    blob = fh.read(count)
    if len(blob) != count:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return blob


def _write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _DTYPE_CODES[np.dtype(le.dtype)]
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(le.tobytes())


def _read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read(fh, 2, "tensor name length"))
    name = _read(fh, name_len, "tensor name").decode("utf-8")
    code, ndim = struct.unpack("<BB", _read(fh, 2, f"tensor {name} header"))
    if code not in _CODE_DTYPES:
        raise FormatError(f"tensor {name}: unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, f"tensor {name} dims"))
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    raw = _read(fh, nbytes, f"tensor {name} values")
    return name, np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def _config_json(state: TrainerState) -> bytes:
    payload = {
        "kind": "trainer",
        "vit": dataclasses.asdict(state.vit_config),
        "distill": dataclasses.asdict(state.config),
        "stats": dataclasses.asdict(state.stats) if state.stats is not None else None,
    }
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def save_checkpoint(state: TrainerState, path: str) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    tensors.extend((f"student.{n}", t.data) for n, t in state.student.named_parameters())
    tensors.extend((f"teacher.{n}", t.data) for n, t in state.teacher.named_parameters())
    tensors.extend((f"opt.{n}", v) for n, v in sorted(state.velocities.items()))
    blob = _config_json(state)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(fh, name, arr)
        fh.write(struct.pack("<B", 1))
        center = np.ascontiguousarray(state.center)
        fh.write(struct.pack("<B", _DTYPE_CODES[np.dtype(center.dtype.newbyteorder("<"))]))
        fh.write(struct.pack("<I", center.size))
        fh.write(center.astype(center.dtype.newbyteorder("<"), copy=False).tobytes())
        fh.write(struct.pack("<QQ", state.epoch, state.step))


def load_checkpoint(path: str) -> TrainerState:
    with open(path, "rb") as fh:
        magic = _read(fh, 4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise FormatError(f"checkpoint version {version} unsupported (expected {VERSION})")
        (json_len,) = struct.unpack("<I", _read(fh, 4, "config length"))
        try:
            payload = json.loads(_read(fh, json_len, "config JSON").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint config block ({exc})") from None
        (tensor_count,) = struct.unpack("<I", _read(fh, 4, "tensor count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(tensor_count):
            name, arr = _read_tensor(fh)
            arrays[name] = arr
        (center_flag,) = struct.unpack("<B", _read(fh, 1, "center flag"))
        center = None
        if center_flag:
            code, = struct.unpack("<B", _read(fh, 1, "center dtype"))
            (length,) = struct.unpack("<I", _read(fh, 4, "center length"))
            dtype = _CODE_DTYPES[code]
            center = np.frombuffer(
                _read(fh, length * dtype.itemsize, "center values"), dtype=dtype
            ).copy()
        epoch, step = struct.unpack("<QQ", _read(fh, 16, "counters"))

    vit_config = ViTConfig(**payload["vit"])
    raw = dict(payload["distill"])
    for key in ("global_scale", "local_scale"):
        raw[key] = tuple(raw[key])
    config = DistillConfig(**raw)
    state = TrainerState(vit_config, config)
    state.student.load_state_arrays(
        {n[len("student.") :]: a for n, a in arrays.items() if n.startswith("student.")}
    )
    state.teacher.load_state_arrays(
        {n[len("teacher.") :]: a for n, a in arrays.items() if n.startswith("teacher.")}
    )
    state.teacher.set_requires_grad(False)
    state.velocities = {n[len("opt.") :]: a for n, a in arrays.items() if n.startswith("opt.")}
    if center is not None:
        state.center = center
    if payload.get("stats") is not None:
        state.stats = ChannelStats(
            mean=tuple(payload["stats"]["mean"]), std=tuple(payload["stats"]["std"])
        )
    state.epoch = epoch
    state.step = step
    return state
