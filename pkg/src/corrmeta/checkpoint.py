"""Bit-exact binary checkpoints.

Layout (all integers little-endian)::

    magic  b"CRMTCKPT" | u32 version
    section* : 4-byte tag | u64 length | payload
        CONF  key=value text (model/train config, step, best accuracy, Adam scalars)
        PARM  tensor records for parameters
        OPTM  tensor records for Adam moments ("m/<name>", "v/<name>")
    b"END!" | u32 crc32 of every preceding byte

Tensor record: u16 name length | name | u8 dtype code | u8 ndim | u32 dims | raw payload.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ModelConfig, config_snapshot, init_params, parse_snapshot
from .optim import AdamState
from .tensor import ParamStore

MAGIC = b"CRMTCKPT"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ParamStore
    train_config: dict = field(default_factory=dict)
    opt_state: AdamState = field(default_factory=AdamState)
    step: int = 0
    best_val_accuracy: float = float("nan")
    best_val_ci95: float = float("nan")

    def param_count(self) -> int:
        return self.params.count()


def _write_records(buf: io.BytesIO, arrays: dict[str, np.ndarray]) -> None:
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        code = _CODE_OF.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def _read_records(payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    off = 0
    try:
        while off < len(payload):
            (n,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + n].decode("utf-8")
            off += n
            code, ndim = struct.unpack_from("<BB", payload, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            dt = _DTYPE_CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(payload):
                raise CheckpointError(f"record {name!r} is truncated")
            arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed tensor records: {exc}") from exc
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "step": ckpt.step,
        "best_val_accuracy": ckpt.best_val_accuracy,
        "best_val_ci95": ckpt.best_val_ci95,
        "adam": {"beta1": ckpt.opt_state.beta1, "beta2": ckpt.opt_state.beta2,
                 "eps": ckpt.opt_state.eps, "step": ckpt.opt_state.step},
    }
    text = config_snapshot(ckpt.model_config, ckpt.train_config)
    text += "".join(f"meta.{k}={json.dumps(v)}\n" for k, v in _flat(meta).items())

    params = io.BytesIO()
    _write_records(params, ckpt.params.arrays())
    opt = io.BytesIO()
    moments = {f"m/{k}": v for k, v in ckpt.opt_state.m.items()}
    moments.update({f"v/{k}": v for k, v in ckpt.opt_state.v.items()})
    _write_records(opt, moments)

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for tag, payload in ((b"CONF", text.encode("utf-8")), (b"PARM", params.getvalue()), (b"OPTM", opt.getvalue())):
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    return body + b"END!" + struct.pack("<I", zlib.crc32(body))


def _flat(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flat(v, key + "."))
        else:
            out[key] = v
    return out


def from_bytes(data: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if data[-8:-4] != b"END!":
        raise CheckpointError("checkpoint is truncated (missing end marker)")
    body = data[:-8]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated)")

    sections = {}
    off = len(MAGIC) + 4
    while off < len(body):
        if off + 12 > len(body):
            raise CheckpointError("truncated section header")
        tag = body[off:off + 4].decode("ascii", "replace")
        (n,) = struct.unpack_from("<Q", body, off + 4)
        off += 12
        if off + n > len(body):
            raise CheckpointError(f"section {tag} is truncated")
        sections[tag] = body[off:off + n]
        off += n
    for tag in ("CONF", "PARM", "OPTM"):
        if tag not in sections:
            raise CheckpointError(f"checkpoint lacks section {tag}")

    conf = parse_snapshot(sections["CONF"].decode("utf-8"))
    model_cfg = ModelConfig.from_dict(conf["model"])
    meta = conf.get("meta", {})
    arrays = _read_records(sections["PARM"])
    _check_against(arrays, model_cfg)
    if expected is not None:
        _check_against(arrays, expected)

    moments = _read_records(sections["OPTM"])
    adam = meta.get("adam", {})
    state = AdamState(
        beta1=adam.get("beta1", 0.9), beta2=adam.get("beta2", 0.999), eps=adam.get("eps", 1e-8),
        step=adam.get("step", 0),
        m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
        v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
    )
    return Checkpoint(
        model_config=model_cfg,
        params=ParamStore(arrays),
        train_config=conf.get("train", {}),
        opt_state=state,
        step=meta.get("step", 0),
        best_val_accuracy=meta.get("best_val_accuracy", float("nan")),
        best_val_ci95=meta.get("best_val_ci95", float("nan")),
    )


def _check_against(arrays: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    ref = init_params(cfg, seed=0)
    want = {n: ref[n].shape for n in ref}
    got = {n: a.shape for n, a in arrays.items()}
    if set(want) != set(got):
        extra = sorted(set(got) - set(want))[:3]
        lack = sorted(set(want) - set(got))[:3]
        raise CheckpointError(f"parameter names do not match the model (unexpected {extra}, missing {lack})")
    bad = [n for n in want if want[n] != got[n]]
    if bad:
        n = bad[0]
        raise CheckpointError(f"shape mismatch for {n}: checkpoint {got[n]}, model {want[n]}")


def save_checkpoint(ckpt: Checkpoint, path: os.PathLike) -> None:
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: os.PathLike, expected: Optional[ModelConfig] = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), expected)
