"""Binary checkpoint container and model/LM persistence.

Layout: magic ``TOGM``, format version u32, one u32-length-prefixed UTF-8
block of ``key=value`` lines, then parameter records until end of file. Each
record is name length u16, name bytes, rank u8, extents as u32, then the
float32 payload, all little-endian. Round trips are bit-exact because values
are stored and restored as raw float32 words.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"TOGM"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_kv(kv: dict[str, str]) -> bytes:
    lines = []
    for key, value in kv.items():
        if "=" not in key and "\n" not in key and "\n" not in value:
            lines.append(f"{key}={value}")
        else:
            raise CheckpointError(f"key {key!r} or its value cannot be encoded")
    return "\n".join(lines).encode("utf-8")


def decode_kv(blob: bytes) -> dict[str, str]:
    kv: dict[str, str] = {}
    text = blob.decode("utf-8")
    if not text:
        return kv
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        kv[key] = value
    return kv


def write_checkpoint(path: str, kv: dict[str, str],
                     arrays: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        blob = encode_kv(kv)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in arrays:
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise CheckpointError(f"record name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            if data.ndim > 0xFF:
                raise CheckpointError(f"rank {data.ndim} too large for {name!r}")
            fh.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.tobytes())


def read_checkpoint(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kv_len = struct.unpack("<I", take(4, "metadata length"))[0]
    kv = decode_kv(bytes(take(kv_len, "metadata")))

    arrays: dict[str, np.ndarray] = {}
    while pos < len(view):
        name_len = struct.unpack("<H", take(2, "record name length"))[0]
        name = bytes(take(name_len, "record name")).decode("utf-8")
        rank = struct.unpack("<B", take(1, "record rank"))[0]
        shape = tuple(
            struct.unpack("<I", take(4, f"extent of {name!r}"))[0] for _ in range(rank)
        )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(4 * count, f"data of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        if name in arrays:
            raise CheckpointError(f"duplicate record {name!r}")
        arrays[name] = arr
    return kv, arrays


def config_fingerprint(kv: dict[str, str]) -> str:
    """Stable digest over a key=value mapping, for resume compatibility checks."""
    canon = "\n".join(f"{k}={v}" for k, v in sorted(kv.items()))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# -- model persistence ---------------------------------------------------------


@dataclass
class LoadedModel:
    model: "object"
    kv: dict[str, str]
    extra_arrays: dict[str, np.ndarray]


def save_model(path: str, model, extra_kv: dict[str, str] | None = None,
               extra_arrays: list[tuple[str, np.ndarray]] | None = None) -> None:
    kv = {"kind": "transducer"}
    kv.update(model.config.to_kv())
    kv["seed"] = str(model.seed)
    kv["has_normalizer"] = "1" if model.normalizer is not None else "0"
    kv["has_nnlm_head"] = "1" if model.has_nnlm_head else "0"
    if extra_kv:
        kv.update(extra_kv)
    arrays: list[tuple[str, np.ndarray]] = [(p.name, p.data) for p in model.parameters()]
    if model.normalizer is not None:
        arrays.append(("norm.mean", model.normalizer.mean))
        arrays.append(("norm.std", model.normalizer.std))
    if extra_arrays:
        arrays.extend(extra_arrays)
    write_checkpoint(path, kv, arrays)


def load_model(path: str) -> LoadedModel:
    from .features import Normalizer
    from .model import ModelConfig, TransducerModel

    kv, arrays = read_checkpoint(path)
    if kv.get("kind") != "transducer":
        raise CheckpointError(
            f"expected a transducer checkpoint, found kind={kv.get('kind')!r}"
        )
    config = ModelConfig.from_kv(kv)
    model = TransducerModel(config, seed=int(kv.get("seed", "0")))
    if kv.get("has_nnlm_head") == "1":
        model.attach_nnlm_head()
    consumed = set()
    for param in model.parameters():
        if param.name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {param.name!r}")
        stored = arrays[param.name]
        if stored.shape != param.data.shape:
            raise CheckpointError(
                f"parameter {param.name!r} has shape {stored.shape}, "
                f"expected {param.data.shape}"
            )
        param.data = stored.astype(param.data.dtype)
        consumed.add(param.name)
    if kv.get("has_normalizer") == "1":
        for name in ("norm.mean", "norm.std"):
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing record {name!r}")
        model.normalizer = Normalizer(mean=arrays["norm.mean"], std=arrays["norm.std"])
        consumed.update(("norm.mean", "norm.std"))
    extra = {k: v for k, v in arrays.items() if k not in consumed}
    return LoadedModel(model=model, kv=kv, extra_arrays=extra)


def save_lm(path: str, lm, extra_kv: dict[str, str] | None = None) -> None:
    kv = {"kind": "lm"}
    kv.update(lm.config.to_kv())
    kv["seed"] = str(lm.seed)
    kv["trained"] = "1" if lm.trained else "0"
    if extra_kv:
        kv.update(extra_kv)
    write_checkpoint(path, kv, [(p.name, p.data) for p in lm.parameters()])


def load_lm(path: str):
    from .model import ExternalLm, LmConfig

    kv, arrays = read_checkpoint(path)
    if kv.get("kind") != "lm":
        raise CheckpointError(
            f"expected a language model checkpoint, found kind={kv.get('kind')!r}"
        )
    lm = ExternalLm(LmConfig.from_kv(kv), seed=int(kv.get("seed", "0")))
    for param in lm.parameters():
        if param.name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {param.name!r}")
        if arrays[param.name].shape != param.data.shape:
            raise CheckpointError(
                f"parameter {param.name!r} has shape {arrays[param.name].shape}, "
                f"expected {param.data.shape}"
            )
        param.data = arrays[param.name].astype(param.data.dtype)
    lm.trained = kv.get("trained") == "1"
    return lm, kv
