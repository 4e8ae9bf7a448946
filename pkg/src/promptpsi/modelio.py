"""PSIC1 model files: a JSON metadata block followed by named float64 arrays.

Layout (little-endian)::

    b"PSIC1"  u32 version  u64 meta_len  meta (UTF-8 JSON, sorted keys)
    u32 n_records
    n_records x [u16 name_len, name, u8 ndim, u32 * ndim shape, f64 * prod(shape)]

Nothing time-dependent is written, so equal inputs give equal bytes.
"""
import hashlib
import json
import os
import struct

import numpy as np

from .codec import CodecConfig, CodecModel
from .prompts import Prompt, PromptBank, TaskDescriptor
from .tensor import Tensor

MODEL_MAGIC = b"PSIC1"
MODEL_VERSION = 1


def write_bundle(path, meta, arrays):
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MODEL_MAGIC, struct.pack("<IQ", MODEL_VERSION, len(meta_raw)), meta_raw,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write model file {path}: {exc}") from exc


def read_bundle(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read model file {path}: {exc}") from exc
    if raw[:5] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a PSIC1 model file")
    version, meta_len = struct.unpack_from("<IQ", raw, 5)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model file version {version}")
    off = 5 + 12
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in model file")
    return meta, arrays


def model_arrays(model, bank=None):
    arrays = {f"param/{n}": t.data for n, t in model.params.items()}
    if bank is not None:
        for i, p in enumerate(bank):
            arrays[f"bank/{i}/key_vec"] = p.key_vec.data
            arrays[f"bank/{i}/value"] = p.value.data
    return arrays


def bank_meta(bank):
    return {"d_p": bank.d_p, "tasks": [list(p.key_meta.as_tuple()) for p in bank]}


def save_model(path, model, bank=None, meta=None, extra_arrays=None):
    meta = dict(meta or {})
    meta["codec"] = model.cfg.to_dict()
    meta["kind"] = "prompt" if model.cfg.prompted else "baseline"
    if bank is not None:
        meta["bank"] = bank_meta(bank)
    arrays = model_arrays(model, bank)
    if extra_arrays:
        arrays.update(extra_arrays)
    write_bundle(path, meta, arrays)


def bank_from(meta, arrays):
    if "bank" not in meta:
        return None
    b = meta["bank"]
    prompts = [Prompt(TaskDescriptor(*t), Tensor(arrays[f"bank/{i}/key_vec"], requires_grad=True),
                      Tensor(arrays[f"bank/{i}/value"], requires_grad=True))
               for i, t in enumerate(b["tasks"])]
    return PromptBank(prompts, int(b["d_p"]))


def load_model(path):
    """Returns ``(model, bank_or_None, meta, arrays)``."""
    meta, arrays = read_bundle(path)
    cfg = CodecConfig.from_dict(meta["codec"])
    model = CodecModel(cfg, np.random.default_rng(0))
    model.load_arrays({n: arrays[f"param/{n}"] for n in model.params})
    return model, bank_from(meta, arrays), meta, arrays


def param_hash(model, prefix):
    """SHA-256 over the named parameters starting with ``prefix``."""
    h = hashlib.sha256()
    for n, t in model.params.items():
        if n.startswith(prefix):
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
