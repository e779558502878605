"""Model file format, lazy tensor stores and residency metering.

File layout (all integers little-endian)::

    header   64 bytes   magic "RWKVL1\\0\\0", u32 version, u8 endianness (0 = little),
                        3 pad, u32 n_entries, u64 dir_offset, u64 dir_length,
                        u64 meta_offset, u64 meta_length, zero padding
    directory           per entry: u16 name_len, name (utf-8), u8 dtype, u8 ndim,
                        u64 dims[ndim], u64 offset, u64 length,
                        u16 scale_len, scale name (utf-8, empty if none)
    metadata            utf-8 JSON (model config and build flags)
    data                tensors, each starting on a 64-byte boundary

FFN matrices are stored neuron-major (``ffn.key_t`` and ``ffn.value`` are
both ``F x D``) so one predicted neuron costs one contiguous row read in
each. Float tensors are stored as f16 by default and widened to f32 on
fetch. Byte counts charged to a :class:`MemoryMeter` are stored bytes.
"""
from __future__ import annotations

import json
import math
import os
import re
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import ModelConfig
from .linalg import QuantTensor1b, QuantTensorI8

MAGIC = b"RWKVL1\0\0"
VERSION = 1
ALIGN = 64
HEADER_SIZE = 64
_HEADER = struct.Struct("<8sIB3xIQQQQ")

DTYPE_CODES = {"f32": 0, "f16": 1, "i8": 2, "bit1": 3, "u32": 4}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
_NP_DTYPES = {"f32": np.dtype("<f4"), "f16": np.dtype("<f2"), "i8": np.dtype("i1"), "u32": np.dtype("<u4")}

COMPONENTS = ("embedding", "time-mix", "channel-mix", "head", "predictor", "state", "scratch")
BLOCK_COMPONENTS = ("time-mix", "channel-mix", "predictor")


class FormatError(ValueError):
    """The file is not a valid model file."""


class TruncatedFileError(OSError):
    """The file ends before the data its directory describes."""


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def expected_length(dtype: str, shape: tuple[int, ...]) -> int:
    n = math.prod(shape)
    if dtype == "bit1":
        return (n + 7) // 8
    return n * _NP_DTYPES[dtype].itemsize


_BLOCK_RE = re.compile(r"^blocks\.(\d+)\.(\w+)\.")


def layer_of(name: str) -> int | None:
    m = _BLOCK_RE.match(name)
    return int(m.group(1)) if m else None


def component_of(name: str) -> str:
    """Memory-accounting tag for a tensor name."""
    m = _BLOCK_RE.match(name)
    if m:
        part = m.group(2)
        if part in ("att", "ln0", "ln1"):
            return "time-mix"
        if part in ("ffn", "ln2"):
            return "channel-mix"
        if part == "pred":
            return "predictor"
        raise ValueError(f"unknown block tensor {name!r}")
    if name == "emb":
        return "embedding"
    if name == "head" or name.startswith(("head.", "ln_out.")):
        return "head"
    raise ValueError(f"unknown tensor {name!r}")


# --------------------------------------------------------------------------
# memory meter
# --------------------------------------------------------------------------


class MemoryMeter:
    """Current/peak resident bytes per component, plus cumulative bytes read.

    Every ``charge`` must be paired with a ``release`` of the same size once
    the data is no longer resident. Updates are serialized by a lock so the
    layerwise prefetch thread can charge concurrently with compute.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current = dict.fromkeys(COMPONENTS, 0)
        self.peak = dict.fromkeys(COMPONENTS, 0)
        self.fetched = dict.fromkeys(COMPONENTS, 0)
        self.total_current = 0
        self.total_peak = 0
        self.block_current = 0
        self.block_peak = 0

    def charge(self, tag: str, nbytes: int, fetched: bool = True) -> None:
        if tag not in self.current:
            raise KeyError(f"unknown component tag {tag!r}")
        with self._lock:
            self.current[tag] += nbytes
            self.peak[tag] = max(self.peak[tag], self.current[tag])
            self.total_current += nbytes
            self.total_peak = max(self.total_peak, self.total_current)
            if tag in BLOCK_COMPONENTS:
                self.block_current += nbytes
                self.block_peak = max(self.block_peak, self.block_current)
            if fetched:
                self.fetched[tag] += nbytes

    def release(self, tag: str, nbytes: int) -> None:
        with self._lock:
            if nbytes > self.current[tag]:
                raise RuntimeError(f"releasing {nbytes} bytes from {tag!r} holding {self.current[tag]}")
            self.current[tag] -= nbytes
            self.total_current -= nbytes
            if tag in BLOCK_COMPONENTS:
                self.block_current -= nbytes

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "current": dict(self.current),
                "peak": dict(self.peak),
                "fetched": dict(self.fetched),
                "total_current": self.total_current,
                "total_peak": self.total_peak,
                "block_peak": self.block_peak,
            }


@dataclass(frozen=True)
class LoadStrategy:
    """``full`` keeps every unmanaged tensor resident for the whole run;
    ``layerwise`` holds one stage plus ``prefetch_depth`` stages ahead."""

    kind: str = "full"
    prefetch_depth: int = 1

    def __post_init__(self):
        if self.kind not in ("full", "layerwise"):
            raise ValueError(f"unknown load strategy {self.kind!r}")
        if self.prefetch_depth < 0:
            raise ValueError("prefetch depth must be >= 0")

    @classmethod
    def parse(cls, s: str) -> "LoadStrategy":
        """``full``, ``layerwise`` or ``layerwise:<prefetch depth>``."""
        kind, _, depth = s.partition(":")
        if depth and kind != "layerwise":
            raise ValueError(f"prefetch depth only applies to layerwise loading, got {s!r}")
        try:
            return cls(kind=kind, prefetch_depth=int(depth) if depth else 1)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"bad load strategy {s!r}: {exc}") from None

    def __str__(self):
        return self.kind if self.kind == "full" else f"layerwise:{self.prefetch_depth}"


FULL = LoadStrategy("full")
LAYERWISE = LoadStrategy("layerwise", 1)


# --------------------------------------------------------------------------
# directory
# --------------------------------------------------------------------------


@dataclass
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    length: int
    scale: str | None = None

    @property
    def row_nbytes(self) -> int:
        if len(self.shape) != 2 or self.dtype == "bit1":
            raise ValueError(f"{self.name} does not support row access")
        return self.shape[1] * _NP_DTYPES[self.dtype].itemsize


@dataclass
class TensorDirectory:
    entries: dict[str, TensorEntry]
    meta: dict = field(default_factory=dict)
    version: int = VERSION
    data_start: int = 0
    file_size: int = 0

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> TensorEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"tensor {name!r} not in model directory") from None

    def component_bytes(self) -> dict[str, int]:
        out = dict.fromkeys(COMPONENTS, 0)
        for e in self.entries.values():
            out[component_of(e.name)] += e.length
        return out

    def padding_bytes(self) -> int:
        used = sum(e.length for e in self.entries.values())
        return self.file_size - self.data_start - used


def _encode_directory(entries: list[TensorEntry]) -> bytes:
    out = bytearray()
    for e in entries:
        name = e.name.encode()
        scale = (e.scale or "").encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", DTYPE_CODES[e.dtype], len(e.shape))
        out += struct.pack(f"<{len(e.shape)}Q", *e.shape)
        out += struct.pack("<QQ", e.offset, e.length)
        out += struct.pack("<H", len(scale)) + scale
    return bytes(out)


def _decode_directory(buf: bytes, n_entries: int) -> list[TensorEntry]:
    entries = []
    pos = 0
    try:
        for _ in range(n_entries):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode()
            pos += n
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if code not in DTYPE_NAMES:
                raise FormatError(f"tensor {name!r} has unknown dtype code {code}")
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            offset, length = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            scale = buf[pos : pos + n].decode() or None
            pos += n
            entries.append(TensorEntry(name, DTYPE_NAMES[code], tuple(shape), offset, length, scale))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt tensor directory: {exc}") from exc
    return entries


def _read_header(f, file_size: int):
    raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        if raw[: len(MAGIC)] != MAGIC[: len(raw)]:
            raise FormatError("bad magic")
        raise TruncatedFileError(f"file is {file_size} bytes, shorter than the header")
    magic, version, endian, n_entries, dir_off, dir_len, meta_off, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if endian != 0:
        raise FormatError("only little-endian files are supported")
    if max(dir_off + dir_len, meta_off + meta_len) > file_size:
        raise TruncatedFileError("file ends inside the directory or metadata")
    return n_entries, dir_off, dir_len, meta_off, meta_len


def read_directory(path) -> TensorDirectory:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        n_entries, dir_off, dir_len, meta_off, meta_len = _read_header(f, size)
        f.seek(dir_off)
        entries = _decode_directory(f.read(dir_len), n_entries)
        f.seek(meta_off)
        try:
            meta = json.loads(f.read(meta_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt metadata: {exc}") from exc
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    return TensorDirectory(
        entries={e.name: e for e in entries},
        meta=meta,
        data_start=_align(meta_off + meta_len),
        file_size=size,
    )


def validate(path) -> list[str]:
    """Return a list of problems with the model file (empty if valid).

    Checks magic, version, dtype codes, 64-byte alignment, entry lengths
    against shapes, overlap, bounds and companion-scale references.
    """
    try:
        d = read_directory(path)
    except (FormatError, TruncatedFileError) as exc:
        return [str(exc)]
    problems = []
    spans = []
    for e in d.entries.values():
        if e.offset % ALIGN:
            problems.append(f"{e.name}: offset {e.offset} not {ALIGN}-byte aligned")
        if e.offset < d.data_start:
            problems.append(f"{e.name}: offset {e.offset} inside the header/directory")
        if e.length != expected_length(e.dtype, e.shape):
            problems.append(f"{e.name}: length {e.length} does not match {e.dtype}{list(e.shape)}")
        if e.offset + e.length > d.file_size:
            problems.append(f"{e.name}: extends past end of file")
        if e.scale is not None and e.scale not in d.entries:
            problems.append(f"{e.name}: companion scale {e.scale!r} missing")
        spans.append((e.offset, e.offset + e.length, e.name))
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            problems.append(f"{an} overlaps {bn}")
    return problems


# --------------------------------------------------------------------------
# writing
# --------------------------------------------------------------------------


def _scale_name(name: str, value) -> str:
    if isinstance(value, QuantTensor1b) and name.endswith(".wk1b"):
        return name[: -len(".wk1b")] + ".scale"
    return name + ".scale"


def _flatten_tensors(tensors: dict, float_dtype: str):
    """Yield (name, dtype, shape, bytes, scale_name) for every stored tensor."""
    for name, value in tensors.items():
        if isinstance(value, QuantTensor1b):
            sname = _scale_name(name, value)
            yield name, "bit1", value.shape, value.sign_bits.tobytes(), sname
            yield sname, "f32", value.scales.shape, value.scales.astype("<f4").tobytes(), None
        elif isinstance(value, QuantTensorI8):
            sname = _scale_name(name, value)
            yield name, "i8", value.shape, value.values.astype("i1").tobytes(), sname
            yield sname, "f32", value.scales.shape, value.scales.astype("<f4").tobytes(), None
        else:
            arr = np.asarray(value)
            if arr.dtype.kind in "ui":
                if arr.min(initial=0) < 0 or arr.max(initial=0) > np.iinfo(np.uint32).max:
                    raise ValueError(f"{name}: integer tensor does not fit u32")
                yield name, "u32", arr.shape, arr.astype("<u4").tobytes(), None
            elif arr.dtype.kind == "f":
                yield name, float_dtype, arr.shape, arr.astype(_NP_DTYPES[float_dtype]).tobytes(), None
            else:
                raise TypeError(f"{name}: cannot store dtype {arr.dtype}")


def write_model(model, path, float_dtype: str = "f16") -> TensorDirectory:
    """Serialize ``model`` (config, meta and tensors) to ``path``."""
    if float_dtype not in ("f16", "f32"):
        raise ValueError("float_dtype must be 'f16' or 'f32'")
    items = list(_flatten_tensors(model.tensors, float_dtype))
    meta = dict(model.meta)
    meta["config"] = model.config.to_dict()
    meta_bytes = json.dumps(meta, sort_keys=True).encode()

    entries = [TensorEntry(n, dt, tuple(int(s) for s in sh), 0, len(b), sc) for n, dt, sh, b, sc in items]
    dir_len = len(_encode_directory(entries))
    meta_off = HEADER_SIZE + dir_len
    offset = _align(meta_off + len(meta_bytes))
    for e in entries:
        e.offset = offset
        offset = _align(offset + e.length)
    directory = _encode_directory(entries)
    assert len(directory) == dir_len

    header = _HEADER.pack(MAGIC, VERSION, 0, len(entries), HEADER_SIZE, dir_len, meta_off, len(meta_bytes))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(header.ljust(HEADER_SIZE, b"\0"))
        f.write(directory)
        f.write(meta_bytes)
        for e, (_, _, _, data, _) in zip(entries, items):
            f.write(b"\0" * (e.offset - f.tell()))
            f.write(data)
    os.replace(tmp, path)
    return read_directory(path)


# --------------------------------------------------------------------------
# stores
# --------------------------------------------------------------------------


def _charge(meter, tag, nbytes):
    if meter is not None and nbytes:
        meter.charge(tag, nbytes)


class TensorStore:
    """Read-only, memory-mapped view of a model file.

    Safe for concurrent reads; every fetch copies the requested bytes out of
    the mapping and widens floats to f32.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.directory = read_directory(self.path)
        end = max((e.offset + e.length for e in self.directory.entries.values()), default=0)
        if end > self.directory.file_size:
            raise TruncatedFileError(f"{self.path} is truncated: need {end} bytes, have {self.directory.file_size}")
        self._mm = np.memmap(self.path, dtype=np.uint8, mode="r") if self.directory.file_size else None
        self.config = ModelConfig.from_dict(self.directory.meta["config"])
        self.meta = self.directory.meta

    def __contains__(self, name):
        return name in self.directory

    def names(self) -> list[str]:
        return list(self.directory.entries)

    def primary_names(self) -> list[str]:
        """Tensor names excluding companion scales (fetched with their owner)."""
        companions = {e.scale for e in self.directory.entries.values() if e.scale}
        return [n for n in self.directory.entries if n not in companions]

    def shape(self, name) -> tuple[int, ...]:
        return self.directory[name].shape

    def nbytes(self, name) -> int:
        """Stored bytes of a tensor, including its companion scale."""
        e = self.directory[name]
        return e.length + (self.directory[e.scale].length if e.scale else 0)

    def row_nbytes(self, name) -> int:
        return self.directory[name].row_nbytes

    def _raw(self, e: TensorEntry) -> np.ndarray:
        return self._mm[e.offset : e.offset + e.length]

    def _array(self, e: TensorEntry) -> np.ndarray:
        a = self._raw(e).view(_NP_DTYPES[e.dtype]).reshape(e.shape)
        if e.dtype in ("f16", "f32"):
            return a.astype(np.float32)
        return np.array(a)

    def fetch_tensor(self, name, meter: MemoryMeter | None = None, tag: str | None = None):
        e = self.directory[name]
        if e.dtype == "bit1":
            value = QuantTensor1b(
                sign_bits=np.array(self._raw(e)),
                scales=self._array(self.directory[e.scale]),
                rows=e.shape[0],
                cols=e.shape[1],
            )
        elif e.dtype == "i8":
            value = QuantTensorI8(values=self._array(e), scales=self._array(self.directory[e.scale]))
        else:
            value = self._array(e)
        _charge(meter, tag or component_of(name), self.nbytes(name))
        return value

    def fetch_rows(self, name, indices, meter: MemoryMeter | None = None, tag: str | None = None) -> np.ndarray:
        """Gather rows of a 2-D tensor; charges ``len(indices) * row_nbytes``."""
        e = self.directory[name]
        rows = e.row_nbytes
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= e.shape[0]):
            raise IndexError(f"row index out of range for {name} with {e.shape[0]} rows")
        a = self._raw(e).view(_NP_DTYPES[e.dtype]).reshape(e.shape)[idx]
        if e.dtype in ("f16", "f32"):
            a = a.astype(np.float32)
        _charge(meter, tag or component_of(name), idx.size * rows)
        return a


def open_model(path) -> TensorStore:
    return TensorStore(path)


class DictStore:
    """Store interface over an in-memory model; bytes are the arrays' own sizes."""

    def __init__(self, model):
        self.model = model
        self.config = model.config
        self.meta = model.meta

    def __contains__(self, name):
        return name in self.model.tensors

    def names(self) -> list[str]:
        return list(self.model.tensors)

    primary_names = names

    def _get(self, name):
        try:
            return self.model.tensors[name]
        except KeyError:
            raise KeyError(f"tensor {name!r} not in model") from None

    def shape(self, name):
        return tuple(self._get(name).shape)

    def nbytes(self, name) -> int:
        return int(self._get(name).nbytes)

    def row_nbytes(self, name) -> int:
        a = self._get(name)
        return int(a.shape[1] * a.itemsize)

    def fetch_tensor(self, name, meter=None, tag=None):
        value = self._get(name)
        _charge(meter, tag or component_of(name), self.nbytes(name))
        return value

    def fetch_rows(self, name, indices, meter=None, tag=None):
        a = self._get(name)
        idx = np.asarray(indices, dtype=np.int64).ravel()
        _charge(meter, tag or component_of(name), idx.size * self.row_nbytes(name))
        return a[idx]


def as_store(model_or_store):
    if hasattr(model_or_store, "fetch_rows"):
        return model_or_store
    return DictStore(model_or_store)


# --------------------------------------------------------------------------
# analytic accounting and reports
# --------------------------------------------------------------------------


def analytic_component_bytes(config: ModelConfig, meta: dict, float_bytes: int = 2) -> dict[str, int]:
    """Stored bytes per component predicted from the config and build flags alone."""
    D, F, V, L = config.dim, config.ffn_dim, config.vocab, config.n_layers
    out = dict.fromkeys(COMPONENTS, 0)
    comp = meta.get("compression") or {}
    targets = set(comp.get("targets", ()))
    rank = comp.get("rank", config.rank)
    enhanced = comp.get("enhanced", False)

    def square(target):
        if target in targets:
            return 2 * D * rank + (D if enhanced else 0)
        return D * D

    out["embedding"] = V * D * float_bytes
    tm = 2 * D + 4 * D + 2 * D + 2 * D + D * D  # ln1, mixes, decay+bonus, groupnorm, W_o
    tm += sum(square(t) for t in ("tm_r", "tm_k", "tm_v", "tm_g"))
    cm = 2 * D + 2 * D + square("cm_r") + 2 * F * D
    out["time-mix"] = (L * tm + 2 * D) * float_bytes  # + ln0 in block 0
    out["channel-mix"] = L * cm * float_bytes
    out["head"] = (V * D + 2 * D) * float_bytes
    for layer in meta.get("predictor_layers", ()):
        h = meta["predictor_hidden"][str(layer)]
        out["predictor"] += (D * h + h * F) * float_bytes + (D * F + 7) // 8 + 4 * D
    hh = meta.get("hier_head")
    if hh:
        out["head"] += hh["n_clusters"] * D * float_bytes + 4 * V + V * D * float_bytes
    return out


def memory_report(meter: MemoryMeter, store=None) -> dict:
    """Per-component peak bytes and totals; with a file store, also the
    directory's byte lengths and the analytic cross-check against them."""
    snap = meter.snapshot()
    report = {
        "components": snap["peak"],
        "total": sum(snap["peak"].values()),
        "peak_concurrent": snap["total_peak"],
        "block_peak": snap["block_peak"],
        "fetched": snap["fetched"],
    }
    if isinstance(store, TensorStore):
        directory = store.directory.component_bytes()
        analytic = analytic_component_bytes(store.config, store.meta, float_bytes=_float_bytes(store))
        report["directory"] = directory
        report["analytic"] = analytic
        report["analytic_matches"] = directory == analytic
        report["alignment_padding"] = store.directory.padding_bytes()
    return report


def _float_bytes(store: TensorStore) -> int:
    return 4 if store.directory["emb"].dtype == "f32" else 2


def tensors_in(store, names: Iterable[str]) -> int:
    return sum(store.nbytes(n) for n in names)


def float_dtype_of(store: TensorStore) -> str:
    return store.directory["emb"].dtype


def load_model(path):
    """Read every tensor of a model file into an in-memory model (floats widened to f32)."""
    from .rwkv_core import RwkvModel

    store = TensorStore(path)
    tensors = {n: store.fetch_tensor(n) for n in store.primary_names()}
    meta = {k: v for k, v in store.meta.items() if k != "config"}
    return RwkvModel(config=store.config, tensors=tensors, meta=meta)
