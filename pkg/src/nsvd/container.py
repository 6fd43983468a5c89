"""Bit-exact binary tensor container.

Byte layout (little-endian throughout):

    magic "NSVD" | version u32 | entry-count u32
    per entry: name-length u16 | name bytes (UTF-8) | dtype u8 | ndim u8 |
               dims u64 each | raw row-major data

dtype byte: 0 = f32, 2 = f64 (1 is reserved and rejected).  Reading then
writing a container reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"NSVD"
VERSION = 1

_DTYPE_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 2}
_CODE_DTYPE = {0: np.dtype("<f4"), 2: np.dtype("<f8")}

#: reserved entry name holding compressed-model metadata as padded JSON
META_ENTRY = "__meta__"


@dataclass
class TensorEntry:
    name: str
    data: np.ndarray  # little-endian f32 or f64, C order

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class TensorContainer:
    version: int = VERSION
    entries: list[TensorEntry] = field(default_factory=list)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.data
        raise KeyError(name)

    def get_f64(self, name: str) -> np.ndarray:
        """Fetch an entry upcast to float64 for computation."""
        return np.ascontiguousarray(self.get(name), dtype=np.float64)

    def add(self, name: str, data: np.ndarray) -> "TensorEntry":
        if name in self.names():
            raise FormatError(f"duplicate entry name {name!r}")
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _DTYPE_CODE:
            arr = np.ascontiguousarray(arr, dtype="<f8")
        entry = TensorEntry(name, arr)
        self.entries.append(entry)
        return entry


def write_container(path, container: TensorContainer) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", container.version))
        fh.write(struct.pack("<I", len(container.entries)))
        for entry in container.entries:
            name = entry.name.encode("utf-8")
            arr = np.ascontiguousarray(entry.data)
            code = _DTYPE_CODE[arr.dtype.newbyteorder("<")]
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_container(path) -> TensorContainer:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"truncated file reading {what}: expected {n} bytes, "
                f"got {len(blob) - off}", offset=off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", offset=0)
    version = struct.unpack("<I", take(4, "version"))[0]
    count = struct.unpack("<I", take(4, "entry count"))[0]
    container = TensorContainer(version=version)
    seen: set[str] = set()
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        if name in seen:
            raise FormatError(f"duplicate entry name {name!r}", offset=off)
        seen.add(name)
        code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if code not in _CODE_DTYPE:
            raise FormatError(f"invalid dtype byte {code}", offset=off - 2)
        dims = tuple(struct.unpack("<Q", take(8, "dim"))[0] for _ in range(ndim))
        dtype = _CODE_DTYPE[code]
        nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
        raw = take(nbytes, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        container.entries.append(TensorEntry(name, arr))
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last entry",
                          offset=off)
    return container


# --- compressed model files -------------------------------------------------

def _pack_meta(meta: dict) -> np.ndarray:
    """Encode metadata JSON as a 1-D f64 entry (UTF-8, space padded to a
    multiple of 8 bytes) so it travels inside the container format."""
    raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return np.frombuffer(raw, dtype="<f8").copy()


def _unpack_meta(arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes().rstrip(b" ")
    return json.loads(raw.decode("utf-8"))


def write_compressed_model(path, layers: dict, extra_meta: dict | None = None) -> None:
    """Write {layer_name: CompressedLayer} with per-layer metadata records."""
    container = TensorContainer()
    records = {}
    for name in sorted(layers):
        layer = layers[name]
        container.add(f"{name}.w1", layer.stage1.w)
        container.add(f"{name}.z1", layer.stage1.z)
        if layer.stage2 is not None:
            container.add(f"{name}.w2", layer.stage2.w)
            container.add(f"{name}.z2", layer.stage2.z)
        records[name] = {
            "method": layer.method,
            "m": layer.original_rows,
            "n": layer.original_cols,
            "ratio": layer.budget.ratio,
            "split": layer.budget.split,
            "k1": layer.budget.k1,
            "k2": layer.budget.k2,
            "whitener_fingerprint": layer.whitener_fingerprint,
        }
    meta = {"layers": records}
    if extra_meta:
        meta.update(extra_meta)
    container.add(META_ENTRY, _pack_meta(meta))
    write_container(path, container)


def read_compressed_model(path):
    """Read a compressed model file back into {layer_name: CompressedLayer}.

    Validates that every metadata record references existing factor tensors.
    """
    from .compress import CompressedLayer, FactorPair, RankBudget

    container = read_container(path)
    try:
        meta = _unpack_meta(container.get(META_ENTRY))
    except KeyError:
        raise FormatError("missing metadata entry") from None
    layers = {}
    for name, rec in meta["layers"].items():
        try:
            w1 = container.get_f64(f"{name}.w1")
            z1 = container.get_f64(f"{name}.z1")
        except KeyError as exc:
            raise FormatError(
                f"metadata references missing factor tensor {exc.args[0]!r}") from None
        stage2 = None
        if rec["k2"] > 0:
            try:
                w2 = container.get_f64(f"{name}.w2")
                z2 = container.get_f64(f"{name}.z2")
            except KeyError as exc:
                raise FormatError(
                    f"metadata references missing factor tensor {exc.args[0]!r}") from None
            stage2 = FactorPair(w=w2, z=z2)
        budget = RankBudget(ratio=rec["ratio"], k=rec["k1"] + rec["k2"],
                            split=rec["split"], k1=rec["k1"], k2=rec["k2"])
        layers[name] = CompressedLayer(
            method=rec["method"], original_rows=rec["m"], original_cols=rec["n"],
            budget=budget, stage1=FactorPair(w=w1, z=z1), stage2=stage2,
            whitener_fingerprint=rec["whitener_fingerprint"])
    return layers, meta
