"""Named, shape-tagged parameter storage and the on-disk checkpoint format.

A checkpoint is a directory with `meta.json` (run metadata plus an index
mapping parameter name -> {shape, dtype, byte_offset, frozen}) and
`params.bin` holding little-endian float32 values concatenated in index
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .errors import IoFailure, ShapeMismatch


@dataclass
class ParamEntry:
    value: np.ndarray
    trainable: bool = True


class ParamStore:
    """Ordered map from parameter name to a shape-tagged array.

    Shapes are fixed at insertion; entries flagged trainable=False must stay
    bit-identical across optimizer steps (the optimizer skips them).
    """

    def __init__(self):
        self._entries: Dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._entries:
            raise ShapeMismatch(f"duplicate parameter name {name!r}")
        self._entries[name] = ParamEntry(np.ascontiguousarray(value), trainable)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self) -> List[str]:
        return list(self._entries.keys())

    def items(self) -> Iterator[Tuple[str, ParamEntry]]:
        return iter(self._entries.items())

    def trainable_names(self) -> List[str]:
        return [n for n, e in self._entries.items() if e.trainable]

    def set_value(self, name: str, value: np.ndarray) -> None:
        e = self._entries[name]
        value = np.asarray(value)
        if value.shape != e.value.shape:
            raise ShapeMismatch(f"{name}: shape {value.shape} != declared {e.value.shape}")
        e.value = np.ascontiguousarray(value)

    def freeze_all(self) -> None:
        for e in self._entries.values():
            e.trainable = False

    def unfreeze_all(self) -> None:
        for e in self._entries.values():
            e.trainable = True

    def remove(self, name: str) -> None:
        del self._entries[name]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, e in self._entries.items():
            out.add(n, e.value.copy(), e.trainable)
        return out

    def subset(self, names: Iterable[str]) -> "ParamStore":
        """View over a subset of entries; arrays are shared, not copied."""
        out = ParamStore()
        for n in names:
            e = self._entries[n]
            out._entries[n] = e
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for n, e in self._entries.items():
            out.add(n, e.value.astype(dtype), e.trainable)
        return out

    def num_scalars(self) -> int:
        return sum(e.value.size for e in self._entries.values())

    def to_bytes(self) -> bytes:
        """Concatenated little-endian float32 bytes in insertion order."""
        return b"".join(
            np.ascontiguousarray(e.value, dtype="<f4").tobytes() for e in self._entries.values()
        )

    def same_shapes(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(self[n].shape == other[n].shape for n in self.names())


def save_checkpoint(store: ParamStore, directory, meta: Optional[dict] = None) -> Path:
    """Write meta.json + params.bin under `directory` and return its path."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        offset = 0
        blobs = []
        for name, e in store.items():
            data = np.ascontiguousarray(e.value, dtype="<f4").tobytes()
            index[name] = {
                "shape": list(e.value.shape),
                "dtype": "float32",
                "byte_offset": offset,
                "frozen": not e.trainable,
            }
            blobs.append(data)
            offset += len(data)
        doc = dict(meta or {})
        doc["index"] = index
        # Key order is meaningful: the index doubles as the params.bin layout.
        with open(directory / "meta.json", "w") as fh:
            json.dump(doc, fh, indent=2)
        with open(directory / "params.bin", "wb") as fh:
            fh.write(b"".join(blobs))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {directory}: {exc}") from exc
    return directory


def load_checkpoint(directory) -> Tuple[ParamStore, dict]:
    """Read a checkpoint directory back into (ParamStore, meta dict)."""
    directory = Path(directory)
    try:
        with open(directory / "meta.json") as fh:
            meta = json.load(fh)
        blob = (directory / "params.bin").read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {directory}: {exc}") from exc
    store = ParamStore()
    for name, info in meta["index"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        store.add(name, arr.astype(np.float32), trainable=not info["frozen"])
    return store, meta
