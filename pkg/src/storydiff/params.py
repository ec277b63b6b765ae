"""Named parameter collections and their binary checkpoint format.

Checkpoint layout (all integers little-endian):

    u32  format version (currently 1)
    u32  metadata length in bytes
    ...  metadata, canonical JSON (sorted keys); empty allowed
    u64  entry count
    per entry, in lexicographic name order:
        u32  name length, then UTF-8 name bytes
        u32  shape rank, then rank * u64 dims
        float64 values, C order

Writing the same entries twice produces byte-identical files. The
metadata slot carries the model/run configuration so shapes can be
validated on load.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError

FORMAT_VERSION = 1


class ParamStore:
    """Ordered name -> Tensor map with a trainable subset."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: set[str] = set()

    def add(self, name: str, array, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=trainable)
        self._entries[name] = t
        if trainable:
            self._trainable.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        """All entry names, lexicographic."""
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    @property
    def trainable(self) -> set:
        return set(self._trainable)

    def set_trainable(self, names) -> None:
        """Restrict optimisation (and gradient tracking) to these entries."""
        names = set(names)
        unknown = names - set(self._entries)
        if unknown:
            raise ConfigError(f"unknown parameter names: {sorted(unknown)}")
        self._trainable = names
        for key, tensor in self._entries.items():
            tensor.requires_grad = key in names

    def zero_grads(self) -> None:
        for tensor in self._entries.values():
            tensor.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def n_trainable_values(self) -> int:
        return sum(self._entries[n].data.size for n in self._trainable)

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, tensor in self._entries.items():
            out.add(name, tensor.data.copy(), trainable=name in self._trainable)
        return out

    # -- serialization ------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        meta = b""
        if metadata:
            meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
            fh.write(meta)
            fh.write(struct.pack("<Q", len(self._entries)))
            for name in sorted(self._entries):
                # asarray keeps 0-d shapes (ascontiguousarray would promote to 1-d)
                data = np.asarray(self._entries[name].data, dtype="<f8", order="C")
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", data.ndim))
                fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
                fh.write(data.tobytes())

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        store = cls()
        with open(path, "rb") as fh:
            raw = fh.read()
        try:
            version, meta_len = struct.unpack_from("<II", raw, 0)
            if version != FORMAT_VERSION:
                raise DataError(
                    f"checkpoint format version {version}, expected {FORMAT_VERSION}"
                )
            off = 8
            metadata = json.loads(raw[off : off + meta_len]) if meta_len else {}
            off += meta_len
            (count,) = struct.unpack_from("<Q", raw, off)
            off += 8
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", raw, off)
                off += 4
                name = raw[off : off + name_len].decode("utf-8")
                off += name_len
                (rank,) = struct.unpack_from("<I", raw, off)
                off += 4
                shape = struct.unpack_from(f"<{rank}Q", raw, off)
                off += 8 * rank
                n = int(np.prod(shape)) if rank else 1
                values = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
                off += 8 * n
                store.add(name, values.reshape(shape).astype(np.float64))
        except (struct.error, ValueError) as exc:
            raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
        return store, metadata
