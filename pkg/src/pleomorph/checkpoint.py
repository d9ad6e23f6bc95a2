"""Checkpoint container.

Layout::

    b"PLEO"                      magic
    uint32 LE                    format version
    uint32 LE                    header length in bytes
    header                       UTF-8 JSON, keys sorted
    payload                      little-endian float32 arrays in manifest order

The header holds the config snapshot and a manifest with one entry per
array: section, name, kind (param or buffer), shape and payload offset.
Any disagreement between header and payload is an integrity error; there
is no migration between versions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"PLEO"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict
    sections: dict = field(default_factory=dict)  # section -> {name: array}
    kinds: dict = field(default_factory=dict)     # (section, name) -> "param" | "buffer"

    def manifest(self) -> list[dict]:
        entries, offset = [], 0
        for section, arrays in self.sections.items():
            for name, arr in arrays.items():
                entries.append({"section": section, "name": name, "kind": self.kinds.get((section, name), "param"),
                                "shape": list(arr.shape), "offset": offset})
                offset += int(np.prod(arr.shape, dtype=np.int64)) * _DTYPE.itemsize
        return entries

    def to_bytes(self) -> bytes:
        manifest = self.manifest()
        payload = b"".join(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
                           for arrays in self.sections.values() for arr in arrays.values())
        header = json.dumps({"config": self.config, "manifest": manifest, "payload_bytes": len(payload)},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload

    def state_dict(self, section: str) -> dict:
        if section not in self.sections:
            raise IntegrityError(f"checkpoint has no section {section!r}")
        return self.sections[section]


def from_modules(config: dict, modules: dict) -> Checkpoint:
    """Snapshot named modules; parameters precede buffers within a section."""
    ckpt = Checkpoint(config)
    for section, module in modules.items():
        arrays = {}
        for name, p in module.named_parameters():
            arrays[name] = np.array(p.data, dtype=_DTYPE)
            ckpt.kinds[(section, name)] = "param"
        for name, b in module.named_buffers():
            arrays[name] = np.array(b, dtype=_DTYPE)
            ckpt.kinds[(section, name)] = "buffer"
        ckpt.sections[section] = arrays
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(ckpt.to_bytes())


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise IntegrityError(f"file is {len(data)} bytes, shorter than the {_PREFIX.size}-byte prefix", offset=len(data))
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version} (expected {VERSION})", offset=4)
    start = _PREFIX.size
    if start + header_len > len(data):
        raise IntegrityError(f"header of {header_len} bytes runs past the end of the file", offset=len(data))
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
        manifest = header["manifest"]
        payload_bytes = int(header["payload_bytes"])
        config = header["config"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"unreadable header: {exc}", offset=start) from None
    base = start + header_len
    payload = data[base:]
    if len(payload) != payload_bytes:
        raise IntegrityError(f"payload is {len(payload)} bytes, header declares {payload_bytes}",
                             offset=base + min(len(payload), payload_bytes))
    ckpt = Checkpoint(config)
    expected = 0
    for entry in manifest:
        try:
            section, name, kind = entry["section"], entry["name"], entry["kind"]
            shape = tuple(int(d) for d in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise IntegrityError(f"malformed manifest entry {entry!r}", offset=start) from None
        qualified = f"{section}.{name}"
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset != expected:
            raise IntegrityError(f"offset {offset} does not follow the previous array (expected {expected})",
                                 offset=base + offset, parameter=qualified)
        if offset + nbytes > len(payload):
            raise IntegrityError(f"shape {list(shape)} needs {nbytes} bytes past the end of the payload",
                                 offset=base + len(payload), parameter=qualified)
        arr = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=offset)
        ckpt.sections.setdefault(section, {})[name] = arr.reshape(shape).astype(np.float32)
        ckpt.kinds[(section, name)] = kind
        expected = offset + nbytes
    if expected != len(payload):
        last = f"{manifest[-1]['section']}.{manifest[-1]['name']}" if manifest else None
        raise IntegrityError(f"manifest covers {expected} of {len(payload)} payload bytes",
                             offset=base + expected, parameter=last)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def restore(module, ckpt: Checkpoint, section: str):
    state = ckpt.state_dict(section)
    expected = dict(module.state_dict())
    missing = [k for k in expected if k not in state]
    extra = [k for k in state if k not in expected]
    if missing or extra:
        raise IntegrityError(f"section {section!r} does not match the network: missing {missing}, unexpected {extra}",
                             parameter=(missing or extra)[0])
    for k, v in expected.items():
        if v.shape != state[k].shape:
            raise IntegrityError(f"shape {state[k].shape} does not match the network's {v.shape}",
                                 parameter=f"{section}.{k}")
    module.load_state_dict({k: state[k] for k in expected})
    return module
