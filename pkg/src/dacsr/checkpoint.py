"""Binary checkpoint container.

Layout: magic ``DACSR1``, a little-endian uint64 header length, a UTF-8 JSON
header, then float32 little-endian payloads at the offsets the header lists.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DACSR1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    kind: str
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    adam_steps: int = 0
    epoch: int = 0
    metric: float | None = None
    format_version: int = FORMAT_VERSION

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        """Parameters under ``prefix`` with the prefix stripped, as torch tensors."""
        return {
            name[len(prefix):]: torch.from_numpy(arr.astype(np.float32))
            for name, arr in self.params.items()
            if name.startswith(prefix)
        }

    def save(self, path: str | Path) -> None:
        blobs: list[tuple[str, np.ndarray]] = list(self.params.items())
        for name, (m, v) in self.moments.items():
            blobs.append((f"adam.m.{name}", m))
            blobs.append((f"adam.v.{name}", v))
        entries = []
        offset = 0
        payload = []
        for name, arr in blobs:
            raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
        header = {
            "format_version": self.format_version,
            "kind": self.kind,
            "config": self.config,
            "adam_steps": self.adam_steps,
            "epoch": self.epoch,
            "metric": self.metric,
            "tensors": entries,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for raw in payload:
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        data = Path(path).read_bytes()
        if data[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(data[start : start + hlen].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        base = start + hlen
        arrays = {}
        for e in header["tensors"]:
            lo = base + e["offset"]
            buf = data[lo : lo + e["nbytes"]]
            if len(buf) != e["nbytes"]:
                raise CheckpointError(f"{path}: truncated payload for {e['name']}")
            arrays[e["name"]] = np.frombuffer(buf, dtype=_LE_F32).reshape(e["shape"]).astype(np.float32)
        params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        moments = {
            k[len("adam.m."):]: (v, arrays["adam.v." + k[len("adam.m."):]])
            for k, v in arrays.items()
            if k.startswith("adam.m.")
        }
        return cls(
            kind=header["kind"],
            params=params,
            config=header["config"],
            moments=moments,
            adam_steps=header["adam_steps"],
            epoch=header["epoch"],
            metric=header["metric"],
            format_version=header["format_version"],
        )
