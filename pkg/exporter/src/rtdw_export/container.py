"""Stand-alone RTDW container writer.

RTDW layout: magic b"RTDW", u32 LE format version, u64 LE manifest byte
length, UTF-8 JSON manifest (array of {name, dtype, shape, offset}), then a
contiguous little-endian float32 payload. Model configuration travels as
the reserved nine-scalar tensor "model_config":
(num_layers, hidden, heads, intermediate, vocab_size, max_positions,
embedding_size, head_role code, pad_id), role code 0 = discriminator,
1 = generator.

Writing is byte-deterministic: tensors are emitted in sorted name order
with a compact, key-sorted JSON manifest.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"RTDW"
FORMAT_VERSION = 1
CONFIG_TENSOR = "model_config"
ROLE_DISCRIMINATOR = 0
ROLE_GENERATOR = 1


class ExportError(ValueError):
    pass


def config_tensor(num_layers: int, hidden: int, heads: int, intermediate: int,
                  vocab_size: int, max_positions: int, embedding_size: int,
                  role_code: int, pad_id: int) -> np.ndarray:
    return np.asarray([num_layers, hidden, heads, intermediate, vocab_size,
                       max_positions, embedding_size, role_code, pad_id],
                      dtype=np.float32)


def write_container(tensors: dict, path) -> None:
    """Serialize named float tensors (the config tensor included) to RTDW."""
    if CONFIG_TENSOR not in tensors:
        raise ExportError(f"container needs the {CONFIG_TENSOR!r} tensor")
    manifest = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.issubdtype(arr.dtype, np.floating):
            raise ExportError(f"tensor {name!r} has non-float dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "dtype": "f32",
                         "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))
