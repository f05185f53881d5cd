"""Standalone AAFM writer.

Implements the byte format directly rather than importing the consumer
package, the same way a non-Python exporter would: magic ``AAFM``,
version u32 LE = 1, W, H, C u32 LE, then W*H*C float32 LE values in
h-major, then w, then c order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"AAFM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def feature_map_bytes(data: np.ndarray) -> bytes:
    """Serialize an (H, W, C) float32 array; refuses NaN/Inf and empty dims."""
    a = np.ascontiguousarray(data, dtype="<f4")
    if a.ndim != 3 or min(a.shape) < 1:
        raise ValueError(f"feature map must be (H, W, C) with positive dims, got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("feature map contains NaN or Inf")
    h, w, c = a.shape
    return _HEADER.pack(MAGIC, VERSION, w, h, c) + a.tobytes()


def write_feature_map(data: np.ndarray, path: Union[str, Path]) -> None:
    Path(path).write_bytes(feature_map_bytes(data))


def manifest_line(image_id: str, rel_path: str, role: str) -> str:
    for field in (image_id, rel_path):
        if "\t" in field or "\n" in field:
            raise ValueError(f"manifest field contains separator: {field!r}")
    if role not in ("database", "query"):
        raise ValueError(f"unknown role {role!r}")
    return f"{image_id}\t{rel_path}\t{role}"
