"""
Weight checkpoint container

Layout (all integers little-endian u32):
    b"PVTC19D1" | count | count x (name_len | utf-8 name | rank | extents... | f32 payload)
"""
import struct
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from tensor import Tensor

MAGIC = b"PVTC19D1"
_U32 = struct.Struct("<I")


class CheckpointFormatError(ValueError):
    """File is not a well-formed PVTC19D1 checkpoint"""


def save_checkpoint(path: Union[str, Path], params: Mapping[str, Union[Tensor, np.ndarray]]) -> Path:
    path = Path(path)
    chunks = [MAGIC, _U32.pack(len(params))]
    for name, value in params.items():
        array = value.data if isinstance(value, Tensor) else np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read every record back, in file order, as float32 arrays"""
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    offset = len(MAGIC)

    def read_u32() -> int:
        nonlocal offset
        if offset + 4 > len(blob):
            raise CheckpointFormatError(f"{path}: truncated at byte {offset}")
        (value,) = _U32.unpack_from(blob, offset)
        offset += 4
        return value

    def read_bytes(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated at byte {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    params = {}
    for _ in range(read_u32()):
        try:
            name = read_bytes(read_u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"{path}: parameter name is not UTF-8 ({e})") from e
        shape = tuple(read_u32() for _ in range(read_u32()))
        count = int(np.prod(shape, dtype=np.int64))
        payload = read_bytes(4 * count)
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if offset != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - offset} trailing bytes after last record")
    return params
