"""Self-describing binary tensor container for clip features.

Layout: magic 'VMRT', u32 version, u32 ndim, ndim u64 dims, then row-major
little-endian float32 data. The fixed header makes files mmap-friendly.
"""

import os

import numpy as np

MAGIC = b"VMRT"
VERSION = 1


def write_tensor(path, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint32(arr.ndim).tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.tobytes())


def read_tensor(path, mmap: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12 or header[:4] != MAGIC:
            raise ValueError(f"{path} is not a VMRT tensor file")
        version = int(np.frombuffer(header, dtype="<u4", offset=4, count=1)[0])
        if version != VERSION:
            raise ValueError(f"unsupported VMRT version {version}")
        ndim = int(np.frombuffer(header, dtype="<u4", offset=8, count=1)[0])
        shape = tuple(np.frombuffer(fh.read(8 * ndim), dtype="<u8").astype(int))
        offset = fh.tell()
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=shape)
    with open(path, "rb") as fh:
        fh.seek(offset)
        data = np.frombuffer(fh.read(), dtype="<f4", count=int(np.prod(shape)))
    return data.reshape(shape).copy()


def write_split_features(split, features_dir):
    os.makedirs(features_dir, exist_ok=True)
    for s in split.samples:
        if s.clip_features is None:
            raise ValueError(f"video {s.video_id} has no features to write")
        write_tensor(os.path.join(features_dir, f"{s.video_id}.vmrt"), s.clip_features)


def attach_features(split, features_dir, mmap: bool = False):
    """Load per-video feature tensors named <video_id>.vmrt into the split."""
    for s in split.samples:
        path = os.path.join(features_dir, f"{s.video_id}.vmrt")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing feature file for video {s.video_id}: {path}")
        s.clip_features = read_tensor(path, mmap=mmap)
    return split
