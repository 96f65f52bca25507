"""Little-endian binary artifact formats.

Five formats share the same conventions: a 4-byte magic, explicit sizes,
and float32 payloads. Readers parse from an in-memory buffer and report
the exact byte offset of any malformation instead of crashing.

  SEDF  feature cache      header + channels*frames*bins f32
  SEDN  normalization      per-channel mean/std f64
  SEDM  model checkpoint   JSON config block + named f32 tensors
                           + epoch/step/scores metadata + CRC32
  SEDE  embedding file     frames x dim f32
  SEDS  score file         concatenated per-clip 250xC f32 records
"""

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FileFormatError
from .features import FeatureTensor, NormStats

FORMAT_VERSION = 1

MAGIC_FEATURES = b"SEDF"
MAGIC_STATS = b"SEDN"
MAGIC_MODEL = b"SEDM"
MAGIC_EMBEDDING = b"SEDE"
MAGIC_SCORES = b"SEDS"

_MAX_DIM = 1 << 31


class _Cursor:
    """Sequential reader over bytes that tracks its offset for diagnostics."""

    def __init__(self, data, path):
        self.data = data
        self.path = str(path)
        self.offset = 0

    def fail(self, message):
        raise FileFormatError(self.path, self.offset, message)

    def take(self, n, what):
        if n < 0 or self.offset + n > len(self.data):
            self.fail(f"truncated while reading {what}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def u8(self, what):
        return self.unpack("<B", what)[0]

    def u16(self, what):
        return self.unpack("<H", what)[0]

    def u32(self, what):
        return self.unpack("<I", what)[0]

    def u64(self, what):
        return self.unpack("<Q", what)[0]

    def floats(self, count, dtype, what):
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, what)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)

    def expect_magic(self, magic, kind):
        got = self.take(4, f"{kind} magic")
        if got != magic:
            self.offset -= 4
            self.fail(f"bad magic {bytes(got)!r}, expected {magic!r} ({kind})")

    def expect_version(self, kind):
        version = self.u16(f"{kind} version")
        if version != FORMAT_VERSION:
            self.offset -= 2
            self.fail(f"unsupported {kind} version {version}")

    @property
    def at_end(self):
        return self.offset >= len(self.data)


def _read_file(path):
    with open(path, "rb") as fh:
        return fh.read()


def _check_dim(cursor, value, what):
    if value == 0 or value > _MAX_DIM:
        cursor.fail(f"implausible {what} = {value}")
    return value


# ---------------------------------------------------------------- features

def write_feature_cache(path, tensor: FeatureTensor):
    """Serialize one FeatureTensor; the round trip is bit-exact."""
    data = np.ascontiguousarray(tensor.data, dtype=np.float32)
    ch, fr, bins = data.shape
    blob = bytearray()
    blob += MAGIC_FEATURES
    blob += struct.pack("<HIIIB", FORMAT_VERSION, ch, fr, bins,
                        1 if tensor.normalized else 0)
    blob += data.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_feature_cache(path) -> FeatureTensor:
    cur = _Cursor(_read_file(path), path)
    cur.expect_magic(MAGIC_FEATURES, "feature cache")
    cur.expect_version("feature cache")
    ch = _check_dim(cur, cur.u32("channel count"), "channel count")
    fr = _check_dim(cur, cur.u32("frame count"), "frame count")
    bins = _check_dim(cur, cur.u32("bin count"), "bin count")
    normalized = cur.u8("normalized flag")
    if normalized > 1:
        cur.offset -= 1
        cur.fail(f"normalized flag must be 0 or 1, got {normalized}")
    values = cur.floats(ch * fr * bins, np.float32, "feature data")
    if not cur.at_end:
        cur.fail("trailing bytes after feature data")
    return FeatureTensor(data=values.reshape(ch, fr, bins),
                         normalized=bool(normalized))


# ------------------------------------------------------------------- stats

def write_norm_stats(path, stats: NormStats):
    ch = len(stats.mean)
    blob = bytearray()
    blob += MAGIC_STATS
    blob += struct.pack("<HI", FORMAT_VERSION, ch)
    blob += np.asarray(stats.mean, dtype="<f8").tobytes()
    blob += np.asarray(stats.std, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_norm_stats(path) -> NormStats:
    cur = _Cursor(_read_file(path), path)
    cur.expect_magic(MAGIC_STATS, "norm stats")
    cur.expect_version("norm stats")
    ch = _check_dim(cur, cur.u32("channel count"), "channel count")
    mean = cur.floats(ch, np.float64, "channel means")
    std = cur.floats(ch, np.float64, "channel stds")
    if not cur.at_end:
        cur.fail("trailing bytes after stats")
    if np.any(std <= 0):
        cur.fail("std entries must be positive")
    return NormStats(mean=mean, std=std)


# -------------------------------------------------------------- embeddings

def write_embeddings(path, array):
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {arr.shape}")
    blob = bytearray()
    blob += MAGIC_EMBEDDING
    blob += struct.pack("<II", arr.shape[0], arr.shape[1])
    blob += arr.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_embeddings(path):
    cur = _Cursor(_read_file(path), path)
    cur.expect_magic(MAGIC_EMBEDDING, "embedding file")
    frames = _check_dim(cur, cur.u32("frame count"), "frame count")
    dim = _check_dim(cur, cur.u32("embedding dim"), "embedding dim")
    values = cur.floats(frames * dim, np.float32, "embedding data")
    if not cur.at_end:
        cur.fail("trailing bytes after embedding data")
    return values.reshape(frames, dim)


# ------------------------------------------------------------------ scores

def write_scores(path, records):
    """Write (clip_id, frames x classes array) records, concatenated."""
    blob = bytearray()
    for clip_id, scores in records:
        arr = np.ascontiguousarray(scores, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"scores for {clip_id!r} must be 2-D")
        cid = str(clip_id).encode("utf-8")
        blob += MAGIC_SCORES
        blob += struct.pack("<H", len(cid))
        blob += cid
        blob += struct.pack("<II", arr.shape[0], arr.shape[1])
        blob += arr.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_scores(path):
    """Read a score file back as a list of (clip_id, array) records."""
    cur = _Cursor(_read_file(path), path)
    records = []
    while not cur.at_end:
        cur.expect_magic(MAGIC_SCORES, "score record")
        name_len = cur.u16("clip id length")
        try:
            clip_id = cur.take(name_len, "clip id").decode("utf-8")
        except UnicodeDecodeError:
            cur.fail("clip id is not valid UTF-8")
        frames = _check_dim(cur, cur.u32("frame count"), "frame count")
        classes = _check_dim(cur, cur.u32("class count"), "class count")
        values = cur.floats(frames * classes, np.float32, f"scores for {clip_id!r}")
        records.append((clip_id, values.reshape(frames, classes)))
    return records


# ------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """Parsed SEDM file: config dict, named tensors, and run metadata."""

    config: dict
    tensors: dict
    epoch: int
    step: int
    scores: tuple


def write_checkpoint(path, config, tensors, epoch=0, step=0, scores=()):
    """Write config, named f32 tensors, metadata, and a trailing CRC32.

    Tensor names are written in sorted order so identical state produces
    identical bytes.
    """
    blob = bytearray()
    blob += MAGIC_MODEL
    blob += struct.pack("<H", FORMAT_VERSION)
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    names = sorted(tensors)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f4").tobytes()
    blob += struct.pack("<IQ", int(epoch), int(step))
    blob += struct.pack("<I", len(scores))
    blob += np.asarray(scores, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_checkpoint(path) -> Checkpoint:
    data = _read_file(path)
    cur = _Cursor(data, path)
    if len(data) < 4:
        cur.fail("file shorter than a checksum")
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        cur.offset = len(data) - 4
        cur.fail(f"checksum mismatch (stored {stored:#010x}, computed {actual:#010x})")

    cur.expect_magic(MAGIC_MODEL, "checkpoint")
    cur.expect_version("checkpoint")
    cfg_len = cur.u32("config length")
    try:
        config = json.loads(cur.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        cur.fail("config block is not valid JSON")
    n_tensors = cur.u32("tensor count")
    tensors = {}
    for _ in range(n_tensors):
        name_len = cur.u16("tensor name length")
        try:
            name = cur.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            cur.fail("tensor name is not valid UTF-8")
        rank = cur.u8(f"rank of {name!r}")
        dims = tuple(_check_dim(cur, cur.u32(f"dim of {name!r}"), f"dim of {name!r}")
                     for _ in range(rank))
        count = 1
        for dim in dims:
            count *= dim
        tensors[name] = cur.floats(count, np.float32, f"data of {name!r}").reshape(dims)
    epoch = cur.u32("epoch")
    step = cur.u64("step")
    n_scores = cur.u32("score count")
    scores = tuple(cur.floats(n_scores, np.float64, "validation scores"))
    if cur.offset != len(data) - 4:
        cur.fail("trailing bytes before checksum")
    return Checkpoint(config=config, tensors=tensors, epoch=epoch, step=step,
                      scores=scores)
