"""Event records, canonical event streams and the EBS1 binary format.

Binary layout (little endian): magic ``EBS1``, u32 width, u32 height,
u64 count, then 16-byte records ``u16 x, u16 y, u8 polarity (1 positive,
0 negative), 3 zero bytes, u64 t_us``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, EbsTrackError, TruncatedRecord
from .io_util import atomic_write_bytes

MAGIC = b"EBS1"
HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4"), ("count", "<u8")])
RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3"), ("t", "<u8")])
assert HEADER.itemsize == 20 and RECORD.itemsize == 16


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    polarity: int
    t: int


class EventStream:
    """Columnar event stream: x, y (int), p (+1/-1), t (int microseconds)."""

    def __init__(self, x, y, p, t, width, height, canonical=True):
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.p = np.asarray(p, dtype=np.int8)
        self.t = np.asarray(t, dtype=np.int64)
        self.width = int(width)
        self.height = int(height)
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ValueError("event columns differ in length")
        if canonical:
            self.sort()

    @classmethod
    def empty(cls, width, height):
        z = np.zeros(0)
        return cls(z, z, z, z, width, height)

    @classmethod
    def concatenate(cls, streams, width=None, height=None):
        streams = list(streams)
        if width is None:
            width, height = streams[0].width, streams[0].height
        return cls(np.concatenate([s.x for s in streams]), np.concatenate([s.y for s in streams]),
                   np.concatenate([s.p for s in streams]), np.concatenate([s.t for s in streams]),
                   width, height)

    def sort(self):
        order = np.lexsort((self.p, self.x, self.y, self.t))
        self.x, self.y, self.p, self.t = self.x[order], self.y[order], self.p[order], self.t[order]

    def __len__(self):
        return int(self.t.size)

    def __iter__(self):
        for i in range(len(self)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.p[i]), int(self.t[i]))

    def __getitem__(self, sl):
        if isinstance(sl, (int, np.integer)):
            i = int(sl)
            return Event(int(self.x[i]), int(self.y[i]), int(self.p[i]), int(self.t[i]))
        return EventStream(self.x[sl], self.y[sl], self.p[sl], self.t[sl], self.width,
                           self.height, canonical=False)

    @property
    def duration_us(self):
        return int(self.t[-1] - self.t[0]) if len(self) else 0

    def positives(self):
        return self[self.p > 0]

    def time_slice(self, t0, t1):
        lo, hi = np.searchsorted(self.t, [t0, t1], side="left")
        return self[lo:hi]

    def validate(self):
        if len(self) and np.any(np.diff(self.t) < 0):
            raise EbsTrackError("timestamps decrease")
        if np.any((self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)):
            raise EbsTrackError("event coordinates out of range")
        if np.any((self.p != 1) & (self.p != -1)):
            raise EbsTrackError("polarity must be +1 or -1")
        if len(self) and self.t[0] < 0:
            raise EbsTrackError("negative timestamp")

    def equals(self, other):
        return (self.width == other.width and self.height == other.height
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.p, other.p) and np.array_equal(self.t, other.t))


def encode_events(stream):
    head = np.zeros(1, HEADER)
    head["magic"] = MAGIC
    head["width"] = stream.width
    head["height"] = stream.height
    head["count"] = len(stream)
    return head.tobytes() + _records(stream).tobytes()


def decode_events(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not an EBS1 event file")
    if len(buf) < HEADER.itemsize:
        raise TruncatedRecord(-1)
    head = np.frombuffer(buf, HEADER, count=1)[0]
    count = int(head["count"])
    body = len(buf) - HEADER.itemsize
    whole = body // RECORD.itemsize
    if whole < count:
        raise TruncatedRecord(whole - 1)
    if body != count * RECORD.itemsize:
        raise EbsTrackError(f"{body - count * RECORD.itemsize} trailing bytes after {count} records")
    rec = np.frombuffer(buf, RECORD, count=count, offset=HEADER.itemsize)
    p = np.where(rec["p"] == 1, 1, -1).astype(np.int8)
    if np.any(rec["p"] > 1):
        raise EbsTrackError("invalid polarity byte")
    return EventStream(rec["x"].astype(np.int32), rec["y"].astype(np.int32), p,
                       rec["t"].astype(np.int64), int(head["width"]), int(head["height"]),
                       canonical=False)


def write_events(stream, path):
    atomic_write_bytes(path, encode_events(stream))


def read_events(path):
    with open(path, "rb") as fh:
        return decode_events(fh.read())


def _records(stream):
    stream.validate()
    rec = np.zeros(len(stream), RECORD)
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = (stream.p > 0).astype(np.uint8)
    rec["t"] = stream.t
    return rec


class EventWriter:
    """Append canonical segments to an EBS1 file; renamed into place on close."""

    def __init__(self, path, width, height):
        import os
        import tempfile

        self.path = os.fspath(path)
        self.width, self.height = int(width), int(height)
        d = os.path.dirname(os.path.abspath(self.path))
        fd, self._tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(self.path))
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(b"\0" * HEADER.itemsize)
        self.count = 0
        self._last_t = None

    def write(self, stream):
        if (stream.width, stream.height) != (self.width, self.height):
            raise EbsTrackError("segment sensor size differs from the file")
        if len(stream) == 0:
            return
        if self._last_t is not None and stream.t[0] < self._last_t:
            raise EbsTrackError("segments must be appended in time order")
        self._fh.write(_records(stream).tobytes())
        self.count += len(stream)
        self._last_t = int(stream.t[-1])

    def close(self):
        import os

        head = np.zeros(1, HEADER)
        head["magic"] = MAGIC
        head["width"] = self.width
        head["height"] = self.height
        head["count"] = self.count
        self._fh.seek(0)
        self._fh.write(head.tobytes())
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self):
        import os

        self._fh.close()
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def iter_events(path, chunk=4_000_000):
    """Yield the file's events as consecutive EventStream chunks (memory mapped)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic != MAGIC:
        raise BadMagic("not an EBS1 event file")
    import os

    size = os.path.getsize(path)
    if size < HEADER.itemsize:
        raise TruncatedRecord(-1)
    head = np.fromfile(path, HEADER, count=1)[0]
    count = int(head["count"])
    body = size - HEADER.itemsize
    whole = body // RECORD.itemsize
    if whole < count:
        raise TruncatedRecord(whole - 1)
    if body != count * RECORD.itemsize:
        raise EbsTrackError(f"{body - count * RECORD.itemsize} trailing bytes after {count} records")
    W, H = int(head["width"]), int(head["height"])
    if count == 0:
        return
    rec = np.memmap(path, RECORD, mode="r", offset=HEADER.itemsize, shape=(count,))
    for lo in range(0, count, chunk):
        r = rec[lo:lo + chunk]
        if np.any(r["p"] > 1):
            raise EbsTrackError("invalid polarity byte")
        yield EventStream(r["x"].astype(np.int32), r["y"].astype(np.int32),
                          np.where(r["p"] == 1, 1, -1).astype(np.int8),
                          r["t"].astype(np.int64), W, H, canonical=False)
    del rec
