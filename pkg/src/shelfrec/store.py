"""Reference database of product descriptors with exhaustive K-NN search.

File layout (little endian)::

    b"RDB1" | u32 record_count
    per record:
        u32 len | product_id utf-8 | u32 len | category_id utf-8
        u32 D   | descriptor f32 x D
        u32 L   | L x (x f32, y f32, v f32 x 2, f f32 x D)
"""
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embedder
from .errors import (ConflictError, ContractError, FormatError, IOFailure,
                     NoCandidatesError, ParseError, ValidationError)
from .imaging import read_image

DB_MAGIC = b"RDB1"
UNIT_TOL = 1e-5


@dataclass
class ProductRecord:
    product_id: str
    category_id: str
    descriptor: np.ndarray
    locals: list = field(default_factory=list)
    source_image_path: str = ""


@dataclass
class RankedMatch:
    product_id: str
    distance: float
    rank: int
    score: float = None


@dataclass
class ManifestEntry:
    product_id: str
    category_id: str
    image_path: str


def cosine_distance(x, y):
    """``1 - x . y`` for unit vectors; always in [0, 2].

    Evaluated as ``|x - y|^2 / 2``, which is the same quantity on the unit
    sphere but is exactly zero for identical inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    for name, v in (("x", x), ("y", y)):
        n = np.sqrt(np.dot(v, v))
        if abs(n - 1.0) > UNIT_TOL:
            raise ContractError(f"{name} is not unit norm (|{name}| = {n:.8f})")
    diff = x - y
    return float(min(0.5 * np.dot(diff, diff), 2.0))


class ReferenceDb:
    """Immutable collection of ``ProductRecord``s with a packed descriptor
    matrix for search."""

    def __init__(self, records=()):
        self.records = tuple(records)
        self.by_id = {}
        for r in self.records:
            if r.product_id in self.by_id:
                raise ConflictError(f"duplicate product id {r.product_id!r}")
            self.by_id[r.product_id] = r
        dims = {len(r.descriptor) for r in self.records}
        if len(dims) > 1:
            raise ValidationError(f"mixed descriptor dimensions {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        if self.records:
            self.matrix = np.stack([np.asarray(r.descriptor, dtype=np.float32) for r in self.records])
        else:
            self.matrix = np.zeros((0, 0), dtype=np.float32)
        self._matrix64 = self.matrix.astype(np.float64)
        self.ids = np.array([r.product_id for r in self.records], dtype=object)
        self.categories = np.array([r.category_id for r in self.records], dtype=object)
        # position of each record in lexicographic product_id order, for tie-breaks
        order = sorted(range(len(self.records)), key=lambda i: self.records[i].product_id)
        self._lex_rank = np.empty(len(order), dtype=np.int64)
        self._lex_rank[order] = np.arange(len(order))

    def __len__(self):
        return len(self.records)

    def __getitem__(self, product_id):
        return self.by_id[product_id]

    def knn(self, q, k, category_filter=None):
        return knn(self, q, k, category_filter)


def knn(db, q, k, category_filter=None):
    """Exact K-NN by cosine distance.  Ties are broken by product id."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(db) == 0:
        raise NoCandidatesError("reference database is empty")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (db.dim,):
        raise ValidationError(f"query has shape {q.shape}, database dimension is {db.dim}")
    if abs(np.sqrt(np.dot(q, q)) - 1.0) > UNIT_TOL:
        raise ContractError("query descriptor is not unit norm")
    if category_filter is None:
        idx, diff = np.arange(len(db)), db._matrix64 - q
    else:
        idx = np.flatnonzero(db.categories == category_filter)
        if len(idx) == 0:
            raise NoCandidatesError(f"no products in category {category_filter!r}")
        diff = db._matrix64[idx] - q
    dist = np.minimum(0.5 * np.einsum("ij,ij->i", diff, diff), 2.0)
    k = min(k, len(idx))
    # only rows at or below the k-th distance can rank; keeping every tie at
    # the cut leaves the product-id tie-break intact
    cand = np.flatnonzero(dist <= np.partition(dist, k - 1)[k - 1])
    order = cand[np.lexsort((db._lex_rank[idx[cand]], dist[cand]))][:k]
    return [RankedMatch(product_id=db.records[idx[i]].product_id, distance=float(dist[i]), rank=r)
            for r, i in enumerate(order, start=1)]


def read_manifest(path):
    """Parse a ``product_id,category_id,image_path`` CSV.  A header row is
    optional.  Relative image paths resolve against the manifest directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    seen = set()
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and [c.strip() for c in row] == ["product_id", "category_id", "image_path"]:
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", line=lineno)
        pid, cat, img = (c.strip() for c in row)
        if not pid or not img:
            raise ParseError("empty product_id or image_path", line=lineno)
        if pid in seen:
            raise ConflictError(f"line {lineno}: duplicate product id {pid!r}")
        seen.add(pid)
        img_path = Path(img)
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        entries.append(ManifestEntry(pid, cat, str(img_path)))
    return entries


def build(entries, net, lf_kernel=embedder.LF_KERNEL, lf_stride=embedder.LF_STRIDE, images=None):
    """Describe every reference image and collect the records.

    ``entries`` are ``(product_id, category_id, path)`` triples.  ``images``
    may map product ids to already-loaded arrays, skipping disk reads.
    """
    records = []
    seen = set()
    for entry in entries:
        pid, cat, path = (entry.product_id, entry.category_id, entry.image_path) \
            if isinstance(entry, ManifestEntry) else entry
        if pid in seen:
            raise ConflictError(f"duplicate product id {pid!r}")
        seen.add(pid)
        image = images[pid] if images is not None and pid in images else read_image(path)
        desc, locs = embedder.describe(net, image, lf_kernel, lf_stride)
        records.append(ProductRecord(pid, cat, desc, locs, str(path)))
    return ReferenceDb(records)


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def record_nbytes(record):
    d = len(record.descriptor)
    return (8 + len(record.product_id.encode()) + len(record.category_id.encode())
            + 4 + 4 * d + 4 + len(record.locals) * (16 + 4 * d))


def serialize(db):
    out = [DB_MAGIC, struct.pack("<I", len(db))]
    for r in db.records:
        desc = np.ascontiguousarray(r.descriptor, dtype="<f4")
        out += [_pack_str(r.product_id), _pack_str(r.category_id),
                struct.pack("<I", len(desc)), desc.tobytes(), struct.pack("<I", len(r.locals))]
        for lf in r.locals:
            out.append(np.array([lf.x, lf.y, lf.v[0], lf.v[1]], dtype="<f4").tobytes())
            out.append(np.ascontiguousarray(lf.f, dtype="<f4").tobytes())
    return b"".join(out)


def save(db, path):
    try:
        Path(path).write_bytes(serialize(db))
    except OSError as exc:
        raise IOFailure(f"cannot write database {path}: {exc}") from exc


def deserialize(buf, name="<bytes>"):
    if buf[:4] != DB_MAGIC:
        raise FormatError(f"{name}: bad magic {bytes(buf[:4])!r}, expected {DB_MAGIC!r}", 0)
    off = 4

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(buf):
            raise FormatError(f"{name}: truncated, needed {nbytes} more bytes", off)
        chunk = buf[off:off + nbytes]
        off += nbytes
        return chunk

    def u32():
        return struct.unpack("<I", take(4))[0]

    def text():
        start = off
        raw = take(u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{name}: invalid UTF-8 string", start) from exc

    count = u32()
    records = []
    for _ in range(count):
        pid, cat = text(), text()
        d = u32()
        desc = np.frombuffer(take(4 * d), dtype="<f4").astype(np.float32)
        locs = []
        for _ in range(u32()):
            x, y, vx, vy = np.frombuffer(take(16), dtype="<f4")
            f = np.frombuffer(take(4 * d), dtype="<f4").astype(np.float32)
            locs.append(embedder.LocalFeature(x=float(x), y=float(y), f=f,
                                              v=np.array([vx, vy], dtype=np.float32)))
        records.append(ProductRecord(pid, cat, desc, locs))
    if off != len(buf):
        raise FormatError(f"{name}: {len(buf) - off} trailing bytes after {count} records", off)
    try:
        return ReferenceDb(records)
    except ConflictError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def load(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read database {path}: {exc}") from exc
    return deserialize(buf, str(path))
