"""Region proposals: detection-file I/O, synthetic shelves and a stub detector.

Detections are JSON lines ``{"image", "x", "y", "w", "h", "conf"}`` with a
top-left origin.  Ground truth uses the same schema plus ``product_id``,
``category_id`` and ``mode``.
"""
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedder import augment
from .errors import ConfigError, IOFailure, ParseError, ValidationError
from .imaging import as_image, resize

MODES = ("customer", "management")


@dataclass
class RegionProposal:
    x: float
    y: float
    w: float
    h: float
    confidence: float
    image: str = ""
    clamped: bool = False

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class GtBox:
    x: int
    y: int
    w: int
    h: int
    product_id: str
    category_id: str = ""
    image: str = ""

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class ShelfScene:
    image: np.ndarray
    ground_truth: list
    instances: list
    mode: str = "management"
    name: str = "scene.png"


@dataclass
class DetectorNoise:
    jitter_frac: float = 0.0
    drop_prob: float = 0.0
    fp_rate: float = 0.0


def clamp_box(x, y, w, h, width, height):
    """Clip a box to ``[0, width) x [0, height)``; returns the box and whether
    anything changed.  A box entirely outside keeps at least one pixel."""
    x0 = min(max(x, 0), width - 1)
    y0 = min(max(y, 0), height - 1)
    x1 = min(max(x + w, x0 + 1), width)
    y1 = min(max(y + h, y0 + 1), height)
    out = (x0, y0, x1 - x0, y1 - y0)
    return out, out != (x, y, w, h)


def _read_jsonl(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc.msg})", line=lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError(f"{path}: expected a JSON object", line=lineno)
        yield lineno, obj


def _box_fields(obj, lineno, path):
    try:
        x, y, w, h = (obj[k] for k in ("x", "y", "w", "h"))
        image = str(obj.get("image", ""))
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc.args[0]!r}", line=lineno) from exc
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in (x, y, w, h)):
        raise ParseError(f"{path}: box coordinates must be numbers", line=lineno)
    if w <= 0 or h <= 0:
        raise ValidationError(f"{path}: line {lineno}: non-positive box size {w}x{h}")
    return image, x, y, w, h


def load_proposals(path, bounds=None):
    """Parse a detections file into ``{image: [RegionProposal, ...]}``.

    ``bounds`` is either a ``(width, height)`` pair applied to every image or
    a mapping from image name to such a pair; boxes are clamped to it.  Each
    image's proposals are sorted by descending confidence (stable).
    """
    out = defaultdict(list)
    for lineno, obj in _read_jsonl(path):
        image, x, y, w, h = _box_fields(obj, lineno, path)
        if "conf" not in obj:
            raise ParseError(f"{path}: missing field 'conf'", line=lineno)
        conf = obj["conf"]
        if not isinstance(conf, (int, float)) or isinstance(conf, bool):
            raise ParseError(f"{path}: conf must be a number", line=lineno)
        if not 0.0 <= conf <= 1.0:
            raise ValidationError(f"{path}: line {lineno}: confidence {conf} outside [0, 1]")
        clamped = False
        lim = bounds.get(image) if isinstance(bounds, dict) else bounds
        if lim is not None:
            (x, y, w, h), clamped = clamp_box(x, y, w, h, *lim)
        out[image].append(RegionProposal(x, y, w, h, float(conf), image, clamped))
    return {k: sorted(v, key=lambda p: -p.confidence) for k, v in out.items()}


def write_proposals(proposals, path):
    lines = []
    for p in proposals:
        lines.append(json.dumps({"image": p.image, "x": p.x, "y": p.y, "w": p.w, "h": p.h,
                                 "conf": p.confidence}))
    _write_lines(path, lines)


def load_ground_truth(path):
    """Returns ``{image: (mode, [GtBox, ...])}``."""
    out = {}
    for lineno, obj in _read_jsonl(path):
        image, x, y, w, h = _box_fields(obj, lineno, path)
        mode = obj.get("mode", "management")
        if mode not in MODES:
            raise ValidationError(f"{path}: line {lineno}: unknown mode {mode!r}")
        if "product_id" not in obj:
            raise ParseError(f"{path}: missing field 'product_id'", line=lineno)
        prev_mode, boxes = out.setdefault(image, (mode, []))
        if prev_mode != mode:
            raise ValidationError(f"{path}: line {lineno}: image {image!r} mixes annotation modes")
        boxes.append(GtBox(x, y, w, h, str(obj["product_id"]), str(obj.get("category_id", "")), image))
    return out


def write_ground_truth(scene, path):
    lines = [json.dumps({"image": scene.name, "x": g.x, "y": g.y, "w": g.w, "h": g.h,
                         "product_id": g.product_id, "category_id": g.category_id,
                         "mode": scene.mode})
             for g in scene.ground_truth]
    _write_lines(path, lines)


def _write_lines(path, lines):
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def gen_shelf(refs, rows, cols, rng, distortion=None, mode="management",
              item_size=None, jitter_frac=0.1, name="scene.png"):
    """Paste randomly chosen reference images on a ``rows x cols`` shelf grid.

    ``refs`` is a sequence of ``(product_id, category_id, image)``.  Each cell
    is 25% larger than the item, so per-cell jitter up to 10% of the cell keeps
    neighbouring items disjoint.  ``distortion`` is an ``AugmentConfig`` applied
    to every pasted copy (None pastes the reference as is).
    """
    if not refs:
        raise ValidationError("gen_shelf needs at least one reference image")
    if mode not in MODES:
        raise ConfigError(f"unknown annotation mode {mode!r}")
    if rows < 1 or cols < 1:
        raise ConfigError(f"layout must be at least 1x1, got {rows}x{cols}")
    if not 0.0 <= jitter_frac <= 0.1:
        raise ConfigError(f"jitter_frac must be in [0, 0.1], got {jitter_frac}")
    if item_size is None:
        item_size = as_image(refs[0][2]).shape[:2]
    ih, iw = int(item_size[0]), int(item_size[1])
    cell_h, cell_w = int(np.ceil(ih / 0.8)), int(np.ceil(iw / 0.8))
    if cell_h < 8 or cell_w < 8:
        raise ConfigError(f"layout cell {cell_w}x{cell_h} px is smaller than 8x8")
    height, width = rows * cell_h, cols * cell_w

    canvas = 0.35 + 0.1 * rng.random((height, width, 3))
    for r in range(1, rows + 1):
        # shelf edge under each row
        canvas[max(0, r * cell_h - 3):r * cell_h] = 0.15

    my, mx = (cell_h - ih) // 2, (cell_w - iw) // 2
    jy, jx = min(my, int(jitter_frac * cell_h)), min(mx, int(jitter_frac * cell_w))
    grid = np.empty((rows, cols), dtype=np.int64)
    instances = []
    for r in range(rows):
        for c in range(cols):
            k = int(rng.integers(len(refs)))
            grid[r, c] = k
            pid, cat, img = refs[k]
            item = resize(as_image(img), (ih, iw))
            if distortion is not None:
                item = augment(item, rng, distortion)
            dy = int(rng.integers(-jy, jy + 1)) if jy else 0
            dx = int(rng.integers(-jx, jx + 1)) if jx else 0
            y0, x0 = r * cell_h + my + dy, c * cell_w + mx + dx
            canvas[y0:y0 + ih, x0:x0 + iw] = item
            instances.append(GtBox(x0, y0, iw, ih, pid, cat, name))

    if mode == "management":
        gt = list(instances)
    else:
        gt = _cluster_boxes(grid, instances, rows, cols, refs, name)
    return ShelfScene(canvas.astype(np.float32), gt, instances, mode, name)


def _cluster_boxes(grid, instances, rows, cols, refs, name):
    """Merge 4-adjacent cells showing the same product into one box."""
    seen = np.zeros_like(grid, dtype=bool)
    out = []
    for r in range(rows):
        for c in range(cols):
            if seen[r, c]:
                continue
            k = grid[r, c]
            stack, members = [(r, c)], []
            seen[r, c] = True
            while stack:
                cr, cc = stack.pop()
                members.append(instances[cr * cols + cc])
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < rows and 0 <= nc < cols and not seen[nr, nc] and grid[nr, nc] == k:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            x0 = min(m.x for m in members)
            y0 = min(m.y for m in members)
            x1 = max(m.x + m.w for m in members)
            y1 = max(m.y + m.h for m in members)
            out.append(GtBox(x0, y0, x1 - x0, y1 - y0, refs[k][0], refs[k][1], name))
    return out


def stub_detect(scene, noise=None, rng=None):
    """Stand-in detector: perturbed per-instance boxes plus spurious ones.

    Each box edge moves by up to ``jitter_frac`` of the box size.  True boxes
    get confidence ~ U(0.3, 1.0), spurious ones ~ U(0.0, 0.4).
    """
    noise = noise or DetectorNoise()
    rng = rng if rng is not None else np.random.default_rng(0)
    height, width = scene.image.shape[:2]
    out = []
    for g in scene.instances:
        drop = rng.random() < noise.drop_prob
        e = rng.uniform(-noise.jitter_frac, noise.jitter_frac, size=4)
        conf = float(rng.uniform(0.3, 1.0))
        if not drop:
            x0 = int(round(g.x + e[0] * g.w))
            y0 = int(round(g.y + e[1] * g.h))
            x1 = int(round(g.x + g.w + e[2] * g.w))
            y1 = int(round(g.y + g.h + e[3] * g.h))
            (x, y, w, h), clamped = clamp_box(x0, y0, max(1, x1 - x0), max(1, y1 - y0), width, height)
            out.append(RegionProposal(x, y, w, h, conf, scene.name, clamped))
        if rng.random() < noise.fp_rate:
            w = max(2, int(round(g.w * rng.uniform(0.5, 1.2))))
            h = max(2, int(round(g.h * rng.uniform(0.5, 1.2))))
            x = int(rng.integers(0, max(1, width - w + 1)))
            y = int(rng.integers(0, max(1, height - h + 1)))
            (x, y, w, h), clamped = clamp_box(x, y, w, h, width, height)
            out.append(RegionProposal(x, y, w, h, float(rng.uniform(0.0, 0.4)), scene.name, clamped))
    return sorted(out, key=lambda p: -p.confidence)
