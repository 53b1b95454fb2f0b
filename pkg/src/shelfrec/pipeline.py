"""Online recognition path: crop each proposal, describe it, search the
reference database and refine the shortlists."""
import json
from pathlib import Path

import numpy as np

from . import embedder
from .detection import RegionProposal
from .errors import IOFailure, ParseError, VersionError
from .evaluation import Prediction
from .imaging import crop
from .refinement import ACCEPTED, MatchWeightParams, Recognition, refine_full
from .store import RankedMatch, knn


def recognize(image, proposals, net, db, params=None, stages=(),
              lf_kernel=embedder.LF_KERNEL, lf_stride=embedder.LF_STRIDE):
    params = params or MatchWeightParams()
    if db.dim != net.descriptor_dim:
        raise VersionError(f"weights produce {net.descriptor_dim}-d descriptors "
                           f"but the database holds {db.dim}-d ones")
    recs = []
    for p in proposals:
        patch = crop(image, p.x, p.y, p.w, p.h)
        desc, locs = embedder.describe(net, patch, lf_kernel, lf_stride)
        recs.append(Recognition(proposal=p, candidates=knn(db, desc, params.k),
                                descriptor=desc, locals=locs))
    return refine_full(recs, db, params, stages)


def to_predictions(recognitions):
    """Accepted recognitions as scoring inputs, labelled with their rank-1
    candidate."""
    out = []
    for r in recognitions:
        if r.status != ACCEPTED or not r.candidates:
            continue
        p = r.proposal
        out.append(Prediction(p.x, p.y, p.w, p.h, r.label, p.confidence, p.image))
    return out


def recognition_record(rec, db=None):
    p = rec.proposal
    d = {"image": p.image, "x": p.x, "y": p.y, "w": p.w, "h": p.h, "conf": p.confidence,
         "status": rec.status, "product_id": rec.label,
         "candidates": [{"product_id": m.product_id, "distance": m.distance, "rank": m.rank,
                         "score": m.score} for m in rec.candidates]}
    if db is not None and rec.label is not None:
        d["category_id"] = db[rec.label].category_id
    if rec.flags:
        d["flags"] = list(rec.flags)
    return d


def write_recognitions(recognitions, path, db=None):
    lines = [json.dumps(recognition_record(r, db), sort_keys=True) for r in recognitions]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_recognitions(path):
    """Load a recognitions file written by ``write_recognitions``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            o = json.loads(line)
            prop = RegionProposal(o["x"], o["y"], o["w"], o["h"], float(o["conf"]), o.get("image", ""))
            cands = [RankedMatch(c["product_id"], float(c["distance"]), int(c["rank"]), c.get("score"))
                     for c in o.get("candidates", [])]
            out.append(Recognition(proposal=prop, candidates=cands,
                                   status=o.get("status", ACCEPTED), flags=o.get("flags", [])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed recognition ({exc})", line=lineno) from exc
    return out


def group_by_image(items):
    out = {}
    for it in items:
        out.setdefault(it.image, []).append(it)
    return out
