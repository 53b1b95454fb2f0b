"""Post-search refinement of K-NN shortlists.

Three independent stages, applied in the order lf -> mc -> th:

* ``lf``: re-rank candidates by summed local-feature match weights.
* ``mc``: if most confident detections agree on a macro category, restrict
  every shortlist to that category.
* ``th``: reject a recognition when its 1-NN / 2-NN distance ratio exceeds
  ``tau_d``.
"""
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .store import RankedMatch, cosine_distance, knn

log = logging.getLogger(__name__)

STAGES = ("lf", "mc", "th")
ACCEPTED = "accepted"
REJECTED = "rejected_ambiguous"


@dataclass
class MatchWeightParams:
    epsilon: float = 1e-6
    tau_d: float = 0.9
    conf_mc: float = 0.1
    k: int = 5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.tau_d <= 1:
            raise ValidationError(f"tau_d must be in (0, 1], got {self.tau_d}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")


@dataclass
class Recognition:
    proposal: object
    candidates: list
    status: str = ACCEPTED
    descriptor: np.ndarray = None
    locals: list = None
    flags: list = field(default_factory=list)

    @property
    def confidence(self):
        return self.proposal.confidence

    @property
    def label(self):
        return self.candidates[0].product_id if self.candidates else None


def parse_stages(spec):
    if isinstance(spec, str):
        spec = [s for s in (p.strip() for p in spec.replace("-", ",").split(",")) if s]
    stages = set(spec)
    unknown = stages - set(STAGES)
    if unknown:
        raise ValidationError(f"unknown refinement stages {sorted(unknown)}; choose from {STAGES}")
    return stages


def match_weight(fq, fr, epsilon=1e-6):
    """Weight of a local match: agreement of the directions to the image
    centre over descriptor distance, ``(vq . vr + 1) / (d(fq, fr) + eps)``."""
    num = float(np.dot(np.asarray(fq.v, dtype=np.float64), np.asarray(fr.v, dtype=np.float64))) + 1.0
    return max(num, 0.0) / (cosine_distance(fq.f, fr.f) + epsilon)


def lf_score(query_locals, ref_locals, epsilon=1e-6):
    """Sum of match weights, pairing each query feature with its nearest
    reference feature (first index on ties)."""
    if not query_locals or not ref_locals:
        return 0.0
    qf = np.stack([q.f for q in query_locals]).astype(np.float64)
    rf = np.stack([r.f for r in ref_locals]).astype(np.float64)
    # unit vectors: 1 - a.b == |a - b|^2 / 2
    d = np.clip(0.5 * np.sum((qf[:, None, :] - rf[None, :, :]) ** 2, axis=2), 0.0, 2.0)
    nn = d.argmin(axis=1)
    qv = np.stack([q.v for q in query_locals]).astype(np.float64)
    rv = np.stack([r.v for r in ref_locals]).astype(np.float64)[nn]
    num = np.maximum(np.sum(qv * rv, axis=1) + 1.0, 0.0)
    return float(np.sum(num / (d[np.arange(len(nn)), nn] + epsilon)))


def rerank_lf(query_locals, shortlist, db, params=None):
    """Reorder a shortlist by descending local-feature score; ties keep the
    original order.  Returns the shortlist unchanged when there are no query
    features."""
    params = params or MatchWeightParams()
    if not query_locals:
        log.warning("no query local features; shortlist left unchanged")
        return list(shortlist)
    scored = []
    for pos, m in enumerate(shortlist):
        s = lf_score(query_locals, db[m.product_id].locals, params.epsilon)
        scored.append((-s, pos, m, s))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [replace(m, rank=i, score=s) for i, (_, _, m, s) in enumerate(scored, start=1)]


def ratio_test(shortlist, tau_d):
    """Accept unless the nearest/second-nearest global distance ratio exceeds
    ``tau_d``.  Uses the two smallest distances in the list, whatever its
    current order."""
    if len(shortlist) < 2:
        return True
    d1, d2 = sorted(m.distance for m in shortlist)[:2]
    if d1 == 0.0:
        return True
    return d1 / d2 <= tau_d


def category_votes(recognitions, db, conf_mc):
    votes = {}
    for rec in recognitions:
        if rec.confidence > conf_mc and rec.candidates:
            cat = db[rec.candidates[0].product_id].category_id
            votes[cat] = votes.get(cat, 0) + 1
    return votes


def majority_category(votes):
    total = sum(votes.values())
    for cat, n in sorted(votes.items()):
        if 2 * n > total:
            return cat
    return None


def macro_category_filter(recognitions, db, params=None):
    """Restrict every shortlist to the strict-majority macro category among
    the 1-NNs of confident proposals; unchanged when no such category exists."""
    params = params or MatchWeightParams()
    votes = category_votes(recognitions, db, params.conf_mc)
    if not votes:
        log.warning("no proposal above confidence %.3f; category filter skipped", params.conf_mc)
        return [replace(r, flags=r.flags + ["mc_no_votes"]) for r in recognitions]
    cat = majority_category(votes)
    if cat is None:
        return list(recognitions)
    out = []
    for rec in recognitions:
        if rec.descriptor is not None:
            cands = knn(db, rec.descriptor, params.k, category_filter=cat)
        else:
            kept = [m for m in rec.candidates if db[m.product_id].category_id == cat]
            cands = [replace(m, rank=i) for i, m in enumerate(kept, start=1)] or rec.candidates
        out.append(replace(rec, candidates=cands))
    return out


def refine_full(recognitions, db, params=None, stages=STAGES, query_locals=None):
    """Apply the selected stages in the fixed order lf -> mc -> th.

    ``query_locals`` optionally gives one list of local features per
    recognition; otherwise each recognition's own ``locals`` are used.  When
    both lf and mc run, the category-filtered shortlists are re-ranked by lf
    again so the final order reflects both.
    """
    params = params or MatchWeightParams()
    stages = parse_stages(stages)
    recs = list(recognitions)
    if query_locals is None:
        query_locals = [r.locals for r in recs]
    if len(query_locals) != len(recs):
        raise ValidationError("query_locals must have one entry per recognition")

    def apply_lf(items):
        out = []
        for rec, ql in zip(items, query_locals):
            if not ql:
                flags = rec.flags if "lf_no_query_locals" in rec.flags else rec.flags + ["lf_no_query_locals"]
                out.append(replace(rec, flags=flags))
            else:
                out.append(replace(rec, candidates=rerank_lf(ql, rec.candidates, db, params)))
        return out

    if "lf" in stages:
        recs = apply_lf(recs)
    if "mc" in stages:
        filtered = macro_category_filter(recs, db, params)
        changed = any(a.candidates is not b.candidates for a, b in zip(filtered, recs))
        recs = apply_lf(filtered) if ("lf" in stages and changed) else filtered
    if "th" in stages:
        out = []
        for rec in recs:
            ok = ratio_test(rec.candidates, params.tau_d)
            flags = rec.flags
            if len(rec.candidates) >= 2 and all(m.distance == 0.0 for m in rec.candidates[:2]):
                flags = flags + ["duplicate_products"]
            out.append(replace(rec, status=ACCEPTED if ok else REJECTED, flags=flags))
        recs = out
    return recs
