"""Bidirectional retrieval metrics: ranking, R@K, RSum and rank-averaging (B1)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StoreError
from .checkpoint import encode_checkpoint
from .model import anchor_globals, embed_batch

KS = (1, 5, 10)
MODES = ("fused", "weighted", "b2", "single")


def rank(scores):
    """Gallery indices per query, best first; ties go to the lower index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    bad = np.argwhere(~np.isfinite(scores))
    if bad.size:
        q, g = bad[0]
        raise ValueError(f"non-finite score for query {q}, gallery item {g}")
    return np.argsort(-scores, axis=1, kind="stable")


def first_hit(rankings, relevance):
    """0-based position of the first relevant gallery item for each query."""
    out = np.empty(len(relevance), dtype=np.int64)
    for q, rel in enumerate(relevance):
        if not rel:
            raise InputError(f"query {q} has no relevant gallery items")
        hits = np.flatnonzero(np.isin(rankings[q], list(rel)))
        out[q] = hits[0]
    return out


def recall_at_k(rankings, relevance, k):
    """Percent of queries with a relevant item in the top ``k``."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if len(relevance) == 0:
        return 0.0
    return 100.0 * float(np.mean(first_hit(rankings, relevance) < k))


def rsum(values):
    values = list(values)
    if len(values) not in (3, 6):
        raise ValueError(f"RSum needs three (one direction) or six recall values, got {len(values)}")
    return sum(values)


@dataclass
class DirectionReport:
    r1: float
    r5: float
    r10: float
    rankings: np.ndarray = field(repr=False, default=None)
    first_hit: np.ndarray = field(repr=False, default=None)

    @property
    def rsum(self):
        return rsum([self.r1, self.r5, self.r10])

    def to_json(self):
        return {"r1": self.r1, "r5": self.r5, "r10": self.r10, "rsum": self.rsum}


@dataclass
class RetrievalReport:
    i2t: DirectionReport
    t2i: DirectionReport
    config_hash: str | None = None
    checkpoint_hash: str | None = None

    @property
    def total_rsum(self):
        return self.i2t.rsum + self.t2i.rsum

    def to_json(self):
        return {
            "i2t": self.i2t.to_json(),
            "t2i": self.t2i.to_json(),
            "total_rsum": self.total_rsum,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def direction_report(rankings, relevance):
    hits = first_hit(rankings, relevance)
    r = [100.0 * float(np.mean(hits < k)) for k in KS]
    return DirectionReport(*r, rankings=rankings, first_hit=hits)


@dataclass
class RetrievalSplit:
    """Item ids and relevance for one split, in a fixed (sorted) order."""

    images: list
    texts: list
    i2t_relevance: list  # per image: set of text indices
    t2i_relevance: list  # per text: set with its image index

    @classmethod
    def from_manifest(cls, manifest, split):
        images = sorted(manifest.images(split))
        texts = sorted(manifest.texts(split))
        if not images or not texts:
            raise StoreError(f"split {split!r} is empty")
        t_index = {t: j for j, t in enumerate(texts)}
        i_index = {img: i for i, img in enumerate(images)}
        i2t = [{t_index[t] for t in manifest.pairs.get(img, []) if t in t_index} for img in images]
        owner = manifest.image_of()
        t2i = [{i_index[owner[t]]} if owner.get(t) in i_index else set() for t in texts]
        return cls(images, texts, i2t, t2i)


def report_from_scores(scores, split):
    """Report for an image-by-text score matrix."""
    scores = np.asarray(scores)
    return RetrievalReport(
        i2t=direction_report(rank(scores), split.i2t_relevance),
        t2i=direction_report(rank(scores.T), split.t2i_relevance),
    )


def embed_items(params, store, item_ids, modality, chunk=256):
    ids = params.config.model_ids
    rows = []
    for start in range(0, len(item_ids), chunk):
        items = [store.item_records(i, ids) for i in item_ids[start:start + chunk]]
        rows.append(embed_batch(params, items, modality).values)
    return np.concatenate(rows, axis=0)


def score_split(store, split, mode, params=None, model_id=None):
    """Image-by-text scores for one split under the given scoring mode."""
    if mode not in MODES:
        raise ValueError(f"unknown score mode {mode!r}; expected one of {MODES}")
    if mode == "single":
        if model_id is None:
            raise InputError("single-model mode needs a model id")
        gi = store.globals_matrix(split.images, model_id)
        gt = store.globals_matrix(split.texts, model_id)
        return gi @ gt.T
    if params is None:
        raise InputError(f"mode {mode!r} needs trained parameters")
    if mode == "b2" and params.config.variant != "b2":
        raise InputError("b2 mode needs parameters trained with variant 'b2'")
    h_img = embed_items(params, store, split.images, "image")
    h_txt = embed_items(params, store, split.texts, "text")
    fused = h_img @ h_txt.T
    if mode == "fused" or (mode == "b2" and params.phase == 1):
        return fused
    ids = params.config.model_ids
    a_img = anchor_globals([store.item_records(i, ids) for i in split.images], params)
    a_txt = anchor_globals([store.item_records(t, ids) for t in split.texts], params)
    alpha = params.alpha.item()
    return (1.0 - alpha) * fused + alpha * (a_img @ a_txt.T)


def evaluate(params, store, split, mode, model_id=None):
    """Embed every item of ``split`` once and report both retrieval directions."""
    rs = RetrievalSplit.from_manifest(store.manifest, split)
    report = report_from_scores(score_split(store, rs, mode, params, model_id), rs)
    if params is not None and mode != "single":
        report.config_hash = f"{params.config.hash():08x}"
        report.checkpoint_hash = hashlib.sha256(encode_checkpoint(params)).hexdigest()[:16]
    return report


def _positions(rankings):
    pos = np.empty_like(rankings)
    rows = np.arange(rankings.shape[0])[:, None]
    pos[rows, rankings] = np.arange(1, rankings.shape[1] + 1)[None, :]
    return pos


def b1_scores(rankings_a, rankings_b):
    """Negated mean rank of every gallery item under two rankings."""
    if rankings_a.shape != rankings_b.shape:
        raise InputError(f"ranking shapes differ: {rankings_a.shape} vs {rankings_b.shape}")
    return -(_positions(rankings_a) + _positions(rankings_b)) / 2.0


def baseline_b1(report_a, report_b, split):
    """Re-rank by the average of two reports' ranks and recompute the metrics."""
    i2t = rank(b1_scores(report_a.i2t.rankings, report_b.i2t.rankings))
    t2i = rank(b1_scores(report_a.t2i.rankings, report_b.t2i.rankings))
    return RetrievalReport(
        i2t=direction_report(i2t, split.i2t_relevance),
        t2i=direction_report(t2i, split.t2i_relevance),
    )
