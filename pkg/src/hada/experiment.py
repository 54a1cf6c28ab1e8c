"""Side-by-side comparison of single models, B1, B2 and HADA on one split."""

from __future__ import annotations

from dataclasses import dataclass

from .evaluation import RetrievalSplit, baseline_b1, evaluate
from .model import ModelConfig, init_params
from .training import train_two_phase


@dataclass
class Row:
    name: str
    report: object
    delta: float = 0.0


def train_variant(store, model_config, train_config, variant, seed, out_dir=None):
    """Two-phase training of one variant; returns the phase-2 result."""
    cfg = ModelConfig(**{**model_config.to_json(), "variant": variant})
    _, second = train_two_phase(store, train_config, init_params(cfg, seed), out_dir)
    return second.params


def compare(store, split="test", hada=None, b2=None, b1_models=None, reference=None):
    """Evaluate every available method; rows sorted by total RSum, best first."""
    manifest = store.manifest
    rs = RetrievalSplit.from_manifest(manifest, split)
    rows = [Row(f"single:{m}", evaluate(None, store, split, "single", m)) for m in manifest.model_ids]
    singles = {r.name.split(":", 1)[1]: r.report for r in rows}
    b1_models = b1_models or manifest.model_ids[:2]
    if len(b1_models) == 2:
        rows.append(Row("B1", baseline_b1(singles[b1_models[0]], singles[b1_models[1]], rs)))
    if b2 is not None:
        rows.append(Row("B2", evaluate(b2, store, split, "b2")))
    if hada is not None:
        rows.append(Row("HADA", evaluate(hada, store, split, "weighted" if hada.phase == 2 else "fused")))
    ref_name = reference or (f"single:{hada.config.anchor_id}" if hada is not None else rows[0].name)
    ref = next((r for r in rows if r.name == ref_name), None)
    if ref is None:
        raise ValueError(f"reference row {ref_name!r} not among {[r.name for r in rows]}")
    for r in rows:
        r.delta = r.report.total_rsum - ref.report.total_rsum
    rows.sort(key=lambda r: -r.report.total_rsum)
    return rows


def format_table(rows):
    head = f"{'method':<14} {'i2t R@1':>8} {'R@5':>7} {'R@10':>7} {'RSum':>8} " \
           f"{'t2i R@1':>8} {'R@5':>7} {'R@10':>7} {'RSum':>8} {'total':>8} {'dR':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        a, b = r.report.i2t, r.report.t2i
        lines.append(
            f"{r.name:<14} {a.r1:8.2f} {a.r5:7.2f} {a.r10:7.2f} {a.rsum:8.2f} "
            f"{b.r1:8.2f} {b.r5:7.2f} {b.r10:7.2f} {b.rsum:8.2f} {r.report.total_rsum:8.2f} {r.delta:+8.2f}"
        )
    return "\n".join(lines)
