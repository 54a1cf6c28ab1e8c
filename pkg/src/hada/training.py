"""Contrastive (ITC) and matching (ITM) objectives and the two-phase training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, NumericalError
from .evaluation import evaluate
from .model import ALPHA_RANGE, TAU_RANGE, anchor_globals, discriminate, embed_batch, score_matrix
from .numerics import (
    AdamWState,
    CosineSchedule,
    Tape,
    Tensor,
    adamw_step,
    backward,
    clip,
    concat,
    cosine_lr,
    diagonal,
    div,
    gather_rows,
    log,
    log_softmax,
    mul,
    sub,
    total,
)

log_ = logging.getLogger(__name__)

PROB_EPS = 1e-12


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 50
    lr_max: float = 1e-4
    lr_min: float = 5e-6
    weight_decay: float = 0.02
    dropout: float = 0.7
    tau_init: float = 0.07
    tau_range: tuple = TAU_RANGE
    alpha_init: float = 0.5
    alpha_range: tuple = ALPHA_RANGE
    phase: int = 1
    patience: int = 5
    seed: int = 0
    restart_schedule: bool = True
    deterministic_log: bool = False
    ema_teacher: None = None  # momentum distillation would attach here; unsupported

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch contrastive terms")
        if self.epochs < 1 or self.patience < 0:
            raise ConfigError("epochs must be >= 1 and patience >= 0")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if self.weight_decay < 0 or not 0 <= self.dropout < 1:
            raise ConfigError("weight_decay must be >= 0 and dropout in [0, 1)")
        if self.phase not in (1, 2):
            raise ConfigError("phase must be 1 or 2")
        if tuple(self.tau_range) != TAU_RANGE or tuple(self.alpha_range) != ALPHA_RANGE:
            raise ConfigError("tau/alpha clamp ranges are fixed at [0.001, 0.5] and [0.1, 0.9]")
        if not TAU_RANGE[0] <= self.tau_init <= TAU_RANGE[1]:
            raise ConfigError("tau_init outside the clamp range")
        if self.ema_teacher is not None:
            raise ConfigError("momentum teacher is not supported")


@dataclass
class Batch:
    image_ids: list
    text_ids: list
    images: list  # per item {model_id: FeatureRecord}
    texts: list

    def __post_init__(self):
        if len(self.image_ids) != len(set(self.image_ids)):
            raise ContractError("duplicate image in batch")
        if len(self.image_ids) != len(self.text_ids):
            raise ContractError("batch needs one text per image")

    @classmethod
    def from_store(cls, store, image_ids, text_ids, model_ids):
        return cls(
            list(image_ids),
            list(text_ids),
            [store.item_records(i, model_ids) for i in image_ids],
            [store.item_records(t, model_ids) for t in text_ids],
        )


def itc_loss(sim, tau):
    """Symmetric InfoNCE over an M x M similarity Tensor with pairs on the diagonal."""
    m = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != m:
        raise ContractError(f"similarity matrix must be square, got {sim.shape}")
    if m < 2:
        raise ContractError("ITC needs at least two pairs per batch")
    logits = div(sim, tau)
    i2t = diagonal(log_softmax(logits, axis=1))
    t2i = diagonal(log_softmax(logits, axis=0))
    return div(total(i2t) + total(t2i), -float(m))


def mine_hard_negatives(sim):
    """Highest-scoring non-matching text per image and image per text.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    s = np.array(np.asarray(getattr(sim, "values", sim)), dtype=np.float64)
    m = s.shape[0]
    if m < 2:
        raise ContractError("hard negatives need at least two pairs")
    np.fill_diagonal(s, -np.inf)
    return np.argmax(s, axis=1), np.argmax(s, axis=0)


def bce(prob, labels):
    """Mean binary cross-entropy; probabilities are clamped away from 0 and 1."""
    p = clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    ll = mul(y, log(p)) + mul(1.0 - y, log(sub(1.0, p)))
    return div(total(ll), -float(y.shape[0]))


def itm_loss(h_img, h_txt, neg_text, neg_image, weight):
    """Mean BCE over the M positives and 2M hard-negative pairs."""
    m = h_img.shape[0]
    idx = np.arange(m)
    left = gather_rows(h_img, np.concatenate([idx, idx, neg_image]))
    right = gather_rows(h_txt, np.concatenate([idx, neg_text, idx]))
    labels = np.concatenate([np.ones(m), np.zeros(2 * m)])
    return bce(discriminate(left, right, weight), labels)


@dataclass
class LossParts:
    total: Tensor
    itc: float
    itm: float


def batch_scores(params, h_img, h_txt, batch):
    if params.phase == 1:
        return score_matrix(h_img, h_txt)
    return score_matrix(h_img, h_txt, anchor_globals(batch.images, params),
                        anchor_globals(batch.texts, params), params.alpha)


def total_loss(batch, params, rng=None):
    """ITC + ITM on one batch. Phase 1 scores with fused embeddings only."""
    h_img = embed_batch(params, batch.images, "image", rng)
    h_txt = embed_batch(params, batch.texts, "text", rng)
    sim = batch_scores(params, h_img, h_txt, batch)
    l_itc = itc_loss(sim, params.tau)
    neg_text, neg_image = mine_hard_negatives(sim)
    l_itm = itm_loss(h_img, h_txt, neg_text, neg_image, params["itm.weight"])
    return LossParts(l_itc + l_itm, l_itc.item(), l_itm.item())


@dataclass
class EarlyStopState:
    patience: int
    best_rsum: float = -math.inf
    since: int = 0
    best_path: str | None = None

    def update(self, rsum):
        """Record an epoch's score; returns True if it is a new best."""
        if rsum > self.best_rsum:
            self.best_rsum = rsum
            self.since = 0
            return True
        self.since += 1
        return False

    @property
    def should_stop(self):
        # patience 0 still lets one non-improving epoch run
        return self.since >= max(self.patience, 1)


@dataclass
class TrainResult:
    params: object
    best_rsum: float
    best_epoch: int
    epochs_run: int
    log: list = field(default_factory=list)
    checkpoint: str | None = None
    optimizer: AdamWState | None = None


def _epoch_batches(store, image_ids, batch_size, rng):
    order = rng.permutation(len(image_ids))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [image_ids[k] for k in order[start:start + batch_size]]
        if len(chunk) < 2:
            continue
        texts = [store.manifest.pairs[i][int(rng.integers(len(store.manifest.pairs[i])))] for i in chunk]
        batches.append((chunk, texts))
    return batches


def _dump_batch(out_dir, phase, epoch, step, image_ids, text_ids, loss):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_phase{phase}_epoch{epoch}_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"phase": phase, "epoch": epoch, "step": step, "loss": repr(loss),
                                "image_ids": image_ids, "text_ids": text_ids}, indent=1))
    return path


def train(store, config, params, out_dir=None, optimizer=None, schedule_offset=0):
    """Train ``params`` for one phase and return the best state seen.

    Phase 2 switches on the weighted score with alpha reset to
    ``config.alpha_init``. ``out_dir`` receives ``best.hadc`` and ``train.jsonl``.
    """
    config.validate()
    params = params.copy()
    params.config = replace(params.config, dropout=config.dropout)
    if config.phase == 2:
        params.start_phase2(config.alpha_init)
    else:
        params.phase = 1
        params.alpha.values[...] = 0.0
    params.clamp()
    model_ids = params.config.model_ids
    train_images = sorted(store.manifest.images("train"))
    if len(train_images) < 2:
        raise ConfigError("training split needs at least two images")
    rng = np.random.default_rng([config.seed, config.phase])
    steps_per_epoch = len(_epoch_batches(store, train_images, config.batch_size, np.random.default_rng(0)))
    if config.restart_schedule or optimizer is None:
        schedule_offset = 0
    schedule = CosineSchedule(config.lr_max, config.lr_min, schedule_offset + config.epochs * steps_per_epoch)
    state = AdamWState(weight_decay=config.weight_decay, no_decay=frozenset({"tau", "alpha"}))
    if optimizer is not None and not config.restart_schedule:
        state.step = optimizer.step

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train.jsonl"
        log_path.write_text("")
    val_mode = "fused" if config.phase == 1 else "weighted"
    stopper = EarlyStopState(config.patience)
    stopper.update(evaluate(params, store, "val", val_mode).total_rsum)
    best, best_epoch, best_state = params.copy(), 0, None
    if out is not None:
        save_checkpoint(best, out / "best.hadc")
        stopper.best_path = str(out / "best.hadc")
    records = []
    step = schedule_offset
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        lr = schedule.lr_max
        for b, (image_ids, text_ids) in enumerate(_epoch_batches(store, train_images, config.batch_size, rng)):
            batch = Batch.from_store(store, image_ids, text_ids, model_ids)
            trainable = params.trainable()
            with Tape() as tape:
                parts = total_loss(batch, params, rng)
            loss = parts.total.item()
            if not math.isfinite(loss):
                dump = _dump_batch(out, config.phase, epoch, b, image_ids, text_ids, loss)
                raise NumericalError(f"non-finite loss {loss} at phase {config.phase} epoch {epoch} "
                                     f"batch {b}; batch dump: {dump}")
            backward(tape, parts.total, trainable.values())
            lr = cosine_lr(schedule, min(step, schedule.total_steps))
            adamw_step(trainable, {k: t.grad for k, t in trainable.items()}, state, lr)
            params.clamp()
            step += 1
            losses.append(loss)
        val_rsum = evaluate(params, store, "val", val_mode).total_rsum
        improved = stopper.update(val_rsum)
        if improved:
            best, best_epoch = params.copy(), epoch
            best_state = _copy_state(state)
            if out is not None:
                save_checkpoint(best, out / "best.hadc", best_state)
        rec = {
            "epoch": epoch,
            "phase": config.phase,
            "train_loss": float(np.mean(losses)) if losses else None,
            "val_rsum": val_rsum,
            "lr": lr,
            "tau": params.tau.item(),
            "alpha": params.alpha.item(),
        }
        if not config.deterministic_log:
            rec["seconds"] = time.perf_counter() - t0
        records.append(rec)
        if log_path is not None:
            with log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec) + "\n")
        log_.info("phase %d epoch %d loss %.4f val rsum %.2f", config.phase, epoch,
                  rec["train_loss"] or float("nan"), val_rsum)
        if stopper.should_stop:
            break
    return TrainResult(best, stopper.best_rsum, best_epoch, epoch, records, stopper.best_path, best_state)


def _copy_state(state):
    return AdamWState(
        weight_decay=state.weight_decay, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        step=state.step, m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()}, no_decay=state.no_decay,
    )


def train_two_phase(store, config, params, out_dir=None):
    """Phase 1 with alpha frozen at 0, then phase 2 from the phase-1 best."""
    out = Path(out_dir) if out_dir is not None else None
    first = train(store, replace(config, phase=1), params, out / "phase1" if out else None)
    second = train(store, replace(config, phase=2), first.params, out / "phase2" if out else None,
                   optimizer=first.optimizer, schedule_offset=first.optimizer.step if first.optimizer else 0)
    return first, second


def config_dict(config):
    return asdict(config)
