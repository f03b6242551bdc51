"""Hardest-negative triplet training with pair early-selection."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import Config
from .model import (
    MATCHING_GROUPS,
    RVE_GROUPS,
    Batch,
    ModelParams,
    RveCounter,
    encode,
    score_pairs,
    word_weight_values,
)
from .rve import early_scores_batch
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

ALL_GROUPS = MATCHING_GROUPS + RVE_GROUPS


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# pair selection and loss


def select_pairs(early: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Pairs to score fully, given S_em as a (texts, images) matrix.

    Each text keeps its own image plus the ``d`` non-corresponding images with
    the highest early score (ties to the smaller image index). Returns
    ``(image_index, text_index)`` arrays of length s * (d + 1), text-major.
    """
    early = np.asarray(early)
    s = early.shape[0]
    if d >= s:
        log.warning("d=%d >= batch size %d; clamped to %d", d, s, s - 1)
        d = s - 1
    imgs, txts = [], []
    for t in range(s):
        row = early[t].astype(np.float64).copy()
        row[t] = -np.inf
        # stable sort on the negated score keeps smaller indices first on ties
        ranked = np.argsort(-row, kind="stable")
        chosen = [c for c in ranked if c != t][:d]
        imgs.extend([t, *sorted(chosen)])
        txts.extend([t] * (d + 1))
    return np.asarray(imgs, dtype=np.intp), np.asarray(txts, dtype=np.intp)


def all_pairs(s: int) -> tuple[np.ndarray, np.ndarray]:
    txt, img = np.divmod(np.arange(s * s), s)
    return img.astype(np.intp), txt.astype(np.intp)


@dataclass
class HardNegatives:
    positive: np.ndarray  # pair position of (i, i)
    hard_image: np.ndarray  # per text: pair position of its hardest negative image
    hard_text: np.ndarray  # per image: pair position of its hardest negative text, -1 if none
    hard_image_index: np.ndarray
    hard_text_index: np.ndarray


def hardest_negatives(scores: np.ndarray, image_index, text_index, s: int) -> HardNegatives:
    """Argmax negatives among the scored pairs; ties go to the smaller index."""
    img = np.asarray(image_index)
    txt = np.asarray(text_index)
    matrix = np.full((s, s), np.nan)  # [image, text]
    where = np.full((s, s), -1, dtype=np.intp)
    matrix[img, txt] = scores
    where[img, txt] = np.arange(len(img))
    positive = where[np.arange(s), np.arange(s)]
    if (positive < 0).any():
        raise ValueError("every corresponding pair must be scored")
    off = matrix.copy()
    off[np.arange(s), np.arange(s)] = np.nan
    filled = np.where(np.isnan(off), -np.inf, off)
    hard_img_idx = np.argmax(filled, axis=0)
    hard_txt_idx = np.argmax(filled, axis=1)
    has_img = np.isfinite(filled.max(axis=0))
    has_txt = np.isfinite(filled.max(axis=1))
    hard_img_idx = np.where(has_img, hard_img_idx, -1)
    hard_txt_idx = np.where(has_txt, hard_txt_idx, -1)
    hard_image = np.array([where[i, t] if i >= 0 else -1 for t, i in enumerate(hard_img_idx)], dtype=np.intp)
    hard_text = np.array([where[i, t] if t >= 0 else -1 for i, t in enumerate(hard_txt_idx)], dtype=np.intp)
    missing = int((hard_text < 0).sum())
    if missing:
        log.debug("%d image(s) had no scored negative text; image-anchored term skipped", missing)
    return HardNegatives(positive, hard_image, hard_text, hard_img_idx, hard_txt_idx)


def triplet_loss(s_pos: float, s_hard_text: Optional[float], s_hard_image: Optional[float], gamma: float) -> float:
    """[gamma - S(I,T) + S(I,T^)]+ + [gamma - S(I,T) + S(I^,T)]+; a missing negative contributes 0."""
    total = 0.0
    for neg in (s_hard_text, s_hard_image):
        if neg is not None:
            total += max(gamma - s_pos + neg, 0.0)
    return total


def batch_triplet_loss(scores: Tensor, negs: HardNegatives, gamma: float) -> Tensor:
    """Summed hinge loss over the batch as a differentiable scalar."""
    pos = T.take(scores, negs.positive)
    terms = [T.tsum(T.clamp_at_zero(T.shift(T.sub(T.take(scores, negs.hard_image), pos), gamma)))]
    has = negs.hard_text >= 0
    if has.any():
        pos_i = T.take(scores, negs.positive[has])
        neg_i = T.take(scores, negs.hard_text[has])
        terms.append(T.tsum(T.clamp_at_zero(T.shift(T.sub(neg_i, pos_i), gamma))))
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place, for the entries present in ``grads``."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise T.DimensionError(f"adam: gradient {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


def lr_at(epoch: int, lr0: float, every: int = 10) -> float:
    """Learning rate for 0-based ``epoch``: lr0 / 10 ** (epoch // every)."""
    return lr0 / 10 ** (epoch // every)


@dataclass
class Stage:
    trainable: tuple
    use_rve: bool


class StageSchedule:
    """Epoch 0 trains the matching model without the recurrent pass, epoch 1
    trains only the recurrent pass, later epochs train everything.

    ``use_rve=False`` gives the ablation: the matching model alone, every epoch.
    """

    def __init__(self, use_rve: bool = True):
        self.use_rve = use_rve

    def stage(self, epoch: int) -> Stage:
        if not self.use_rve or epoch == 0:
            return Stage(MATCHING_GROUPS, False)
        if epoch == 1:
            return Stage(RVE_GROUPS, True)
        return Stage(ALL_GROUPS, True)


# ---------------------------------------------------------------------------
# batch step


@dataclass
class StepResult:
    loss: float
    pairs: int
    negatives: HardNegatives
    scores: np.ndarray
    image_index: np.ndarray
    text_index: np.ndarray


def forward_loss(
    params: ModelParams,
    batch: Batch,
    cfg: Config,
    use_rve: bool,
    select: bool = True,
    counter: Optional[RveCounter] = None,
    identity_probe: bool = False,
) -> tuple[Tensor, StepResult]:
    """Loss of one aligned batch (image i belongs to text i). Call inside a Tape."""
    s = batch.descriptors.shape[0]
    enc = encode(params, batch)
    if use_rve and select:
        weights = word_weight_values(params, enc.words.data, enc.word_mask)
        early = early_scores_batch(enc.objects.data, enc.words.data, weights)
        img, txt = select_pairs(early, min(cfg.d, s - 1))
    else:
        img, txt = all_pairs(s)
    scores = score_pairs(params, enc, img, txt, use_rve, identity_probe, counter).result.final(cfg.objective)
    negs = hardest_negatives(scores.data, img, txt, s)
    loss = batch_triplet_loss(scores, negs, cfg.gamma)
    return loss, StepResult(loss.item(), len(img), negs, scores.data, img, txt)


def train_step(
    params: ModelParams,
    batch: Batch,
    cfg: Config,
    stage: Stage,
    state: AdamState,
    lr: float,
    counter: Optional[RveCounter] = None,
) -> StepResult:
    params.set_trainable(stage.trainable)
    params.zero_grad()
    with Tape() as tape:
        loss, result = forward_loss(params, batch, cfg, stage.use_rve, counter=counter)
    if not np.isfinite(result.loss):
        raise TrainingDivergedError(f"loss is {result.loss}")
    tape.backward(loss)
    named = params.group_tensors(stage.trainable)
    grads = {k: t.grad for k, t in named.items() if t.grad is not None}
    clip_by_global_norm(grads, cfg.clip_norm)
    adam_step(named, grads, state, lr)
    return result


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def iterate_batches(data, batch_size: int, rng: np.random.Generator):
    """Yield (image indices, text indices) for one epoch.

    Images of one group (e.g. a synthetic scene and its regrouped twin) stay
    adjacent so that they tend to share a batch. The epoch runs one round per
    caption slot; within a round each image appears once, so a batch never
    holds two texts of the same image.
    """
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(data.image_groups):
        groups.setdefault(int(g), []).append(i)
    keys = list(groups)
    rounds = max(len(t) for t in data.texts_of_image)
    for r in range(rounds):
        images = np.array([i for g in rng.permutation(len(keys)) for i in groups[keys[g]]], dtype=np.intp)
        texts = np.array([data.texts_of_image[i][r % len(data.texts_of_image[i])] for i in images], dtype=np.intp)
        for start in range(0, len(images), batch_size):
            sl = slice(start, start + batch_size)
            if len(images[sl]) >= 2:
                yield images[sl], texts[sl]


def train(
    data,
    cfg: Config,
    schedule: Optional[StageSchedule] = None,
    params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable[[int, ModelParams, dict], None]] = None,
    counter: Optional[RveCounter] = None,
) -> tuple[ModelParams, TrainLog]:
    """Train on ``data`` (a :class:`dprnn.data.Split`); returns params and the per-epoch log."""
    schedule = schedule or StageSchedule(cfg.use_rve)
    params = params or ModelParams.init(cfg, data.vocab_size)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = TrainLog()
    for epoch in range(cfg.epochs):
        stage = schedule.stage(epoch)
        lr = lr_at(epoch, cfg.lr, cfg.lr_decay_every)
        started = time.perf_counter()
        losses = []
        for b, (imgs, txts) in enumerate(iterate_batches(data, cfg.batch_size, rng)):
            batch = data.batch(imgs, txts)
            try:
                result = train_step(params, batch, cfg, stage, state, lr, counter)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"epoch {epoch} batch {b} (images {list(imgs[:4])}...): {exc}") from None
            losses.append(result.loss / len(imgs))
        entry = {
            "epoch": epoch,
            "lr": lr,
            "stage": "+".join(stage.trainable),
            "use_rve": stage.use_rve,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "seconds": time.perf_counter() - started,
            "checksums": {g: params.checksum((g,)) for g in ALL_GROUPS},
        }
        history.epochs.append(entry)
        log.info("epoch %d lr=%.2g stage=%s loss=%.4f (%.1fs)", epoch, lr, entry["stage"], entry["loss"], entry["seconds"])
        if on_epoch is not None:
            on_epoch(epoch, params, entry)
    params.set_trainable(ALL_GROUPS)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DPRNCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sII")


class CheckpointError(ValueError):
    """The checkpoint file is malformed or from an unsupported version."""


def checkpoint_bytes(params: ModelParams, cfg: Config, extra: Optional[dict] = None) -> bytes:
    named = params.named()
    header = {
        "config": cfg.to_dict(),
        "vocab_size": int(params.text.embedding.shape[0]),
        "params": [{"name": k, "shape": list(t.shape)} for k, t in named.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in named.values())
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + payload


def save_checkpoint(params: ModelParams, cfg: Config, path, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg, extra))


def load_checkpoint(path) -> tuple[ModelParams, Config, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, head_len = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[_CKPT_HEAD.size : _CKPT_HEAD.size + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    cfg = Config(**header["config"]).validate()
    params = ModelParams.init(cfg, header["vocab_size"], seed=0)
    named = params.named()
    offset = _CKPT_HEAD.size + head_len
    expected = offset + sum(8 * int(np.prod(p["shape"])) for p in header["params"])
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in named or named[name].shape != shape:
            raise CheckpointError(f"{path}: parameter {name} {shape} does not fit the model")
        size = int(np.prod(shape)) * 8
        named[name].data[...] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=offset).reshape(shape)
        offset += size
    return params, cfg, header.get("extra", {})
