"""Model parameters and the full per-pair scoring pipeline."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import Config
from .encoders import ImageEncoderParams, TextEncoderParams, encode_images, encode_texts
from .matching import MatchingParams, MatchResult, match, self_attention_weights
from .rve import Reordering, RveParams, most_related_word, recurrent_embed, relatedness, reorder_objects
from .tensor import Tensor

# parameter groups trained in each stage of the schedule
MATCHING_GROUPS = ("image", "text", "matching")
RVE_GROUPS = ("rve",)


@dataclass
class ModelParams:
    image: ImageEncoderParams
    text: TextEncoderParams
    matching: MatchingParams
    rve: RveParams

    @classmethod
    def init(cls, cfg: Config, vocab_size: int, seed: Optional[int] = None) -> "ModelParams":
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        return cls(
            image=ImageEncoderParams.init(rng, cfg.img_dim, cfg.h),
            text=TextEncoderParams.init(rng, vocab_size, cfg.q, cfg.h),
            matching=MatchingParams.init(
                rng, cfg.h, lambda1=cfg.lambda1, lambda2=cfg.lambda2, beta_w=cfg.beta_w, beta_o=cfg.beta_o
            ),
            rve=RveParams.init(rng, cfg.h),
        )

    def named(self) -> dict[str, Tensor]:
        """Every learnable tensor keyed by ``group.name``, in a fixed order."""
        out: dict[str, Tensor] = {}
        for group in ("image", "text", "matching", "rve"):
            for name, t in getattr(self, group).tensors().items():
                out[f"{group}.{name}"] = t
        return out

    def group_tensors(self, groups) -> dict[str, Tensor]:
        return {k: v for k, v in self.named().items() if k.split(".", 1)[0] in groups}

    def checksum(self, groups=None) -> str:
        h = hashlib.sha256()
        tensors = self.named() if groups is None else self.group_tensors(groups)
        for name, t in tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.grad = None

    def set_trainable(self, groups) -> None:
        for name, t in self.named().items():
            t.requires_grad = name.split(".", 1)[0] in groups

    def copy(self) -> "ModelParams":
        import copy

        return copy.deepcopy(self)


@dataclass
class Batch:
    """Images and texts, aligned so that image i corresponds to text i when used for training."""

    descriptors: np.ndarray  # (B_img, k, D)
    boxes: np.ndarray  # (B_img, k, 4)
    tokens: np.ndarray  # (B_txt, n_max)
    word_mask: np.ndarray  # (B_txt, n_max) bool
    image_ids: list = field(default_factory=list)
    text_ids: list = field(default_factory=list)


@dataclass
class Encoded:
    objects: Tensor  # (B_img, k, h)
    words: Tensor  # (B_txt, n, h)
    word_mask: np.ndarray


@dataclass
class PairScores:
    result: MatchResult
    reorderings: Optional[Reordering] = None
    relatedness: Optional[np.ndarray] = None


class RveCounter:
    """Counts per-pair recurrent visual embedding invocations."""

    def __init__(self):
        self.calls = 0

    def reset(self) -> None:
        self.calls = 0


def encode(params: ModelParams, batch: Batch) -> Encoded:
    objects = encode_images(params.image, batch.descriptors, batch.boxes)
    words = encode_texts(params.text, batch.tokens, batch.word_mask)
    return Encoded(objects, words, np.asarray(batch.word_mask, dtype=bool))


def word_weight_values(params: ModelParams, words: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Word self-attention weights as constants (no gradient)."""
    m = params.matching
    return self_attention_weights(Tensor(words), Tensor(m.word_attention.data), m.beta_w, mask).data


def score_pairs(
    params: ModelParams,
    enc: Encoded,
    image_index,
    text_index,
    use_rve: bool = True,
    identity_probe: bool = False,
    counter: Optional[RveCounter] = None,
    keep_details: bool = False,
) -> PairScores:
    """Match image ``image_index[p]`` against text ``text_index[p]`` for every p.

    With ``use_rve`` the objects are reordered by their most related words,
    re-encoded by the recurrent pass, then scattered back to their original
    slots before matching. ``identity_probe`` replaces the recurrent pass by
    the identity.
    """
    img = np.asarray(image_index, dtype=np.intp)
    txt = np.asarray(text_index, dtype=np.intp)
    objects = T.take(enc.objects, img, axis=0)
    words = T.take(enc.words, txt, axis=0)
    mask = enc.word_mask[txt]
    order = rel = None
    if use_rve:
        weights = word_weight_values(params, words.data, mask)
        rel = relatedness(objects.data, words.data, weights)
        anchors = most_related_word(rel, mask)
        order, ordered = reorder_objects(objects, anchors)
        if counter is not None:
            counter.calls += len(img)
        embedded = ordered if identity_probe else recurrent_embed(ordered, params.rve)
        objects = T.take_rows(embedded, order.inverse())
    word_mask = None if mask.all() else mask
    result = match(objects, words, params.matching, word_mask)
    if not keep_details:
        rel = None
    return PairScores(result, order, rel)


def similarity_matrix(
    params: ModelParams,
    batch: Batch,
    objective: str,
    use_rve: bool = True,
    identity_probe: bool = False,
    chunk: int = 2048,
) -> np.ndarray:
    """Scores of every (image, text) combination, shape (B_img, B_txt); no tape."""
    enc = encode(params, batch)
    n_img, n_txt = enc.objects.shape[0], enc.words.shape[0]
    img, txt = np.divmod(np.arange(n_img * n_txt), n_txt)
    out = np.empty(n_img * n_txt)
    for start in range(0, len(img), chunk):
        sl = slice(start, start + chunk)
        scores = score_pairs(params, enc, img[sl], txt[sl], use_rve, identity_probe)
        out[sl] = scores.result.final(objective).data
    return out.reshape(n_img, n_txt)
