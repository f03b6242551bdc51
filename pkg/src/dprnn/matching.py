"""Multi-attention cross matching between object and word features.

All functions accept an optional leading batch axis, so a (P, k, h) object
block and a (P, n, h) word block score P pairs at once. ``word_mask`` marks
real (non-padding) words with True.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

OBJECTIVES = ("word_oriented", "object_oriented", "ensemble")


@dataclass
class MatchingParams:
    word_attention: Tensor  # (1, h)
    object_attention: Tensor  # (1, h)
    lambda1: float = 9.0
    lambda2: float = 4.0
    beta_w: float = 0.3
    beta_o: float = 0.3

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "beta_w", "beta_o"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def init(cls, rng: np.random.Generator, h: int, **temps) -> "MatchingParams":
        bound = 1.0 / np.sqrt(h)
        return cls(
            word_attention=Tensor(rng.uniform(-bound, bound, size=(1, h)), requires_grad=True),
            object_attention=Tensor(rng.uniform(-bound, bound, size=(1, h)), requires_grad=True),
            **temps,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"word_attention": self.word_attention, "object_attention": self.object_attention}


@dataclass
class MatchResult:
    """Batched tensors of one matching pass (leading axis = pair)."""

    alpha: Tensor
    alpha_dual: Tensor
    object_text_sims: Tensor
    image_word_sims: Tensor
    word_weights: Tensor
    object_weights: Tensor
    s_word: Tensor
    s_object: Tensor

    def final(self, objective: str) -> Tensor:
        if objective == "word_oriented":
            return self.s_word
        if objective == "object_oriented":
            return self.s_object
        if objective == "ensemble":
            return T.scale(T.add(self.s_word, self.s_object), 0.5)
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


@dataclass
class SimilarityBreakdown:
    alpha: np.ndarray
    alpha_dual: np.ndarray
    object_text_sims: np.ndarray
    image_word_sims: np.ndarray
    word_weights: np.ndarray
    object_weights: np.ndarray
    s_word: float
    s_object: float
    s_final: float
    extras: dict = field(default_factory=dict)


def _pair_mask(n_rows: int, row_mask: Optional[np.ndarray], col_mask: Optional[np.ndarray], shape) -> Optional[np.ndarray]:
    if row_mask is None and col_mask is None:
        return None
    m = np.ones(shape, dtype=bool)
    if row_mask is not None:
        m &= np.asarray(row_mask, dtype=bool)[..., :, None]
    if col_mask is not None:
        m &= np.asarray(col_mask, dtype=bool)[..., None, :]
    return m


def clamped_cosines(rows: Tensor, cols: Tensor, row_mask=None, col_mask=None) -> Tensor:
    """max(cos(row_i, col_j), 0) with padded rows/columns forced to 0."""
    c = T.clamp_at_zero(T.cosine_matrix(rows, cols))
    m = _pair_mask(rows.shape[-2], row_mask, col_mask, c.shape)
    if m is not None:
        c = T.mul(c, Tensor(m.astype(c.data.dtype)))
    return c


def object_to_word_affinity(objects: Tensor, words: Tensor, word_mask=None, object_mask=None) -> Tensor:
    """A[i, j]: clamped cosine normalized over objects i for each word j."""
    c = clamped_cosines(objects, words, object_mask, word_mask)
    return T.l2_normalize(c, axis=-2)


def attend_text_per_object(words: Tensor, affinity: Tensor, lambda1: float, word_mask=None) -> tuple[Tensor, Tensor]:
    """Attended text feature per object and the attention weights (softmax over words)."""
    mask = None
    if word_mask is not None:
        mask = np.broadcast_to(np.asarray(word_mask, dtype=bool)[..., None, :], affinity.shape)
    alpha = T.softmax_temp(affinity, lambda1, mask)
    return T.matmul(alpha, words), alpha


def object_text_similarity(objects: Tensor, attended: Tensor) -> Tensor:
    return T.cosine(objects, attended)


def _cross(queries: Tensor, keys: Tensor, lam: float, query_mask=None, key_mask=None):
    affinity = object_to_word_affinity(queries, keys, key_mask, query_mask)
    attended, alpha = attend_text_per_object(keys, affinity, lam, key_mask)
    return attended, alpha, object_text_similarity(queries, attended)


def dual_image_word_similarity(objects: Tensor, words: Tensor, lambda2: float, word_mask=None):
    """(m, alpha_dual, S(I, j)): the word-to-object mirror of the object-side pass."""
    return _cross(words, objects, lambda2, query_mask=word_mask)


def self_attention_weights(features: Tensor, attn_vector: Tensor, beta: float, mask=None) -> Tensor:
    """softmax over rows of beta * (attn_vector . feature_row)."""
    scores = T.matmul(features, T.transpose(attn_vector))
    scores = T.reshape(scores, scores.shape[:-1])
    return T.softmax_temp(scores, beta, mask)


def match(objects: Tensor, words: Tensor, params: MatchingParams, word_mask=None) -> MatchResult:
    """Both similarity orientations for every pair in the batch."""
    if objects.shape[-1] != words.shape[-1]:
        raise T.DimensionError(f"object dim {objects.shape[-1]} != word dim {words.shape[-1]}")
    _, alpha, s_it = _cross(objects, words, params.lambda1, key_mask=word_mask)
    _, alpha_dual, s_ij = dual_image_word_similarity(objects, words, params.lambda2, word_mask)
    a_w = self_attention_weights(words, params.word_attention, params.beta_w, word_mask)
    a_o = self_attention_weights(objects, params.object_attention, params.beta_o)
    s_word = T.sum_axis(T.mul(a_w, s_ij), -1)
    s_object = T.sum_axis(T.mul(a_o, s_it), -1)
    return MatchResult(alpha, alpha_dual, s_it, s_ij, a_w, a_o, s_word, s_object)


def pair_similarity(objects, words, params: MatchingParams, objective: str = "ensemble") -> SimilarityBreakdown:
    """Full breakdown for a single (k x h objects, n x h words) pair."""
    o = T.as_tensor(objects)
    w = T.as_tensor(words)
    if o.data.ndim != 2 or w.data.ndim != 2:
        raise T.DimensionError("pair_similarity takes one pair: objects (k, h), words (n, h)")
    r = match(o, w, params)
    return SimilarityBreakdown(
        alpha=r.alpha.data,
        alpha_dual=r.alpha_dual.data,
        object_text_sims=r.object_text_sims.data,
        image_word_sims=r.image_word_sims.data,
        word_weights=r.word_weights.data,
        object_weights=r.object_weights.data,
        s_word=float(r.s_word.data),
        s_object=float(r.s_object.data),
        s_final=float(r.final(objective).data),
    )
