"""Text-driven object reordering and recurrent visual embedding.

Word and object positions are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import GruParams, bigru
from .tensor import Tensor


@dataclass
class RveParams:
    forward: GruParams
    backward: GruParams

    @classmethod
    def init(cls, rng: np.random.Generator, h: int) -> "RveParams":
        return cls(GruParams.init(rng, h, h), GruParams.init(rng, h, h))

    def tensors(self) -> dict[str, Tensor]:
        out = {f"forward.{k}": v for k, v in self.forward.tensors().items()}
        out.update({f"backward.{k}": v for k, v in self.backward.tensors().items()})
        return out


@dataclass
class Reordering:
    permutation: np.ndarray  # new slot r holds source object permutation[r]
    anchor_word: np.ndarray  # most related word of each object, in new slot order

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[..., :] = np.argsort(self.permutation, axis=-1, kind="stable")
        return inv


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def relatedness(objects, words, word_weights) -> np.ndarray:
    """P[i, j] = a_j * (o_i . w_j), raw dot products (may be negative)."""
    o, w, a = _values(objects), _values(words), _values(word_weights)
    dots = o @ np.swapaxes(w, -1, -2)
    return dots * a[..., None, :]


def most_related_word(p: np.ndarray, word_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-object argmax over words; ties go to the smallest word position."""
    p = np.asarray(p)
    if p.shape[-1] < 1:
        raise ValueError("relatedness matrix has no words")
    if word_mask is not None:
        p = np.where(np.asarray(word_mask, dtype=bool)[..., None, :], p, -np.inf)
    return np.argmax(p, axis=-1)


def reorder_objects(objects, anchors: np.ndarray) -> tuple[Reordering, Tensor]:
    """Stable sort of object rows by anchor word position."""
    anchors = np.asarray(anchors)
    perm = np.argsort(anchors, axis=-1, kind="stable")
    order = Reordering(perm, np.take_along_axis(anchors, perm, axis=-1))
    obj = T.as_tensor(objects)
    if obj.data.ndim == 2:
        return order, T.take(obj, perm, axis=0)
    return order, T.take_rows(obj, perm)


def recurrent_embed(ordered_objects, params: RveParams) -> Tensor:
    """Bi-GRU over the reordered objects; output stays in reordered slot order."""
    x = T.as_tensor(ordered_objects)
    if x.data.ndim == 2:
        out = bigru(params.forward, params.backward, T.reshape(x, (1, *x.shape)))
        return T.reshape(out, x.shape)
    return bigru(params.forward, params.backward, x)


def early_matching_score(p: np.ndarray) -> np.ndarray:
    """Sum of the relatedness matrix over objects and words (per leading batch entry)."""
    p = np.asarray(p)
    return p.sum(axis=(-2, -1))


def early_scores_batch(objects: np.ndarray, words: np.ndarray, word_weights: np.ndarray) -> np.ndarray:
    """S_em for every (text, image) combination of a batch, shape (texts, images).

    Uses sum_i sum_j a_j o_i.w_j = sum_j a_j (sum_i o_i).w_j, which is
    exact up to rounding and avoids materializing every P matrix.
    """
    obj_sum = objects.sum(axis=1)  # (images, h)
    weighted = (words * word_weights[..., None]).sum(axis=1)  # (texts, h)
    return weighted @ obj_sum.T
