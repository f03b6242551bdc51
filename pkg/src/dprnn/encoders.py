"""Image and text encoders mapping raw inputs into the common h-dim space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class BoxRangeError(ValueError):
    """An object box coordinate lies outside [0, 1]."""


@dataclass
class ImageInstance:
    id: str
    object_descriptors: np.ndarray  # (k, D_img)
    object_boxes: np.ndarray  # (k, 4): width, height, center_x, center_y

    def __post_init__(self):
        self.object_descriptors = np.asarray(self.object_descriptors, dtype=np.float64)
        self.object_boxes = np.asarray(self.object_boxes, dtype=np.float64)
        k = self.object_descriptors.shape[0]
        if self.object_descriptors.ndim != 2 or k < 1:
            raise ValueError(f"image {self.id}: descriptors must be a non-empty k x D matrix")
        if self.object_boxes.shape != (k, 4):
            raise ValueError(f"image {self.id}: boxes shape {self.object_boxes.shape}, expected ({k}, 4)")

    @property
    def k(self) -> int:
        return self.object_descriptors.shape[0]

    def validate(self) -> None:
        check_boxes(self.object_boxes, self.id)


@dataclass
class TextInstance:
    id: str
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)

    @property
    def n(self) -> int:
        return len(self.tokens)


def check_boxes(boxes: np.ndarray, name: str = "") -> None:
    boxes = np.asarray(boxes)
    if not np.all(np.isfinite(boxes)) or boxes.min(initial=0.0) < 0.0 or boxes.max(initial=0.0) > 1.0:
        raise BoxRangeError(f"image {name}: box coordinates must lie in [0, 1]")


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class GruParams:
    """One direction of a GRU.

    z = sigmoid(x W_xz + h W_hz + b_z)
    r = sigmoid(x W_xr + h W_hr + b_r)
    c = tanh(x W_xn + (r * h) W_hn + b_n)
    h' = (1 - z) * h + z * c
    """

    w_xz: Tensor
    w_xr: Tensor
    w_xn: Tensor
    w_hz: Tensor
    w_hr: Tensor
    w_hn: Tensor
    b_z: Tensor
    b_r: Tensor
    b_n: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_hidden: int) -> "GruParams":
        bound = 1.0 / np.sqrt(n_hidden)
        mats = {name: _uniform(rng, (n_in, n_hidden), bound) for name in ("w_xz", "w_xr", "w_xn")}
        mats.update({name: _uniform(rng, (n_hidden, n_hidden), bound) for name in ("w_hz", "w_hr", "w_hn")})
        mats.update({name: Tensor(np.zeros(n_hidden), requires_grad=True) for name in ("b_z", "b_r", "b_n")})
        return cls(**mats)

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int) -> "GruParams":
        p = cls.init(np.random.default_rng(0), n_in, n_hidden)
        for t in p.tensors().values():
            t.data[...] = 0.0
        return p

    @property
    def n_in(self) -> int:
        return self.w_xz.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.w_xz.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


def gru_cell(params: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    if x.shape[-1] != params.n_in or h_prev.shape[-1] != params.n_hidden:
        raise DimensionError(
            f"gru_cell: input {x.shape} / hidden {h_prev.shape} vs params ({params.n_in}, {params.n_hidden})"
        )
    xz = T.linear(x, params.w_xz, params.b_z)
    xr = T.linear(x, params.w_xr, params.b_r)
    xn = T.linear(x, params.w_xn, params.b_n)
    return _gru_step(params, xz, xr, xn, h_prev)


def _gru_step(p: GruParams, xz: Tensor, xr: Tensor, xn: Tensor, h: Tensor) -> Tensor:
    z = T.sigmoid(T.add(xz, T.matmul(h, p.w_hz)))
    r = T.sigmoid(T.add(xr, T.matmul(h, p.w_hr)))
    c = T.tanh(T.add(xn, T.matmul(T.mul(r, h), p.w_hn)))
    return T.add(h, T.mul(z, T.sub(c, h)))


def run_gru(params: GruParams, x: Tensor, mask: Optional[np.ndarray] = None, reverse: bool = False) -> list[Tensor]:
    """Hidden state at every step of a (B, L, in) sequence batch, zero initial state.

    Steps where ``mask`` is 0 leave the hidden state untouched; with padding at
    the end this makes the reverse pass start at each sequence's last token.
    """
    b, length = x.shape[0], x.shape[1]
    xz = T.linear(x, params.w_xz, params.b_z)
    xr = T.linear(x, params.w_xr, params.b_r)
    xn = T.linear(x, params.w_xn, params.b_n)
    h = Tensor(np.zeros((b, params.n_hidden), dtype=x.data.dtype))
    states: list[Optional[Tensor]] = [None] * length
    order = range(length - 1, -1, -1) if reverse else range(length)
    for t in order:
        new = _gru_step(params, T.select(xz, t, 1), T.select(xr, t, 1), T.select(xn, t, 1), h)
        if mask is not None and not mask[:, t].all():
            new = T.blend(mask[:, t, None].astype(x.data.dtype), new, h)
        h = new
        states[t] = h
    return states


def bigru(forward: GruParams, backward: GruParams, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Average of forward and backward hidden states, shape (B, L, hidden)."""
    fwd = run_gru(forward, x, mask)
    bwd = run_gru(backward, x, mask, reverse=True)
    summed = T.stack([T.add(f, r) for f, r in zip(fwd, bwd)], axis=1)
    return T.scale(summed, 0.5)


@dataclass
class ImageEncoderParams:
    feature_w: Tensor  # (D_img, h)
    feature_b: Tensor
    position_w: Tensor  # (4, h)
    position_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, img_dim: int, h: int) -> "ImageEncoderParams":
        return cls(
            feature_w=_uniform(rng, (img_dim, h), 1.0 / np.sqrt(img_dim)),
            feature_b=Tensor(np.zeros(h), requires_grad=True),
            position_w=_uniform(rng, (4, h), 1.0 / np.sqrt(4)),
            position_b=Tensor(np.zeros(h), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class TextEncoderParams:
    embedding: Tensor  # (V, q)
    forward: GruParams
    backward: GruParams

    @classmethod
    def init(cls, rng: np.random.Generator, vocab_size: int, q: int, h: int) -> "TextEncoderParams":
        return cls(
            embedding=_uniform(rng, (vocab_size, q), 0.1),
            forward=GruParams.init(rng, q, h),
            backward=GruParams.init(rng, q, h),
        )

    def tensors(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        out.update({f"forward.{k}": v for k, v in self.forward.tensors().items()})
        out.update({f"backward.{k}": v for k, v in self.backward.tensors().items()})
        return out


def encode_images(params: ImageEncoderParams, descriptors: np.ndarray, boxes: np.ndarray) -> Tensor:
    """Object features o = (f W_f + b_f) * sigmoid(box W_p + b_p) for a (B, k, .) batch."""
    fo = T.linear(Tensor(descriptors), params.feature_w, params.feature_b)
    po = T.sigmoid(T.linear(Tensor(boxes), params.position_w, params.position_b))
    return T.mul(fo, po)


def encode_image(img: ImageInstance, params: ImageEncoderParams) -> Tensor:
    img.validate()
    if img.object_descriptors.shape[1] != params.feature_w.shape[0]:
        raise DimensionError(
            f"image {img.id}: descriptor dim {img.object_descriptors.shape[1]} != {params.feature_w.shape[0]}"
        )
    return encode_images(params, img.object_descriptors, img.object_boxes)


def pad_tokens(token_lists, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences; returns (tokens, mask) with mask True on real tokens."""
    lengths = [len(t) for t in token_lists]
    if min(lengths) < 1:
        raise ValueError("empty token sequence")
    tokens = np.full((len(token_lists), max(lengths)), pad, dtype=np.int64)
    mask = np.zeros(tokens.shape, dtype=bool)
    for i, t in enumerate(token_lists):
        tokens[i, : len(t)] = t
        mask[i, : len(t)] = True
    return tokens, mask


def encode_texts(params: TextEncoderParams, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Word features (B, n_max, h); rows past each text's length are padding."""
    x = T.take(params.embedding, tokens, axis=0)
    return bigru(params.forward, params.backward, x, mask)


def encode_text(t: TextInstance, params: TextEncoderParams) -> Tensor:
    if t.n < 1:
        raise ValueError(f"text {t.id}: empty token sequence")
    vocab = params.embedding.shape[0]
    if t.tokens.min() < 0 or t.tokens.max() >= vocab:
        raise ValueError(f"text {t.id}: token index outside vocabulary of size {vocab}")
    tokens = t.tokens[None, :]
    out = encode_texts(params, tokens, np.ones(tokens.shape, dtype=bool))
    return T.reshape(out, out.shape[1:])
