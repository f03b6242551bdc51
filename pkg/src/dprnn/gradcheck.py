"""Central finite-difference checks for the tape autodiff."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = STEP) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return out


def analytic_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        root = fn()
    tape.backward(root)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|)."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = STEP) -> float:
    """Largest relative error over every entry of every tensor in ``tensors``."""
    grads = analytic_grads(fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        worst = max(worst, max_rel_error(g, numeric_grad(fn, t, step)))
    return worst


# ---------------------------------------------------------------------------
# the standard suite: every differentiable op plus the composed training loss


def _leaf(rng: np.random.Generator, *shape, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, *shape) -> Tensor:
    # keeps kinked ops (clamp) off their kink
    signs = rng.choice([-1.0, 1.0], size=shape)
    return Tensor(signs * rng.uniform(0.1, 1.0, size=shape), requires_grad=True)


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    from . import tensor as T

    cases = []

    def add_case(name, build, leaves):
        weights_rng = np.random.default_rng(rng.integers(1 << 31))
        probe_weights = {}

        def fn():
            out = build()
            if out.data.ndim == 0:
                return out
            if "w" not in probe_weights:
                probe_weights["w"] = Tensor(weights_rng.normal(size=out.shape))
            return T.tsum(T.mul(out, probe_weights["w"]))

        cases.append((name, fn, leaves))

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    add_case("matmul", lambda: T.matmul(a, b), [a, b])
    x, w = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    add_case("matmul_shared", lambda: T.matmul(x, w), [x, w])
    x2, w2, b2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    add_case("linear", lambda: T.linear(x2, w2, b2), [x2, w2, b2])
    t = _leaf(rng, 2, 3, 4)
    add_case("transpose", lambda: T.transpose(t), [t])
    add_case("reshape", lambda: T.reshape(t, (6, 4)), [t])
    p, q = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    add_case("add", lambda: T.add(p, q), [p, q])
    add_case("sub", lambda: T.sub(p, q), [p, q])
    add_case("mul", lambda: T.mul(p, q), [p, q])
    add_case("scale", lambda: T.scale(p, -1.7), [p])
    add_case("shift", lambda: T.shift(p, 0.3), [p])
    s = _leaf(rng, 3, 4, low=-3, high=3)
    add_case("sigmoid", lambda: T.sigmoid(s), [s])
    add_case("tanh", lambda: T.tanh(s), [s])
    c = _away_from_zero(rng, 3, 4)
    add_case("clamp_at_zero", lambda: T.clamp_at_zero(c), [c])
    mask = rng.random((3, 4)) < 0.5
    add_case("blend", lambda: T.blend(mask, p, q), [p, q])
    add_case("tsum", lambda: T.tsum(t), [t])
    add_case("sum_axis", lambda: T.sum_axis(t, 1), [t])
    add_case("take", lambda: T.take(t, [2, 0, 2], axis=1), [t])
    rows = np.array([[2, 0, 1], [1, 1, 0]])
    add_case("take_rows", lambda: T.take_rows(t, rows), [t])
    add_case("select", lambda: T.select(t, 1, axis=2), [t])
    add_case("slice_last", lambda: T.slice_last(t, 1, 3), [t])
    add_case("stack", lambda: T.stack([p, q], axis=1), [p, q])
    sm = _leaf(rng, 2, 3, 4)
    add_case("softmax_temp", lambda: T.softmax_temp(sm, 4.0), [sm])
    smask = np.ones((2, 3, 4), dtype=bool)
    smask[..., 3] = False
    smask[1, :, 2] = False
    add_case("softmax_temp_masked", lambda: T.softmax_temp(sm, 9.0, smask), [sm])
    u, v = _leaf(rng, 2, 3, 5), _leaf(rng, 2, 3, 5)
    add_case("cosine", lambda: T.cosine(u, v), [u, v])
    m1, m2 = _leaf(rng, 2, 3, 5), _leaf(rng, 2, 4, 5)
    add_case("cosine_matrix", lambda: T.cosine_matrix(m1, m2), [m1, m2])
    ln = _leaf(rng, 2, 3, 4, low=0.1, high=1.0)
    add_case("l2_normalize", lambda: T.l2_normalize(ln, axis=-2), [ln])
    return cases


def _model_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    from . import tensor as T
    from .config import Config
    from .encoders import GruParams, bigru, gru_cell
    from .model import Batch, ModelParams
    from .training import forward_loss

    cases = []
    gp = GruParams.init(rng, 3, 4)
    for name, t in gp.tensors().items():
        t.data += rng.uniform(-0.3, 0.3, size=t.shape)  # non-zero biases too
    x, h0 = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    wc = rng.normal(size=(2, 4))
    cases.append(("gru_cell", lambda: T.tsum(T.mul(gru_cell(gp, x, h0), Tensor(wc))), [x, h0, *gp.tensors().values()]))

    back = GruParams.init(rng, 3, 4)
    seq = _leaf(rng, 2, 4, 3)
    seq_mask = np.array([[True, True, True, False], [True, True, True, True]])
    wb = rng.normal(size=(2, 4, 4))
    cases.append(
        (
            "bigru_masked",
            lambda: T.tsum(T.mul(bigru(gp, back, seq, seq_mask), Tensor(wb))),
            [seq, *gp.tensors().values(), *back.tensors().values()],
        )
    )

    # composed pair similarity + hardest-negative triplet loss with the recurrent pass
    cfg = Config(h=4, q=3, k=3, img_dim=5, batch_size=3, d=1, gamma=0.5, objective="ensemble")
    params = ModelParams.init(cfg, vocab_size=7, seed=int(rng.integers(1 << 31)))
    for t in params.named().values():
        t.data += rng.uniform(-0.2, 0.2, size=t.shape)
    tokens = np.array([[1, 2, 3, 4], [5, 6, 1, 0], [2, 4, 0, 0]])
    batch = Batch(
        descriptors=rng.normal(size=(3, 3, 5)),
        boxes=rng.uniform(0, 1, size=(3, 3, 4)),
        tokens=tokens,
        word_mask=tokens > 0,
    )
    for objective in ("word_oriented", "object_oriented", "ensemble"):
        c = cfg.replace(objective=objective)

        def composed(c=c):
            loss, _ = forward_loss(params, batch, c, use_rve=True)
            return loss

        cases.append((f"triplet_loss_{objective}", composed, list(params.named().values())))
    return cases


def suite(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar function, leaves) for every differentiable op and the composed loss."""
    rng = np.random.default_rng(seed)
    return _op_cases(rng) + _model_cases(rng)


def run_suite(seed: int = 0, step: float = STEP) -> list[tuple[str, float]]:
    """Worst relative error per case."""
    return [(name, check(fn, leaves, step)) for name, fn, leaves in suite(seed)]
