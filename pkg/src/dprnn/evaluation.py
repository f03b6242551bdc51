"""Recall@K retrieval evaluation with fold averaging."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ModelParams, similarity_matrix

log = logging.getLogger(__name__)

KS = (1, 5, 10)
METRICS = tuple(f"{side}_r{k}" for side in ("sentence", "image") for k in KS)


def ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of every candidate per query; ties go to the smaller candidate index."""
    order = np.argsort(-sim, axis=1, kind="stable")
    out = np.empty_like(order)
    np.put_along_axis(out, order, np.arange(sim.shape[1])[None, :].repeat(sim.shape[0], 0), axis=1)
    return out


def recall_at_k(sim: np.ndarray, ground_truth: Sequence, k: int) -> float:
    """Percentage of queries with at least one correct candidate in their top ``k``.

    ``ground_truth[q]`` is an int or a collection of correct candidate indices.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ValueError("similarity must be a queries x candidates matrix")
    if k > sim.shape[1]:
        log.warning("K=%d exceeds %d candidates; clamped", k, sim.shape[1])
        k = sim.shape[1]
    r = ranks(sim)
    hits = 0
    for q, truth in enumerate(ground_truth):
        correct = np.atleast_1d(np.asarray(truth, dtype=np.intp))
        if correct.size == 0:
            raise ValueError(f"query {q} has no correct candidate")
        hits += bool(r[q, correct].min() < k)
    return 100.0 * hits / sim.shape[0]


def recalls(sim_img_txt: np.ndarray, text_image: np.ndarray, texts_of_image: Sequence) -> dict:
    """R@{1,5,10} in both directions from an (images, texts) similarity matrix."""
    out = {}
    for k in KS:
        out[f"sentence_r{k}"] = recall_at_k(sim_img_txt, texts_of_image, k)
        out[f"image_r{k}"] = recall_at_k(sim_img_txt.T, text_image, k)
    return out


@dataclass
class RecallReport:
    folds: list = field(default_factory=list)  # per fold: metric -> value, plus images/texts counts

    @property
    def mean(self) -> dict:
        return {m: float(np.mean([f[m] for f in self.folds])) for m in METRICS}

    @property
    def queries(self) -> dict:
        return {
            "images": int(sum(f["images"] for f in self.folds)),
            "texts": int(sum(f["texts"] for f in self.folds)),
        }

    def to_text(self) -> str:
        lines = []
        for i, f in enumerate(self.folds):
            cells = " ".join(f"{m}={f[m]:.4f}" for m in METRICS)
            lines.append(f"fold={i} {cells} images={f['images']} texts={f['texts']}")
        mean = self.mean
        q = self.queries
        cells = " ".join(f"{m}={mean[m]:.4f}" for m in METRICS)
        lines.append(f"fold=mean {cells} images={q['images']} texts={q['texts']}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RecallReport":
        folds = []
        for line in text.splitlines():
            cells = dict(c.split("=", 1) for c in line.split())
            if cells.get("fold") == "mean":
                continue
            row = {m: float(cells[m]) for m in METRICS}
            row["images"], row["texts"] = int(cells["images"]), int(cells["texts"])
            folds.append(row)
        return cls(folds)


def fold_slices(n: int, folds: int) -> list[slice]:
    if folds < 1:
        raise ValueError("folds must be >= 1")
    size = math.ceil(n / folds)
    if n % folds:
        log.warning("%d images do not split into %d equal folds; last fold truncated", n, folds)
    return [slice(i * size, min((i + 1) * size, n)) for i in range(folds) if i * size < n]


def report_from_matrices(matrices: Sequence[tuple[np.ndarray, np.ndarray, Sequence]]) -> RecallReport:
    """One fold per (sim, text_image, texts_of_image) triple."""
    folds = []
    for sim, text_image, texts_of_image in matrices:
        row = recalls(sim, text_image, texts_of_image)
        row["images"], row["texts"] = sim.shape
        folds.append(row)
    return RecallReport(folds)


def model_similarity(models: Sequence[tuple[ModelParams, str]], split, use_rve: bool = True, identity_probe: bool = False):
    """(images, texts) score matrix; with several models their scores are averaged."""
    batch = split.batch(np.arange(split.n_images), np.arange(split.n_texts))
    sims = [similarity_matrix(p, batch, objective, use_rve, identity_probe) for p, objective in models]
    return sims[0] if len(sims) == 1 else np.mean(sims, axis=0)


def evaluate(
    models: Sequence[tuple[ModelParams, str]],
    split,
    folds: int = 5,
    use_rve: bool = True,
    identity_probe: bool = False,
) -> RecallReport:
    """Fold-averaged R@K; every query-candidate pair in a fold is scored."""
    matrices = []
    for sl in fold_slices(split.n_images, folds):
        sub = split.subset(range(sl.start, sl.stop))
        sim = model_similarity(models, sub, use_rve, identity_probe)
        matrices.append((sim, sub.text_image, sub.texts_of_image))
    return report_from_matrices(matrices)


def hard_negative_auc(sim: np.ndarray, text_image: np.ndarray, hard_negatives: Sequence) -> float:
    """P(S(positive image, t) > S(hard negative image, t)) over listed pairs; ties count half."""
    if not hard_negatives:
        raise ValueError("no hard negatives listed")
    wins = 0.0
    for t, neg in hard_negatives:
        pos = sim[text_image[t], t]
        other = sim[neg, t]
        wins += 1.0 if pos > other else 0.5 if pos == other else 0.0
    return wins / len(hard_negatives)
