"""Feature files, dataset manifests and the synthetic corpus generator.

On-disk layout of a dataset directory::

    manifest.txt        line-oriented, tab separated (see ``Manifest``)
    vocab.txt           one token per line; the line number is the token id
    texts.txt           <text_id> TAB <space separated tokens>
    features/<id>.feat  one FeatureFile per image
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoders import BoxRangeError, ImageInstance, TextInstance, check_boxes, pad_tokens
from .model import Batch

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"DPRNFEAT"
FEATURE_VERSION = 1
# magic, version (u16), k (u16), descriptor dim (u32)
_FEAT_HEAD = struct.Struct("<8sHHI")
HEADER_BYTES = _FEAT_HEAD.size


class FeatureFileError(ValueError):
    """Base class for unreadable feature files."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class ManifestError(ValueError):
    """The manifest references something missing or is malformed."""


class VocabularyBudgetError(ValueError):
    pass


def feature_file_size(k: int, dim: int) -> int:
    return HEADER_BYTES + k * (dim + 4) * 4


def feature_bytes(inst: ImageInstance) -> bytes:
    check_boxes(inst.object_boxes, inst.id)
    k, dim = inst.object_descriptors.shape
    head = _FEAT_HEAD.pack(FEATURE_MAGIC, FEATURE_VERSION, k, dim)
    body = np.ascontiguousarray(inst.object_descriptors, dtype="<f4").tobytes()
    boxes = np.ascontiguousarray(inst.object_boxes, dtype="<f4").tobytes()
    return head + body + boxes


def save_features(inst: ImageInstance, path) -> None:
    Path(path).write_bytes(feature_bytes(inst))


def parse_features(raw: bytes, image_id: str = "", source: str = "<bytes>") -> ImageInstance:
    if len(raw) < HEADER_BYTES:
        raise TruncatedFileError(f"{source}: expected at least {HEADER_BYTES} header bytes, got {len(raw)}")
    magic, version, k, dim = _FEAT_HEAD.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, expected {FEATURE_VERSION}")
    expected = feature_file_size(k, dim)
    if len(raw) != expected:
        raise TruncatedFileError(f"{source}: expected {expected} bytes for k={k}, D={dim}, got {len(raw)}")
    desc = np.frombuffer(raw, dtype="<f4", count=k * dim, offset=HEADER_BYTES).reshape(k, dim)
    boxes = np.frombuffer(raw, dtype="<f4", count=k * 4, offset=HEADER_BYTES + 4 * k * dim).reshape(k, 4)
    check_boxes(boxes, image_id or source)
    return ImageInstance(image_id, desc.astype(np.float64), boxes.astype(np.float64))


def load_features(path, image_id: Optional[str] = None) -> ImageInstance:
    path = Path(path)
    return parse_features(path.read_bytes(), image_id or path.stem, str(path))


# ---------------------------------------------------------------------------
# manifest and splits


@dataclass
class ImageEntry:
    split: str
    image_id: str
    path: str
    text_ids: list


@dataclass
class Manifest:
    root: Path
    vocab_path: str
    texts_path: str
    images: list = field(default_factory=list)
    hard_negatives: list = field(default_factory=list)  # (text_id, image_id)
    groups: dict = field(default_factory=dict)  # image_id -> group id

    def write(self) -> None:
        lines = ["# dprnn manifest v1", f"vocab\t{self.vocab_path}", f"texts\t{self.texts_path}"]
        for e in self.images:
            lines.append(f"image\t{e.split}\t{e.image_id}\t{e.path}\t{','.join(e.text_ids)}")
        for image_id, group in self.groups.items():
            lines.append(f"group\t{image_id}\t{group}")
        for text_id, image_id in self.hard_negatives:
            lines.append(f"hardneg\t{text_id}\t{image_id}")
        (self.root / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, root) -> "Manifest":
        root = Path(root)
        path = root / "manifest.txt"
        if not path.exists():
            raise ManifestError(f"no manifest at {path}")
        m = cls(root, "", "")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            kind = parts[0]
            if kind == "vocab" and len(parts) == 2:
                m.vocab_path = parts[1]
            elif kind == "texts" and len(parts) == 2:
                m.texts_path = parts[1]
            elif kind == "image" and len(parts) == 5:
                text_ids = [t for t in parts[4].split(",") if t]
                if not text_ids:
                    raise ManifestError(f"{path}:{lineno}: image {parts[2]} has no texts")
                m.images.append(ImageEntry(parts[1], parts[2], parts[3], text_ids))
            elif kind == "group" and len(parts) == 3:
                m.groups[parts[1]] = parts[2]
            elif kind == "hardneg" and len(parts) == 3:
                m.hard_negatives.append((parts[1], parts[2]))
            else:
                raise ManifestError(f"{path}:{lineno}: cannot parse {line!r}")
        m.validate()
        return m

    def validate(self) -> None:
        for rel in (self.vocab_path, self.texts_path):
            if not rel or not (self.root / rel).exists():
                raise ManifestError(f"manifest references missing file {rel!r}")
        for e in self.images:
            if not (self.root / e.path).exists():
                raise ManifestError(f"image {e.image_id}: missing feature file {e.path}")


def read_vocab(path) -> list[str]:
    return Path(path).read_text().splitlines()


def read_texts(path) -> dict[str, list[str]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line:
            text_id, words = line.split("\t", 1)
            out[text_id] = words.split()
    return out


@dataclass
class Split:
    """One split held in memory, ready for batching."""

    name: str
    image_ids: list
    descriptors: np.ndarray  # (N, k, D)
    boxes: np.ndarray
    text_ids: list
    tokens: list  # per text, int arrays
    text_image: np.ndarray  # image index of each text
    texts_of_image: list
    vocab_size: int
    image_groups: np.ndarray
    hard_negatives: list = field(default_factory=list)  # (text index, image index)

    @property
    def n_images(self) -> int:
        return len(self.image_ids)

    @property
    def n_texts(self) -> int:
        return len(self.text_ids)

    def batch(self, images, texts) -> Batch:
        images = np.asarray(images, dtype=np.intp)
        tokens, mask = pad_tokens([self.tokens[t] for t in texts])
        return Batch(
            self.descriptors[images],
            self.boxes[images],
            tokens,
            mask,
            [self.image_ids[i] for i in images],
            [self.text_ids[t] for t in texts],
        )

    def subset(self, images) -> "Split":
        """Images ``images`` with all of their texts (indices are re-based)."""
        images = list(images)
        texts = [t for i in images for t in self.texts_of_image[i]]
        img_pos = {i: n for n, i in enumerate(images)}
        txt_pos = {t: n for n, t in enumerate(texts)}
        return Split(
            self.name,
            [self.image_ids[i] for i in images],
            self.descriptors[images],
            self.boxes[images],
            [self.text_ids[t] for t in texts],
            [self.tokens[t] for t in texts],
            np.array([img_pos[self.text_image[t]] for t in texts], dtype=np.intp),
            [[txt_pos[t] for t in self.texts_of_image[i]] for i in images],
            self.vocab_size,
            self.image_groups[images],
            [(txt_pos[t], img_pos[i]) for t, i in self.hard_negatives if t in txt_pos and i in img_pos],
        )


class Dataset:
    def __init__(self, root):
        self.manifest = Manifest.read(root)
        self.root = self.manifest.root
        self.vocab = read_vocab(self.root / self.manifest.vocab_path)
        self.word_index = {w: i for i, w in enumerate(self.vocab)}
        self.texts = read_texts(self.root / self.manifest.texts_path)
        for e in self.manifest.images:
            for t in e.text_ids:
                if t not in self.texts:
                    raise ManifestError(f"image {e.image_id}: unknown text id {t}")

    @property
    def splits(self) -> list[str]:
        return sorted({e.split for e in self.manifest.images})

    def text_instance(self, text_id: str) -> TextInstance:
        try:
            return TextInstance(text_id, [self.word_index[w] for w in self.texts[text_id]])
        except KeyError as exc:
            raise ManifestError(f"text {text_id}: token {exc} not in vocabulary") from None

    def image_instance(self, entry: ImageEntry) -> ImageInstance:
        return load_features(self.root / entry.path, entry.image_id)

    def split(self, name: str) -> Split:
        entries = [e for e in self.manifest.images if e.split == name]
        if not entries:
            raise ManifestError(f"split {name!r} is empty")
        images = [self.image_instance(e) for e in entries]
        ks = {img.k for img in images}
        if len(ks) != 1:
            raise ManifestError(f"split {name!r} mixes object counts {sorted(ks)}")
        text_ids, tokens, text_image, texts_of_image = [], [], [], []
        for i, e in enumerate(entries):
            own = []
            for t in e.text_ids:
                own.append(len(text_ids))
                text_ids.append(t)
                tokens.append(self.text_instance(t).tokens)
                text_image.append(i)
            texts_of_image.append(own)
        img_pos = {e.image_id: i for i, e in enumerate(entries)}
        txt_pos = {t: i for i, t in enumerate(text_ids)}
        groups = {}
        image_groups = np.array(
            [groups.setdefault(self.manifest.groups.get(e.image_id, e.image_id), len(groups)) for e in entries]
        )
        hard = [(txt_pos[t], img_pos[i]) for t, i in self.manifest.hard_negatives if t in txt_pos and i in img_pos]
        return Split(
            name,
            [e.image_id for e in entries],
            np.stack([img.object_descriptors for img in images]),
            np.stack([img.object_boxes for img in images]),
            text_ids,
            tokens,
            np.array(text_image, dtype=np.intp),
            texts_of_image,
            len(self.vocab),
            image_groups,
            hard,
        )


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    concepts: int = 50
    train_pairs: int = 1000
    val_pairs: int = 100
    test_pairs: int = 200
    k: int = 6
    n: int = 8
    noise: float = 0.1
    mode: str = "plain"
    seed: int = 0
    img_dim: int = 32
    concepts_per_image: int = 3
    fillers: int = 10
    texts_per_image: int = 1
    vocab_budget: int = 5000
    group_code: float = 1.0
    code_dims: int = 8


def _random_boxes(rng: np.random.Generator, count: int) -> np.ndarray:
    wh = rng.uniform(0.05, 0.4, size=(count, 2))
    centers = rng.uniform(0.0, 1.0, size=(count, 2))
    return np.concatenate([wh, centers], axis=1)


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    x = rng.normal(size=(rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _plain_item(rng, spec: SynthSpec, centroids):
    m = min(spec.concepts_per_image, spec.k, spec.n)
    chosen = rng.choice(spec.concepts, size=m, replace=False)
    obj_concepts = np.concatenate([chosen, rng.choice(chosen, size=spec.k - m)])
    rng.shuffle(obj_concepts)
    desc = centroids[obj_concepts] + spec.noise * rng.normal(size=(spec.k, spec.img_dim))
    boxes = _random_boxes(rng, spec.k)
    texts = []
    for _ in range(spec.texts_per_image):
        words = [f"c{c}" for c in rng.permutation(chosen)]
        for _ in range(int(rng.integers(0, spec.n - m + 1))):
            words.insert(int(rng.integers(0, len(words) + 1)), f"f{int(rng.integers(spec.fillers))}")
        texts.append(words)
    return desc, boxes, texts, obj_concepts, obj_concepts


def _pairings(rng, concepts: np.ndarray):
    """Two perfect matchings of the same concepts that share no pair."""
    first = rng.permutation(concepts).reshape(-1, 2)
    while True:
        second = rng.permutation(concepts).reshape(-1, 2)
        a = {frozenset(p) for p in first.tolist()}
        if not any(frozenset(p) in a for p in second.tolist()):
            return first, second


def _scene_boxes(rng, groups: int) -> np.ndarray:
    """Two boxes per group, tight around a group center; group centers kept apart."""
    while True:
        centers = rng.uniform(0.15, 0.85, size=(groups, 2))
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1) + np.eye(groups)
        if gaps.min() > 0.3:
            break
    out = []
    for c in centers:
        for _ in range(2):
            wh = rng.uniform(0.05, 0.2, size=2)
            out.append([*wh, *(c + rng.uniform(-0.03, 0.03, size=2))])
    return np.clip(np.array(out), 0.0, 1.0)


def _grouped_text(rng, pairing: np.ndarray, filler_words: list) -> list:
    words = []
    for pair in rng.permutation(pairing):
        words.extend(f"c{c}" for c in rng.permutation(pair))
    # fillers only go between groups so that paired concepts stay adjacent
    for f in filler_words:
        cut = 2 * int(rng.integers(0, len(pairing) + 1))
        words.insert(cut, f)
    return words


def _partner_codes(rng, groups: int, code_mask: np.ndarray, strength: float) -> np.ndarray:
    """Per group, one partner gets code u and the other -u.

    Each object alone carries a random-looking code; only the sum over a
    grouped pair cancels, so the grouping is a property of object pairs.
    """
    u = np.zeros((groups, code_mask.size))
    u[:, code_mask] = _unit_rows(rng, groups, int(code_mask.sum()))
    pairs = np.stack([u, -u], axis=1)
    return strength * pairs.reshape(2 * groups, -1)


def _order_scene(rng, spec: SynthSpec, centroids, code_mask):
    if spec.k % 2:
        raise ValueError("order_sensitive mode needs an even k")
    groups = spec.k // 2
    concepts = rng.choice(spec.concepts, size=spec.k, replace=False)
    noise = {c: spec.noise * rng.normal(size=spec.img_dim) * ~code_mask for c in concepts}
    boxes = _scene_boxes(rng, groups)
    n_fill = int(rng.integers(0, max(spec.n - spec.k, 0) + 1))
    fill = [f"f{int(rng.integers(spec.fillers))}" for _ in range(n_fill)]
    items = []
    for pairing in _pairings(rng, concepts):
        slot_concepts = pairing.reshape(-1)
        order = rng.permutation(spec.k)
        codes = _partner_codes(rng, groups, code_mask, spec.group_code)
        desc = (np.stack([centroids[c] + noise[c] for c in slot_concepts]) + codes)[order]
        slot_groups = np.repeat(np.arange(groups), 2)
        items.append((desc, boxes[order], [_grouped_text(rng, pairing, fill)], slot_concepts[order], slot_groups[order]))
    return items


def synth_generate(out_dir, spec: SynthSpec) -> Path:
    """Write a synthetic dataset; identical ``spec`` gives a byte-identical tree."""
    if spec.concepts < 2:
        raise ValueError("need at least 2 concepts")
    if spec.mode not in ("plain", "order_sensitive"):
        raise ValueError(f"unknown mode {spec.mode!r}")
    if spec.concepts + spec.fillers > spec.vocab_budget:
        raise VocabularyBudgetError(
            f"{spec.concepts} concepts + {spec.fillers} fillers exceed the vocabulary budget of {spec.vocab_budget}"
        )
    if spec.mode == "order_sensitive" and spec.concepts < spec.k:
        raise ValueError("order_sensitive mode needs at least k concepts")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    centroids = _unit_rows(rng, spec.concepts, spec.img_dim)
    code_mask = np.zeros(spec.img_dim, dtype=bool)
    if spec.mode == "order_sensitive":
        # concepts and grouping codes live in complementary coordinate blocks
        if not 1 <= spec.code_dims < spec.img_dim:
            raise ValueError("code_dims must be in [1, img_dim)")
        code_mask[-spec.code_dims :] = True
        centroids[:, code_mask] = 0.0
        centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    vocab = ["<pad>"] + [f"c{c}" for c in range(spec.concepts)] + [f"f{f}" for f in range(spec.fillers)]
    (out / "vocab.txt").write_text("\n".join(vocab) + "\n")
    manifest = Manifest(out, "vocab.txt", "texts.txt")
    text_lines = []
    notes = []
    counter = 0
    for split, count in (("train", spec.train_pairs), ("val", spec.val_pairs), ("test", spec.test_pairs)):
        made = 0
        while made < count:
            if spec.mode == "plain":
                items = [_plain_item(rng, spec, centroids)]
            else:
                items = _order_scene(rng, spec, centroids, code_mask)[: count - made]
            group = f"g{counter:06d}"
            ids = []
            for desc, boxes, texts, concepts, groups in items:
                image_id = f"{split}{counter:06d}"
                counter += 1
                text_ids = []
                for t, words in enumerate(texts):
                    text_ids.append(f"{image_id}_{t}")
                    text_lines.append(f"{image_id}_{t}\t{' '.join(words)}")
                rel = f"features/{image_id}.feat"
                save_features(ImageInstance(image_id, desc, boxes), out / rel)
                manifest.images.append(ImageEntry(split, image_id, rel, text_ids))
                manifest.groups[image_id] = group
                notes.append(f"{image_id}\t{','.join(map(str, concepts))}\t{','.join(map(str, groups))}")
                ids.append((image_id, text_ids))
                made += 1
            if len(ids) == 2:
                (img_a, texts_a), (img_b, texts_b) = ids
                manifest.hard_negatives += [(t, img_b) for t in texts_a] + [(t, img_a) for t in texts_b]
    (out / "texts.txt").write_text("\n".join(text_lines) + "\n")
    (out / ANNOTATIONS).write_text("\n".join(notes) + "\n")
    manifest.write()
    return out


ANNOTATIONS = "annotations.txt"


def read_annotations(root) -> dict[str, tuple[list[int], list[int]]]:
    """image id -> (concept of each object slot, group label of each object slot)."""
    out = {}
    for line in (Path(root) / ANNOTATIONS).read_text().splitlines():
        image_id, concepts, groups = line.split("\t")
        out[image_id] = ([int(c) for c in concepts.split(",")], [int(g) for g in groups.split(",")])
    return out


def object_groups(concepts, groups) -> list[tuple[int, ...]]:
    """Sorted concept tuple of every object group, as a sorted list."""
    by_group: dict[int, list[int]] = {}
    for c, g in zip(concepts, groups):
        by_group.setdefault(g, []).append(c)
    return sorted(tuple(sorted(v)) for v in by_group.values())


def check_order_sensitive(root) -> None:
    """Generator self-check for every listed hard negative.

    The positive's text and the negative's own text must hold the same token
    multiset, while no object group (concept combination) is shared by the
    two images. Raises ``ManifestError`` on the first violation.
    """
    ds = Dataset(root)
    notes = read_annotations(root)
    image_of_text = {t: e.image_id for e in ds.manifest.images for t in e.text_ids}
    texts_of = {e.image_id: e.text_ids for e in ds.manifest.images}
    if not ds.manifest.hard_negatives:
        raise ManifestError("no hard negatives listed")
    for text_id, negative in ds.manifest.hard_negatives:
        positive = image_of_text[text_id]
        own = sorted(ds.texts[text_id])
        for other in texts_of[negative]:
            if sorted(ds.texts[other]) != own:
                raise ManifestError(f"{text_id} and {other}: token multisets differ")
        pos_groups = object_groups(*notes[positive])
        neg_groups = object_groups(*notes[negative])
        if sorted(sum(pos_groups, ())) != sorted(sum(neg_groups, ())):
            raise ManifestError(f"{positive} and {negative}: object concepts differ")
        if set(pos_groups) & set(neg_groups):
            raise ManifestError(f"{positive} and {negative}: share an object group")
