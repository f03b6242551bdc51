import filecmp
from collections import Counter

import numpy as np
import pytest

from dprnn.data import (
    BadMagicError,
    Dataset,
    ManifestError,
    SynthSpec,
    TruncatedFileError,
    VersionMismatchError,
    VocabularyBudgetError,
    check_order_sensitive,
    feature_bytes,
    feature_file_size,
    load_features,
    object_groups,
    parse_features,
    read_annotations,
    save_features,
    synth_generate,
)
from dprnn.encoders import BoxRangeError, ImageInstance


def random_instance(rng, k=5, dim=7, name="img"):
    desc = rng.normal(size=(k, dim)).astype(np.float32).astype(np.float64)
    boxes = rng.uniform(0, 1, size=(k, 4)).astype(np.float32).astype(np.float64)
    return ImageInstance(name, desc, boxes)


def trees_equal(a, b) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(trees_equal(a / d, b / d) for d in cmp.common_dirs)


class TestFeatureFile:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        path = tmp_path / "a.feat"
        save_features(random_instance(rng), path)
        save_features(load_features(path), tmp_path / "b.feat")
        assert path.read_bytes() == (tmp_path / "b.feat").read_bytes()

    def test_values_survive(self, tmp_path, rng):
        inst = random_instance(rng)
        save_features(inst, tmp_path / "a.feat")
        back = load_features(tmp_path / "a.feat")
        np.testing.assert_array_equal(back.object_descriptors, inst.object_descriptors)
        np.testing.assert_array_equal(back.object_boxes, inst.object_boxes)
        assert back.id == "a"

    def test_paper_scale_size(self):
        assert feature_file_size(36, 2048) == 16 + 36 * 2052 * 4

    def test_size_matches_bytes(self, rng):
        assert len(feature_bytes(random_instance(rng, 3, 11))) == feature_file_size(3, 11)

    def test_truncation_names_lengths(self, rng):
        raw = feature_bytes(random_instance(rng, 2, 3))
        with pytest.raises(TruncatedFileError) as err:
            parse_features(raw[:-4])
        assert str(len(raw)) in str(err.value) and str(len(raw) - 4) in str(err.value)
        with pytest.raises(TruncatedFileError):
            parse_features(raw[:5])

    def test_bad_magic(self, rng):
        raw = feature_bytes(random_instance(rng))
        with pytest.raises(BadMagicError):
            parse_features(b"XXXXXXXX" + raw[8:])

    def test_version_mismatch(self, rng):
        raw = bytearray(feature_bytes(random_instance(rng)))
        raw[8] = 2
        with pytest.raises(VersionMismatchError):
            parse_features(bytes(raw))

    def test_box_out_of_range(self, rng):
        inst = random_instance(rng, 1, 2)
        raw = bytearray(feature_bytes(inst))
        raw[-4:] = np.array([1.5], dtype="<f4").tobytes()
        with pytest.raises(BoxRangeError):
            parse_features(bytes(raw))
        inst.object_boxes[0, 0] = -0.1
        with pytest.raises(BoxRangeError):
            feature_bytes(inst)


@pytest.fixture(scope="module")
def plain_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("plain")
    spec = SynthSpec(concepts=12, train_pairs=20, val_pairs=4, test_pairs=6, k=5, n=6, noise=0.0, seed=3)
    return synth_generate(root, spec)


class TestSynth:
    def test_same_seed_same_tree(self, tmp_path):
        spec = SynthSpec(concepts=8, train_pairs=6, val_pairs=2, test_pairs=2, seed=7)
        assert trees_equal(synth_generate(tmp_path / "a", spec), synth_generate(tmp_path / "b", spec))

    def test_different_seed_differs(self, tmp_path):
        a = synth_generate(tmp_path / "a", SynthSpec(concepts=8, train_pairs=6, val_pairs=0, test_pairs=2, seed=1))
        b = synth_generate(tmp_path / "b", SynthSpec(concepts=8, train_pairs=6, val_pairs=0, test_pairs=2, seed=2))
        assert not trees_equal(a, b)

    def test_zero_noise_objects_are_centroids(self, plain_root):
        ds = Dataset(plain_root)
        notes = read_annotations(plain_root)
        seen = {}
        for e in ds.manifest.images:
            inst = ds.image_instance(e)
            for row, concept in zip(inst.object_descriptors, notes[e.image_id][0]):
                if concept in seen:
                    np.testing.assert_array_equal(row, seen[concept])
                seen[concept] = row
                assert np.linalg.norm(row) == pytest.approx(1.0, abs=1e-6)

    def test_text_lists_image_concepts(self, plain_root):
        ds = Dataset(plain_root)
        notes = read_annotations(plain_root)
        for e in ds.manifest.images:
            concepts = {f"c{c}" for c in notes[e.image_id][0]}
            words = ds.texts[e.text_ids[0]]
            assert {w for w in words if w.startswith("c")} == concepts
            assert len(words) <= 6

    def test_splits(self, plain_root):
        ds = Dataset(plain_root)
        assert ds.splits == ["test", "train", "val"]
        split = ds.split("test")
        assert split.n_images == split.n_texts == 6
        assert split.descriptors.shape == (6, 5, 32)

    def test_vocabulary_budget(self, tmp_path):
        with pytest.raises(VocabularyBudgetError):
            synth_generate(tmp_path, SynthSpec(concepts=100, fillers=10, vocab_budget=50))

    def test_needs_two_concepts(self, tmp_path):
        with pytest.raises(ValueError):
            synth_generate(tmp_path, SynthSpec(concepts=1))

    def test_several_texts_per_image(self, tmp_path):
        root = synth_generate(tmp_path, SynthSpec(concepts=8, train_pairs=4, val_pairs=0, test_pairs=3, texts_per_image=5))
        split = Dataset(root).split("test")
        assert split.n_texts == 15
        assert all(len(t) == 5 for t in split.texts_of_image)


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    spec = SynthSpec(concepts=20, train_pairs=12, val_pairs=0, test_pairs=8, mode="order_sensitive", seed=5)
    return synth_generate(tmp_path_factory.mktemp("os"), spec)


class TestOrderSensitive:
    def test_self_check(self, root):
        check_order_sensitive(root)

    def test_twins_share_tokens_but_not_groups(self, root):
        ds = Dataset(root)
        notes = read_annotations(root)
        image_of = {t: e.image_id for e in ds.manifest.images for t in e.text_ids}
        assert len(ds.manifest.hard_negatives) == 20
        for text_id, negative in ds.manifest.hard_negatives:
            positive = image_of[text_id]
            neg_text = next(e.text_ids[0] for e in ds.manifest.images if e.image_id == negative)
            assert Counter(ds.texts[text_id]) == Counter(ds.texts[neg_text])
            assert ds.texts[text_id] != ds.texts[neg_text]
            pos, neg = object_groups(*notes[positive]), object_groups(*notes[negative])
            assert Counter(sum(pos, ())) == Counter(sum(neg, ()))
            assert not set(pos) & set(neg)

    def test_partners_are_adjacent_in_text(self, root):
        ds = Dataset(root)
        notes = read_annotations(root)
        for e in ds.manifest.images:
            concepts = [int(w[1:]) for w in ds.texts[e.text_ids[0]] if w.startswith("c")]
            pairs = {tuple(sorted(concepts[i : i + 2])) for i in range(0, len(concepts), 2)}
            assert pairs == set(object_groups(*notes[e.image_id]))

    def test_self_check_catches_a_broken_twin(self, tmp_path):
        spec = SynthSpec(concepts=20, train_pairs=2, val_pairs=0, test_pairs=0, mode="order_sensitive", seed=5)
        root = synth_generate(tmp_path, spec)
        notes = (root / "annotations.txt").read_text().splitlines()
        first = notes[0].split("\t")
        notes[1] = "\t".join([notes[1].split("\t")[0], first[1], first[2]])
        (root / "annotations.txt").write_text("\n".join(notes) + "\n")
        with pytest.raises(ManifestError):
            check_order_sensitive(root)


class TestManifest:
    def test_dangling_feature_file(self, tmp_path):
        root = synth_generate(tmp_path, SynthSpec(concepts=8, train_pairs=3, val_pairs=0, test_pairs=1))
        next((root / "features").iterdir()).unlink()
        with pytest.raises(ManifestError):
            Dataset(root)

    def test_dangling_text(self, tmp_path):
        root = synth_generate(tmp_path, SynthSpec(concepts=8, train_pairs=3, val_pairs=0, test_pairs=1))
        lines = (root / "texts.txt").read_text().splitlines()
        (root / "texts.txt").write_text("\n".join(lines[1:]) + "\n")
        with pytest.raises(ManifestError):
            Dataset(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            Dataset(tmp_path)

    def test_garbage_line(self, tmp_path):
        root = synth_generate(tmp_path, SynthSpec(concepts=8, train_pairs=3, val_pairs=0, test_pairs=1))
        with (root / "manifest.txt").open("a") as fh:
            fh.write("nonsense\tline\n")
        with pytest.raises(ManifestError):
            Dataset(root)

    def test_unknown_split(self, plain_root):
        with pytest.raises(ManifestError):
            Dataset(plain_root).split("holdout")
