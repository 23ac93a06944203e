"""Synthetic scene generator and dataset directories."""

import json

import numpy as np
import pytest

from aeseg import cam, synthdata
from aeseg.models import Topology, TrainConfig, train_classifier
from aeseg.synthdata import SceneSpec


@pytest.fixture(scope="module")
def default_set():
    return synthdata.generate(SceneSpec(n_train=120, n_val=30))


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSpec:
    @pytest.mark.parametrize("kw", [{"n_classes": 0}, {"n_classes": 9}, {"min_objects": 0},
                                    {"max_objects": 6}, {"image_size": (30, 30)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SceneSpec(**kw)


class TestGenerator:
    def test_deterministic_directory(self, tmp_path):
        spec = SceneSpec(n_train=6, n_val=2, seed=3)
        synthdata.generate_dataset(spec, tmp_path / "a")
        synthdata.generate_dataset(spec, tmp_path / "b")
        assert tree(tmp_path / "a") == tree(tmp_path / "b")

    def test_seed_changes_output(self):
        a = synthdata.render_sample(SceneSpec(seed=1), 0, "train")
        b = synthdata.render_sample(SceneSpec(seed=2), 0, "train")
        assert not np.array_equal(a.image, b.image)

    def test_per_image_substreams(self):
        # an image depends on (seed, index) only, not on the split sizes
        a = synthdata.generate(SceneSpec(n_train=3, n_val=1)).samples[1]
        b = synthdata.generate(SceneSpec(n_train=9, n_val=1)).samples[1]
        np.testing.assert_array_equal(a.image, b.image)

    def test_labels_match_gt(self, default_set):
        for s in default_set.samples:
            present = tuple(int(v) - 1 for v in np.unique(s.gt) if v)
            assert present == s.labels

    def test_object_counts(self, default_set):
        counts = {len(s.labels) for s in default_set.samples}
        assert counts == {1, 2, 3}

    def test_border_margin(self, default_set):
        for s in default_set.samples:
            ys, xs = np.nonzero(s.gt)
            assert ys.min() >= 4 and xs.min() >= 4
            assert ys.max() < 60 and xs.max() < 60

    def test_marker_is_small(self, default_set):
        marker = body = 0
        for s in default_set.samples:
            for rec in s.boxes:
                assert rec["marker_pixels"] < 0.25 * rec["body_pixels"]
                marker += rec["marker_pixels"]
                body += rec["body_pixels"]
        assert marker / body < 0.25

    def test_markers_inside_objects(self, default_set):
        for s in default_set.samples:
            assert (s.gt[s.marker_mask] > 0).all()

    def test_objects_do_not_overlap(self, default_set):
        for s in default_set.samples:
            for rec in s.boxes:
                c = rec["class"]
                y0, x0, y1, x1 = rec["box"]
                assert (s.gt[y0:y1, x0:x1] == c + 1).sum() == rec["body_pixels"]

    def test_pixels_are_8bit(self, default_set):
        img = default_set.samples[0].image
        np.testing.assert_array_equal(np.round(img * 255) / 255, img)

    def test_low_contrast_body_is_faint(self, default_set):
        low, high = [], []
        for s in default_set.samples:
            for c in s.labels:
                body = (s.gt == c + 1) & ~s.marker_mask
                ring = (s.gt == 0)
                gap = np.linalg.norm(s.image[body].mean(axis=0) - s.image[ring].mean(axis=0))
                (low if c in (4,) else high).append(gap)
        assert max(low) < min(high)


class TestDirectory:
    def test_round_trip(self, tmp_path):
        spec = SceneSpec(n_train=4, n_val=2, seed=9)
        ds = synthdata.generate_dataset(spec, tmp_path)
        back = synthdata.load_dataset(tmp_path, with_gt=True)
        assert back.spec == spec
        for a, b in zip(ds.samples, back.samples):
            assert (a.id, a.labels, a.split) == (b.id, b.labels, b.split)
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.gt, b.gt)

    def test_gt_hidden_by_default(self, tmp_path):
        synthdata.generate_dataset(SceneSpec(n_train=2, n_val=1), tmp_path)
        assert not any(s.gt.any() for s in synthdata.load_dataset(tmp_path).samples)

    def test_manifest_schema(self, tmp_path):
        synthdata.generate_dataset(SceneSpec(n_train=2, n_val=1), tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["version"] == synthdata.MANIFEST_VERSION
        assert [r["split"] for r in manifest["images"]] == ["train", "train", "val"]
        rec = manifest["images"][0]
        assert set(rec) == {"id", "labels", "split", "objects"}
        assert set(rec["objects"][0]) == {"class", "box", "marker_pixels", "body_pixels"}

    def test_version_mismatch(self, tmp_path):
        synthdata.generate_dataset(SceneSpec(n_train=1, n_val=0), tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        m["version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValueError):
            synthdata.load_dataset(tmp_path)


class TestMarkerDominatesCam:
    def test_marker_hotter_than_body(self):
        ds = synthdata.generate(SceneSpec(n_train=160, n_val=0))
        x, y, _ = ds.arrays("train")
        model, _ = train_classifier(x, y, TrainConfig(), Topology())
        wins = total = 0
        for s in ds.samples:
            if len(s.labels) != 1:
                continue
            values = cam.compute_cam(model, s.image, s.labels[0]).values
            body = (s.gt > 0) & ~s.marker_mask
            wins += values[s.marker_mask].mean() > values[body].mean()
            total += 1
        assert total >= 30
        assert wins / total >= 0.8
