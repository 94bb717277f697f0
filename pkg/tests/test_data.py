import dataclasses

import numpy as np
import pytest

from vitta import data
from vitta.data import DatasetConfigError, MovingShapesConfig

from conftest import TINY_DATA


class TestRender:
    def test_shape_range_dtype(self):
        clip, label = data.render_clip(TINY_DATA, "train", 3)
        assert clip.shape == (1, TINY_DATA.frames, 16, 16)
        assert clip.dtype == np.float32
        assert 0.0 <= clip.min() and clip.max() <= 1.0
        assert label == 3

    def test_deterministic_per_sample(self):
        a, _ = data.render_clip(TINY_DATA, "val", 5)
        b, _ = data.render_clip(TINY_DATA, "val", 5)
        c, _ = data.render_clip(TINY_DATA, "train", 5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_three_channels(self):
        clip, _ = data.render_clip(dataclasses.replace(TINY_DATA, channels=3), "val", 0)
        assert clip.shape[0] == 3

    def test_flip_map_is_an_involution(self):
        assert all(data.FLIP_LABEL[data.FLIP_LABEL[k]] == k for k in range(8))
        assert data.FLIP_LABEL[data.CLASSES.index("translate-left")] == data.CLASSES.index("translate-right")
        assert data.FLIP_LABEL[data.CLASSES.index("rotate-cw")] == data.CLASSES.index("rotate-ccw")

    def test_frame_marginals_do_not_reveal_class(self):
        # every class draws positions, angles and sizes from the same law; frame statistics should agree
        cfg = MovingShapesConfig()
        means = {k: [] for k in range(8)}
        for sid in range(160):
            clip, label = data.render_clip(cfg, "val", sid)
            means[label].append(clip[0, 7].mean())
        per_class = np.array([np.mean(v) for v in means.values()])
        pooled_sd = np.std(np.concatenate([v for v in means.values()])) / np.sqrt(20)
        assert np.ptp(per_class) < 6 * pooled_sd

    def test_translation_moves_mass(self):
        # a rightward clip's brightness centroid drifts right (modulo wrap)
        cfg = dataclasses.replace(MovingShapesConfig(), max_shapes=1, pixel_noise=0.0)
        right = data.CLASSES.index("translate-right")
        clip, _ = data.render_clip(cfg, "val", 0, label=right)
        f0, f1 = clip[0, 0], clip[0, 4]
        shifts = [np.abs(np.roll(f0, s, axis=1) - f1).sum() for s in range(-5, 6)]
        assert int(np.argmin(shifts)) - 5 > 0


class TestConfig:
    @pytest.mark.parametrize("change,match", [
        ({"frames": 2}, "frames"),
        ({"size": 8}, "size"),
        ({"palette": "nope"}, "palette"),
        ({"speed": (5.0, 9.0)}, "motion"),
        ({"num_classes": 9}, "num_classes"),
    ])
    def test_invalid(self, change, match):
        with pytest.raises(DatasetConfigError, match=match):
            dataclasses.replace(MovingShapesConfig(), **change).validate()


class TestStorage:
    def test_eight_clips_one_per_class(self, tmp_path):
        cfg = dataclasses.replace(TINY_DATA, train_size=8, val_size=8)
        data.generate_dataset(cfg, tmp_path)
        tr = data.load_split(tmp_path, "train")
        assert sorted(tr.labels.tolist()) == list(range(8))

    def test_balanced_classes(self, tiny_clips):
        counts = np.bincount(tiny_clips.labels, minlength=8)
        assert counts.max() - counts.min() <= 1

    def test_manifest_and_round_trip(self, tmp_path):
        cfg = dataclasses.replace(TINY_DATA, train_size=5, val_size=3)
        tr_path, va_path = data.generate_dataset(cfg, tmp_path)
        assert tr_path.read_text().splitlines()[0] == "sample_id,label,file,entry"
        back = data.load_split(tmp_path, "train")
        ref = data.ClipSet.from_config(cfg, "train")
        np.testing.assert_array_equal(back.clips, ref.clips)
        np.testing.assert_array_equal(back.labels, ref.labels)
        assert data.dataset_config(tmp_path) == cfg

    def test_same_seed_byte_identical(self, tmp_path):
        cfg = dataclasses.replace(TINY_DATA, train_size=4, val_size=2)
        data.generate_dataset(cfg, tmp_path / "a")
        data.generate_dataset(cfg, tmp_path / "b")
        for name in ("train-000.vtt", "val-000.vtt", "train.csv", "val.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            data.load_split(tmp_path, "val")

    def test_subset_and_items(self, tiny_clips):
        sub = tiny_clips.subset([2, 0])
        assert len(sub) == 2
        s = sub[0]
        assert s.sample_id == 2 and s.label == tiny_clips.labels[2]
        np.testing.assert_array_equal(s.clip, tiny_clips.clip(2))
