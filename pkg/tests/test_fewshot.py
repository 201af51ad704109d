"""Datasets, episodes, noise, splits and the train/evaluate loops."""

import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscf.backbone import BackboneConfig
from sscf.fewshot import (
    Dataset,
    DatasetError,
    NoiseSpec,
    SplitSpec,
    TrainConfig,
    TrainingDiverged,
    add_gaussian_noise,
    evaluate,
    load_event_dataset,
    load_image_dataset,
    make_synthetic_glyphs,
    read_spk,
    sample_episode,
    train,
    write_spk,
)
from sscf.fewshot.data import decode_spk, encode_spk, read_pgm, write_pgm
from sscf.model import ModelConfig, SSCFNet


@pytest.fixture(scope="module")
def glyphs():
    return make_synthetic_glyphs(12, 8, 16, np.random.default_rng(0))


def small_model(num_train=8, seed=0, T=1):
    cfg = ModelConfig(
        backbone=BackboneConfig(timesteps=T, input_size=16, channel_divisor=16),
        compact_channels=8,
        hidden_channels=2,
        num_classes_train=num_train,
    )
    return SSCFNet(cfg, np.random.default_rng(seed))


def responsive(model):
    """Shift eval-mode BN statistics so an untrained network actually spikes."""
    for name, buf in model.named_buffers():
        if name.startswith("backbone.") and name.endswith("running_mean"):
            buf[:] = -0.5
    return model


class TestEpisodes:
    def test_cardinalities_and_disjointness(self, glyphs):
        ep = sample_episode(glyphs, np.arange(12), 5, 1, 1, np.random.default_rng(1))
        assert ep.support.shape[0] == 5 and ep.query.shape[0] == 5
        assert len(set(ep.classes)) == 5
        assert not set(ep.support_index) & set(ep.query_index)
        np.testing.assert_array_equal(glyphs.labels[ep.support_index], ep.support_class_ids)
        np.testing.assert_array_equal(glyphs.labels[ep.query_index], ep.query_class_ids)

    def test_per_class_counts(self, glyphs):
        ep = sample_episode(glyphs, np.arange(12), 4, 3, 2, np.random.default_rng(2))
        assert np.bincount(ep.support_labels).tolist() == [3] * 4
        assert np.bincount(ep.query_labels).tolist() == [2] * 4

    def test_full_way_uses_every_class(self, glyphs):
        ep = sample_episode(glyphs, np.arange(12), 12, 5, 1, np.random.default_rng(3))
        assert sorted(ep.classes.tolist()) == list(range(12))

    def test_same_seed_same_episode(self, glyphs):
        a = sample_episode(glyphs, np.arange(12), 5, 1, 3, np.random.default_rng(4))
        b = sample_episode(glyphs, np.arange(12), 5, 1, 3, np.random.default_rng(4))
        np.testing.assert_array_equal(a.support_index, b.support_index)
        np.testing.assert_array_equal(a.query_index, b.query_index)

    def test_insufficient_items_names_class(self, glyphs):
        with pytest.raises(DatasetError, match="glyph_"):
            sample_episode(glyphs, np.arange(12), 2, 5, 4, np.random.default_rng(5))

    def test_too_many_ways(self, glyphs):
        with pytest.raises(DatasetError):
            sample_episode(glyphs, np.arange(3), 4, 1, 1, np.random.default_rng(6))

    @given(st.integers(1, 6), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_integrity_property(self, n, k, q, seed):
        ds = make_synthetic_glyphs(6, 7, 16, np.random.default_rng(7))
        ep = sample_episode(ds, np.arange(6), n, k, q, np.random.default_rng(seed))
        assert len(ep.support_index) == n * k and len(ep.query_index) == n * q
        assert len(set(ep.support_index) | set(ep.query_index)) == n * (k + q)


class TestImages:
    def test_pgm_normalisation(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([128, 0, 255, 128]))
        img = read_pgm(path)
        assert img.shape == (1, 2, 2)
        assert img[0, 0, 0] == pytest.approx(128 / 255)
        assert img[0, 0, 0] == pytest.approx(0.50196, abs=5e-6)

    def test_tree_loading(self, tmp_path):
        rng = np.random.default_rng(8)
        for cls in ("zeta", "alpha"):
            (tmp_path / cls).mkdir()
            for i in range(3):
                write_pgm(tmp_path / cls / f"{i}.pgm", rng.random((16, 16)))
        ds = load_image_dataset(tmp_path, 16)
        assert len(ds) == 6 and ds.num_classes == 2
        assert ds.class_names == ["alpha", "zeta"]

    def test_resize(self, tmp_path):
        (tmp_path / "c").mkdir()
        write_pgm(tmp_path / "c" / "0.pgm", np.ones((40, 40)))
        assert load_image_dataset(tmp_path, 32).items.shape == (1, 1, 32, 32)

    def test_non_square_resize_rejected(self, tmp_path):
        (tmp_path / "c").mkdir()
        write_pgm(tmp_path / "c" / "0.pgm", np.ones((20, 30)))
        with pytest.raises(DatasetError, match="0.pgm"):
            load_image_dataset(tmp_path, 32)

    def test_unreadable_file_named(self, tmp_path):
        (tmp_path / "c").mkdir()
        (tmp_path / "c" / "bad.pgm").write_bytes(b"not an image")
        with pytest.raises(DatasetError, match="bad.pgm"):
            load_image_dataset(tmp_path)

    def test_write_read_round_trip(self, tmp_path):
        img = np.round(np.random.default_rng(9).random((16, 16)) * 255) / 255
        write_pgm(tmp_path / "x.pgm", img)
        np.testing.assert_allclose(read_pgm(tmp_path / "x.pgm")[0], img, atol=1e-12)


class TestEvents:
    def test_payload_length(self):
        blob = encode_spk(np.zeros((4, 2, 8, 8)))
        assert len(blob) - 20 == 512
        assert blob[:4] == b"SPK1"

    def test_round_trip(self, tmp_path):
        ev = (np.random.default_rng(10).random((3, 2, 5, 4)) < 0.3).astype(float)
        write_spk(tmp_path / "a.spk", ev)
        np.testing.assert_array_equal(read_spk(tmp_path / "a.spk"), ev)

    def test_all_zero(self):
        np.testing.assert_array_equal(decode_spk(encode_spk(np.zeros((1, 1, 2, 2)))), 0.0)

    def test_bad_magic(self):
        with pytest.raises(DatasetError, match="magic"):
            decode_spk(b"SPK2" + bytes(16))

    def test_bad_payload(self):
        blob = encode_spk(np.zeros((2, 1, 2, 2)))
        with pytest.raises(DatasetError, match="payload"):
            decode_spk(blob[:-1])

    def test_non_binary_values(self):
        blob = bytearray(encode_spk(np.zeros((1, 1, 1, 2))))
        blob[-1] = 3
        with pytest.raises(DatasetError, match="0 or 1"):
            decode_spk(bytes(blob))

    def test_dataset(self, tmp_path):
        rng = np.random.default_rng(11)
        for cls in ("b", "a"):
            (tmp_path / cls).mkdir()
            for i in range(2):
                write_spk(tmp_path / cls / f"{i}.spk", (rng.random((2, 1, 4, 4)) < 0.5).astype(float))
        ds = load_event_dataset(tmp_path)
        assert ds.is_events and ds.items.shape == (4, 2, 1, 4, 4)
        assert ds.class_names == ["a", "b"]


class TestSynthetic:
    def test_shape_and_range(self, glyphs):
        assert glyphs.items.shape == (96, 1, 16, 16)
        assert glyphs.items.min() >= 0 and glyphs.items.max() <= 1

    def test_deterministic(self):
        a = make_synthetic_glyphs(5, 3, 16, np.random.default_rng(12))
        b = make_synthetic_glyphs(5, 3, 16, np.random.default_rng(12))
        np.testing.assert_array_equal(a.items, b.items)

    def test_separation_floor(self):
        ds = make_synthetic_glyphs(10, 2, 32, np.random.default_rng(13), min_separation=4.0)
        for i, j in itertools.combinations(range(10), 2):
            assert np.linalg.norm(ds.templates[i] - ds.templates[j]) >= 4.0

    def test_single_item_per_class(self):
        ds = make_synthetic_glyphs(4, 1, 16, np.random.default_rng(14))
        with pytest.raises(DatasetError):
            sample_episode(ds, np.arange(4), 2, 1, 1, np.random.default_rng(0))

    def test_items_closer_to_own_template(self):
        ds = make_synthetic_glyphs(8, 5, 32, np.random.default_rng(15))
        d = np.linalg.norm(ds.items[:, 0, None] - ds.templates[None], axis=(2, 3))
        # jitter moves thin strokes, so raw pixels only need to beat chance (1/8) clearly
        assert np.mean(d.argmin(axis=1) == ds.labels) > 0.6

    def test_resolution_floor(self):
        with pytest.raises(ValueError, match="16"):
            make_synthetic_glyphs(2, 2, 15, np.random.default_rng(0))


class TestNoise:
    def test_zero_rate_identity(self):
        x = np.random.default_rng(16).random((1, 8, 8))
        np.testing.assert_array_equal(add_gaussian_noise(x, NoiseSpec(0.0)), x)

    def test_reproducible(self):
        x = np.random.default_rng(17).random((1, 8, 8))
        np.testing.assert_array_equal(
            add_gaussian_noise(x, NoiseSpec(0.4, seed=3)), add_gaussian_noise(x, NoiseSpec(0.4, seed=3))
        )

    @given(st.floats(0, 1), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_clamped(self, rate, seed):
        x = np.random.default_rng(seed).random((1, 6, 6))
        out = add_gaussian_noise(x, NoiseSpec(rate, seed))
        assert out.min() >= 0 and out.max() <= 1

    def test_rate_range(self):
        with pytest.raises(ValueError):
            NoiseSpec(1.5)

    def test_queries_only(self, glyphs):
        ep = sample_episode(glyphs, np.arange(12), 3, 1, 2, np.random.default_rng(18))
        noisy = ep.with_noise(NoiseSpec(0.4), np.random.default_rng(0), queries_only=True)
        np.testing.assert_array_equal(noisy.support, ep.support)
        assert not np.array_equal(noisy.query, ep.query)


class TestSplit:
    def test_overlap_rejected(self):
        with pytest.raises(DatasetError, match="train and test"):
            SplitSpec(["a", "b"], [], ["b", "c"])

    def test_default_is_disjoint(self, glyphs):
        s = SplitSpec.default(glyphs, 8, 2)
        assert len(s.train) == 8 and len(s.val) == 2 and len(s.test) == 2
        assert not set(s.train) & set(s.test)

    def test_json_round_trip(self, glyphs, tmp_path):
        s = SplitSpec.default(glyphs, 8)
        (tmp_path / "split.json").write_text(s.to_json())
        assert SplitSpec.load(tmp_path / "split.json") == s

    def test_no_test_classes(self, glyphs):
        with pytest.raises(DatasetError):
            SplitSpec.default(glyphs, 12)


class TestTraining:
    def test_records_and_determinism(self, glyphs):
        cfg = TrainConfig(episodes=3, n_way=3, q_query=2, seed=4)
        streams = []
        for _ in range(2):
            buf = io.StringIO()
            recs = train(small_model(), glyphs, np.arange(8), cfg, metrics_file=buf)
            streams.append(buf.getvalue())
        assert streams[0] == streams[1]
        lines = [json.loads(line) for line in streams[0].splitlines()]
        assert [r["episode"] for r in lines] == [0, 1, 2]
        assert set(lines[0]) == {"episode", "loss_tet", "loss_info", "loss_total", "accuracy"}
        assert lines == recs

    def test_timing_sidecar(self, glyphs):
        timing = io.StringIO()
        train(small_model(), glyphs, np.arange(8), TrainConfig(episodes=2, n_way=2, q_query=1), timing_file=timing)
        rows = [json.loads(line) for line in timing.getvalue().splitlines()]
        assert [r["episode"] for r in rows] == [0, 1]
        assert all(r["elapsed_ms"] > 0 for r in rows)

    def test_loss_blend_recorded(self, glyphs):
        recs = train(small_model(), glyphs, np.arange(8), TrainConfig(episodes=2, n_way=3, q_query=2, lam=0.3))
        for r in recs:
            assert r["loss_total"] == pytest.approx(0.3 * r["loss_tet"] + 0.7 * r["loss_info"], abs=1e-12)

    def test_lambda_one_skips_embedding_gradients(self, glyphs):
        model = small_model()
        before = model.cfc.conv4d_1.weight.data.copy()
        recs = train(model, glyphs, np.arange(8), TrainConfig(episodes=2, n_way=3, q_query=2, lam=1.0, weight_decay=0))
        np.testing.assert_array_equal(model.cfc.conv4d_1.weight.data, before)
        assert all(r["loss_total"] == r["loss_tet"] for r in recs)

    def test_nan_aborts(self, glyphs):
        model = small_model()
        model.head.weight.data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="episode 0"):
            train(model, glyphs, np.arange(8), TrainConfig(episodes=2, n_way=2, q_query=1))

    def test_head_size_checked(self, glyphs):
        with pytest.raises(ValueError, match="head"):
            train(small_model(num_train=5), glyphs, np.arange(8), TrainConfig(episodes=1))


class TestEvaluate:
    def test_one_way_is_perfect(self, glyphs):
        res = evaluate(small_model(), glyphs, np.arange(8, 12), 5, n_way=1, q_query=2)
        assert res.mean == 1.0

    def test_untrained_near_chance(self, glyphs):
        res = evaluate(small_model(), glyphs, np.arange(8, 12), 200, n_way=4, q_query=2, seed=3)
        assert 0.15 <= res.mean <= 0.35  # chance 0.25

    def test_untrained_five_way_band(self):
        ds = make_synthetic_glyphs(10, 4, 16, np.random.default_rng(19))
        res = evaluate(responsive(small_model()), ds, np.arange(10), 200, n_way=5, q_query=1, seed=4)
        assert 0.1 <= res.mean <= 0.3

    def test_ci_scaling(self, glyphs):
        model = responsive(small_model())
        a = evaluate(model, glyphs, np.arange(12), 50, n_way=4, q_query=2, seed=5)
        b = evaluate(model, glyphs, np.arange(12), 200, n_way=4, q_query=2, seed=5)
        assert a.ci95 > 0
        assert 0.35 <= b.ci95 / a.ci95 <= 0.65

    def test_deterministic_and_formatted(self, glyphs):
        model = responsive(small_model())
        a = evaluate(model, glyphs, np.arange(12), 6, n_way=3, seed=6)
        b = evaluate(model, glyphs, np.arange(12), 6, n_way=3, seed=6)
        np.testing.assert_array_equal(a.accuracies, b.accuracies)
        assert "±" in str(a)

    def test_threads_do_not_change_result(self, glyphs, monkeypatch):
        model = responsive(small_model())
        a = evaluate(model, glyphs, np.arange(12), 6, n_way=3, seed=7)
        monkeypatch.setenv("SSCF_THREADS", "3")
        b = evaluate(model, glyphs, np.arange(12), 6, n_way=3, seed=7)
        np.testing.assert_array_equal(a.accuracies, b.accuracies)

    def test_restores_training_mode(self, glyphs):
        model = small_model()
        evaluate(model, glyphs, np.arange(8, 12), 1, n_way=2, q_query=1)
        assert model.training

    def test_dataset_length_check(self):
        with pytest.raises(DatasetError):
            Dataset(np.zeros((3, 1, 4, 4)), [0, 1], ["a", "b"])
