import hashlib
import json

import numpy as np
import pytest

from tddhad.errors import ConfigError, LoadError, NumericError
from tddhad.hsi import HsiCube, normalize_cube
from tddhad.net import NetworkConfig, TDDNet
from tddhad.pipeline import (
    Checkpoint,
    TrainConfig,
    adapt_bands,
    average_segment_maps,
    band_segments,
    infer,
    infer_segment,
    load_checkpoint,
    load_config_file,
    save_checkpoint,
    train,
)
from tddhad.synthetic import synthetic_cube

TINY = dict(encoder_channels=[4, 4, 8, 8, 8, 8], heads=2, lam_window=(3, 3))


def tiny_checkpoint(bands=6, seed=0):
    return Checkpoint.from_network(TDDNet(NetworkConfig(in_bands=bands, **TINY), seed=seed))


def _digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
    return h.hexdigest()


class TestBandSegments:
    def test_equal(self):
        assert band_segments(162, 162) == [(0, 162)]

    def test_tail_rule(self):
        assert band_segments(186, 162) == [(0, 162), (24, 186)]
        assert band_segments(45, 20) == [(0, 20), (20, 40), (25, 45)]
        assert band_segments(40, 20) == [(0, 20), (20, 40)]

    def test_union_covers_all_bands(self):
        for b2 in range(20, 90):
            covered = set()
            for a, b in band_segments(b2, 20):
                assert b - a == 20
                covered |= set(range(a, b))
            assert covered == set(range(b2))

    def test_interpolation_branch(self):
        assert band_segments(46, 162) is None


class TestAdaptBands:
    def test_passthrough(self):
        cube = synthetic_cube(4, 4, 7, seed=1)
        (out,) = adapt_bands(cube, 7)
        np.testing.assert_array_equal(out.data, cube.data)

    def test_interpolation_endpoints_exact(self):
        cube = synthetic_cube(3, 3, 46, seed=2)
        (out,) = adapt_bands(cube, 162)
        assert out.bands == 162
        np.testing.assert_array_equal(out.data[..., 0], cube.data[..., 0])
        np.testing.assert_array_equal(out.data[..., -1], cube.data[..., -1])

    def test_interpolation_is_linear(self):
        ramp = np.broadcast_to(np.arange(5.0), (2, 2, 5)).copy()
        (out,) = adapt_bands(HsiCube(ramp), 9)
        np.testing.assert_allclose(out.data[0, 0], np.linspace(0, 4, 9))

    def test_segments_are_slices(self):
        cube = synthetic_cube(3, 3, 45, seed=3)
        segs = adapt_bands(cube, 20)
        np.testing.assert_array_equal(segs[2].data, cube.data[..., 25:45])


class TestInfer:
    def test_single_tile_equals_network(self):
        ckpt = tiny_checkpoint()
        cube = HsiCube(np.random.default_rng(0).random((10, 10, 6)).astype(np.float32))
        out = infer(cube, ckpt, patch_size=10).scores
        direct = ckpt.network().predict(cube.data[None])[0]
        np.testing.assert_allclose(out, direct, rtol=0, atol=1e-7)

    def test_constant_network_averages_to_constant(self):
        cube = HsiCube(np.zeros((11, 13, 2)))
        out = infer_segment(cube, lambda x: np.full(x.shape[:3], 0.37), 4, 3)
        np.testing.assert_array_equal(out, 0.37)

    def test_segment_average(self):
        m1 = np.random.default_rng(1).random((4, 4))
        m2 = np.random.default_rng(2).random((4, 4))
        np.testing.assert_array_equal(average_segment_maps([m1, m2]), (m1 + m2) / 2)

    def test_transfer_shapes_and_range(self):
        ckpt = tiny_checkpoint(bands=6)
        for bands in (3, 6, 14):
            out = infer(synthetic_cube(12, 9, bands, seed=bands), ckpt, patch_size=5)
            assert out.scores.shape == (12, 9)
            assert out.scores.min() >= 0 and out.scores.max() <= 1

    def test_small_image_shrinks_patch(self):
        out = infer(synthetic_cube(6, 7, 6, seed=0), tiny_checkpoint(), patch_size=10)
        assert out.scores.shape == (6, 7)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ckpt = tiny_checkpoint()
        ckpt.train_meta["steps"] = 0
        save_checkpoint(ckpt, tmp_path / "model")
        back = load_checkpoint(tmp_path / "model.ckpt.json")
        assert back.config == ckpt.config and back.train_meta == {"steps": 0}
        for k in ckpt.params:
            np.testing.assert_array_equal(back.params[k], ckpt.params[k])
        cube = synthetic_cube(10, 10, 6, seed=4)
        np.testing.assert_array_equal(infer(cube, back).scores, infer(cube, ckpt).scores)

    def test_sidecar_keys(self, tmp_path):
        save_checkpoint(tiny_checkpoint(), tmp_path / "m")
        meta = json.loads((tmp_path / "m.ckpt.json").read_text())
        assert set(meta) == {"config", "in_bands", "seed", "train_meta"}

    def test_mismatched_bundle(self, tmp_path):
        save_checkpoint(tiny_checkpoint(bands=6), tmp_path / "m")
        meta = json.loads((tmp_path / "m.ckpt.json").read_text())
        meta["config"]["encoder_channels"] = [4, 4, 4, 4, 4, 4]
        (tmp_path / "m.ckpt.json").write_text(json.dumps(meta))
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / "m")

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / "absent")


@pytest.fixture(scope="module")
def cube():
    return normalize_cube(synthetic_cube(16, 16, 6, seed=0))


class TestTrain:
    def test_zero_steps_is_initialization(self, cube):
        cfg = TrainConfig(patch_size=8, n_samples=4, steps=0, seed=3)
        ckpt = train(cube, cfg, NetworkConfig(in_bands=6, **TINY))
        init = TDDNet(NetworkConfig(in_bands=6, **TINY), seed=3).state_dict()
        for k in init:
            np.testing.assert_array_equal(ckpt.params[k], init[k])

    def test_deterministic(self, cube):
        cfg = TrainConfig(patch_size=8, n_samples=20, batch_size=4, steps=5, seed=7)
        a = train(cube, cfg, NetworkConfig(in_bands=6, **TINY))
        b = train(cube, cfg, NetworkConfig(in_bands=6, **TINY))
        assert _digest(a) == _digest(b)
        c = train(cube, TrainConfig(patch_size=8, n_samples=20, batch_size=4, steps=5, seed=8), NetworkConfig(in_bands=6, **TINY))
        assert _digest(a) != _digest(c)

    def test_meta_records_losses(self, cube):
        cfg = TrainConfig(patch_size=8, n_samples=10, batch_size=2, steps=4, seed=0, log_every=2)
        meta = train(cube, cfg, NetworkConfig(in_bands=6, **TINY), source_id="c").train_meta
        assert meta["source"] == "c" and meta["steps"] == 4
        assert [s for s, _ in meta["history"]] == [2, 4]
        assert np.isfinite(meta["initial_loss"]) and np.isfinite(meta["final_loss"])

    def test_band_mismatch(self, cube):
        with pytest.raises(ConfigError):
            train(cube, TrainConfig(patch_size=8, steps=0, n_samples=1), NetworkConfig(in_bands=5, **TINY))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_checkpoint(self, cube):
        cfg = TrainConfig(patch_size=8, n_samples=8, batch_size=2, steps=3, lr=1e30, seed=0)
        with pytest.raises(NumericError) as info:
            train(cube, cfg, NetworkConfig(in_bands=6, **TINY))
        assert info.value.step is not None and isinstance(info.value.checkpoint, Checkpoint)

    @pytest.mark.slow
    def test_loss_halves_in_300_steps(self):
        cube = normalize_cube(synthetic_cube(32, 32, 20, seed=0))
        cfg = TrainConfig(patch_size=10, n_samples=600, steps=300, lr=2e-3, seed=1)
        meta = train(cube, cfg, NetworkConfig(in_bands=20, encoder_channels=[8, 16, 32, 32, 32, 32])).train_meta
        assert meta["final_loss"] < 0.5 * meta["initial_loss"]


class TestConfig:
    def test_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train": {"steps": 3}, "network": {"heads": 2}}))
        train_d, net_d = load_config_file(path)
        assert TrainConfig.from_dict(train_d).steps == 3 and net_d == {"heads": 2}

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"optimizer": {}}))
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="stepz"):
            TrainConfig.from_dict({"stepz": 1})

    def test_round_trip(self):
        cfg = TrainConfig(steps=11, simulator={"max_fraction": 0.1})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("field,value", [("patch_size", 2), ("lr", 0.0), ("steps", -1), ("beta1", 1.0)])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value})
