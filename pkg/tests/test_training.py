import numpy as np
import pytest
import torch

from protovad.data import DatasetError, SyntheticSpec, generate_synthetic
from protovad.discloss import discriminative_loss
from protovad.training import (
    LOG_COLUMNS,
    CheckpointVersionError,
    NonFiniteLossError,
    TrainConfig,
    build_model,
    build_optimizer,
    diff_loss,
    fit,
    load_checkpoint,
    model_from_checkpoint,
    prediction_loss,
    save_checkpoint,
    total_objective,
    train_step,
)

TINY = dict(t=2, image_size=32, depth=2, base_width=4, feature_dim=8, n_items=4, batch_size=2)


def _tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def _batch(cfg, seed=0, b=2):
    g = torch.Generator().manual_seed(seed)
    s = cfg.image_size
    frames = torch.rand(b, cfg.t + 1, 3, s, s, generator=g) * 2 - 1
    clips, targets = frames[:, : cfg.t], frames[:, cfg.t]
    return clips, targets, clips - targets[:, None]


@pytest.fixture(scope="module")
def tiny_videos():
    spec = SyntheticSpec(num_videos=2, frames_per_video=12, image_size=32, sprite_size=6, seed=0)
    return generate_synthetic(spec)


class TestLosses:
    @pytest.mark.parametrize("loss", [prediction_loss, diff_loss])
    def test_identical_is_zero(self, loss):
        x = torch.rand(2, 3, 4, 4)
        assert float(loss(x, x)) == 0.0

    @pytest.mark.parametrize("loss", [prediction_loss, diff_loss])
    def test_constant_offset(self, loss):
        x = torch.rand(2, 4, 3, 4, 4, dtype=torch.float64)
        assert float(loss(x + 0.5, x)) == pytest.approx(0.25, abs=1e-12)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(-1, 1, (2, 3, 3, 3))
        expected = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert float(prediction_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(expected, abs=1e-12)

    def test_objective_default_weights(self):
        assert total_objective(1.0, 1.0, 1.0, TrainConfig()) == pytest.approx(2.1)
        assert total_objective(0.0, 0.0, 0.0, TrainConfig()) == 0.0

    def test_objective_weighted_sum(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            lp, ld, ls, a, b, c = rng.uniform(0, 3, 6)
            cfg = TrainConfig(lambda_pred=a, lambda_diff=b, lambda_dis=c)
            assert total_objective(lp, ld, ls, cfg) == pytest.approx(a * lp + b * ld + c * ls, abs=1e-9)


class TestConfig:
    def test_full_scale_defaults(self):
        cfg = TrainConfig()
        assert (cfg.t, cfg.n_items, cfg.image_size, cfg.batch_size) == (4, 100, 256, 4)
        assert (cfg.lambda_pred, cfg.lambda_dis, cfg.lambda_diff, cfg.gamma) == (1.0, 1.0, 0.1, 0.6)
        assert cfg.learning_rate == 2e-4
        assert cfg.arch().feature_size == 32 and cfg.feature_dim == 512

    def test_desk_profile(self):
        cfg = TrainConfig.desk()
        assert (cfg.image_size, cfg.n_items, cfg.feature_dim, cfg.t) == (64, 10, 64, 4)

    @pytest.mark.parametrize("kw", [dict(lambda_dis=-1), dict(gamma=2.0), dict(learning_rate=0), dict(image_size=60)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig.desk(seed=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(KeyError):
            TrainConfig.from_dict({"bogus": 1})


class TestTrainStep:
    def test_record_columns(self):
        cfg = _tiny()
        torch.manual_seed(0)
        model = build_model(cfg)
        rec = train_step(model, build_optimizer(model, cfg), _batch(cfg), cfg, step=1)
        assert tuple(rec) == LOG_COLUMNS
        assert rec["total"] == pytest.approx(
            cfg.lambda_pred * rec["l_pred"] + cfg.lambda_diff * rec["l_diff"] + cfg.lambda_dis * rec["l_dis"], rel=1e-6
        )

    def test_memory_stays_unit_norm(self):
        cfg = _tiny()
        torch.manual_seed(0)
        model = build_model(cfg)
        opt = build_optimizer(model, cfg)
        for i in range(5):
            train_step(model, opt, _batch(cfg, seed=i), cfg, step=i)
            np.testing.assert_allclose(model.memory.detach().norm(dim=1).numpy(), 1.0, atol=1e-6)

    def test_step_reduces_objective_on_same_batch(self):
        cfg = _tiny(learning_rate=1e-4, lambda_dis=0.0, memory_update=False)
        torch.manual_seed(0)
        model = build_model(cfg)
        batch = _batch(cfg)

        def objective():
            # the objective depends on batch statistics, so evaluate in train mode without updating anything
            model.train()
            with torch.no_grad():
                out = model(batch[0])
                return float(prediction_loss(out.predicted_frame, batch[1]) * cfg.lambda_pred
                             + diff_loss(out.predicted_diff, batch[2]) * cfg.lambda_diff)

        opt = build_optimizer(model, cfg)
        before = objective()
        train_step(model, opt, batch, cfg)
        assert objective() < before

    def test_memory_gradient_only_through_read_path(self):
        cfg = _tiny(lambda_dis=0.0, lambda_diff=0.0)
        torch.manual_seed(0)
        model = build_model(cfg)
        clips, targets, diffs = _batch(cfg)
        out = model(clips)
        flat = out.queries.reshape(-1, cfg.feature_dim)
        l_pred = prediction_loss(out.predicted_frame, targets)
        l_diff = diff_loss(out.predicted_diff, diffs)
        l_dis = discriminative_loss(flat, model.memory)
        g_total, g_pred, g_diff, g_dis = (
            torch.autograd.grad(x, model.memory, retain_graph=True)[0]
            for x in (total_objective(l_pred, l_diff, l_dis, cfg), l_pred, l_diff, l_dis)
        )
        torch.testing.assert_close(g_total, g_pred, rtol=0, atol=0)
        # the zero-weighted terms would otherwise have contributed
        assert g_diff.abs().sum() > 0 and g_dis.abs().sum() > 0

    def test_memory_grad_switch(self):
        cfg = _tiny(memory_grad=False)
        model = build_model(cfg)
        assert not model.memory.requires_grad
        assert all(p is not model.memory for g in build_optimizer(model, cfg).param_groups for p in g["params"])

    def test_nan_aborts_with_diagnostics(self):
        cfg = _tiny()
        torch.manual_seed(0)
        model = build_model(cfg)
        clips, targets, diffs = _batch(cfg)
        targets = targets.clone()
        targets[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteLossError, match="clips mean"):
            train_step(model, build_optimizer(model, cfg), (clips, targets, diffs), cfg)

    def test_nan_error_is_floating_point_error(self):
        assert issubclass(NonFiniteLossError, FloatingPointError)


class TestFit:
    def test_smoke_writes_log_and_checkpoint(self, tiny_videos, tmp_path):
        cfg = _tiny(epochs=2)
        result = fit(tiny_videos, cfg, run_dir=tmp_path)
        n_windows = 2 * (12 - cfg.t)
        assert result.step == 2 * (n_windows // cfg.batch_size)
        lines = (tmp_path / "train_log.csv").read_text().splitlines()
        assert lines[0] == ",".join(LOG_COLUMNS)
        assert len(lines) == result.step + 1
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_001.pt", "epoch_002.pt"]
        model, payload = model_from_checkpoint(result.checkpoint)
        assert payload["step"] == result.step and payload["epoch"] == 2
        for k, v in result.model.state_dict().items():
            assert torch.equal(v, model.state_dict()[k]), k

    def test_resume_reproduces_metrics(self, tiny_videos, tmp_path):
        cfg = _tiny(epochs=3)
        full = fit(tiny_videos, cfg, run_dir=tmp_path / "full")
        resumed = fit(tiny_videos, cfg, run_dir=tmp_path / "resumed",
                      resume_from=tmp_path / "full" / "checkpoints" / "epoch_001.pt")
        n_first = full.step // 3
        assert resumed.history == full.history[n_first:]
        for k, v in full.model.state_dict().items():
            assert torch.equal(v, resumed.model.state_dict()[k]), k

    def test_same_seed_same_log_bytes(self, tiny_videos, tmp_path):
        cfg = _tiny(epochs=1)
        fit(tiny_videos, cfg, run_dir=tmp_path / "a")
        fit(tiny_videos, cfg, run_dir=tmp_path / "b")
        assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()

    def test_finite_over_200_steps(self, tiny_videos):
        cfg = _tiny(epochs=100, max_steps=200)
        result = fit(tiny_videos, cfg)
        assert result.step == 200
        assert all(np.isfinite([r[k] for k in LOG_COLUMNS]).all() for r in result.history)

    def test_empty_dataset(self):
        with pytest.raises(DatasetError, match="empty"):
            fit([], _tiny())

    def test_short_video(self):
        with pytest.raises(DatasetError, match="at least"):
            fit([np.zeros((2, 3, 32, 32), dtype=np.float32)], _tiny())

    def test_wrong_frame_size(self):
        with pytest.raises(DatasetError, match="shape"):
            fit([np.zeros((8, 3, 16, 16), dtype=np.float32)], _tiny())


class TestCheckpoint:
    def test_version_mismatch(self, tmp_path):
        cfg = _tiny()
        model = build_model(cfg)
        path = save_checkpoint(tmp_path / "c.pt", model, None, cfg, 0, 0)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 999
        torch.save(payload, path)
        with pytest.raises(CheckpointVersionError, match="999"):
            load_checkpoint(path)

    def test_contents(self, tmp_path):
        cfg = _tiny()
        model = build_model(cfg)
        path = save_checkpoint(tmp_path / "c.pt", model, build_optimizer(model, cfg), cfg, 7, 1)
        payload = load_checkpoint(path)
        for key in ("format_version", "arch_config", "train_config", "model_state", "memory", "optimizer_state", "step"):
            assert key in payload
        assert torch.equal(payload["model_state"]["memory"], model.memory.detach())
        assert not list(tmp_path.glob("*.tmp"))
