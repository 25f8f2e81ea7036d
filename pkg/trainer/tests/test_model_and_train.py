import numpy as np
import pytest
import torch

from rsgyro_trainer.model import as_denoiser_fn, build_denoiser
from rsgyro_trainer.train import (
    ConsistencyError,
    TrainConfig,
    load_checkpoint,
    load_dataset,
    train,
    warp_by_field,
)


class TestDenoiserNetwork:
    def test_output_shape_and_finiteness(self):
        torch.manual_seed(0)
        model = build_denoiser(resolution=64, base_width=16)
        x = torch.randn(2, 2, 64, 64)
        cond = torch.rand(2, 3, 64, 64)
        out = model(x, torch.tensor([10, 900]), cond)
        assert out.shape == (2, 2, 64, 64)
        assert torch.isfinite(out).all()

    def test_eval_determinism(self):
        torch.manual_seed(1)
        model = build_denoiser(resolution=64, base_width=16)
        model.eval()
        x = torch.randn(1, 2, 64, 64)
        cond = torch.rand(1, 3, 64, 64)
        with torch.no_grad():
            a = model(x, torch.tensor([5]), cond)
            b = model(x, torch.tensor([5]), cond)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_denoiser_contract_wrapper(self):
        torch.manual_seed(2)
        model = build_denoiser(resolution=32, base_width=16)
        den = as_denoiser_fn(model)
        x_t = np.random.default_rng(0).standard_normal((2, 32, 32))
        out_cond = den(x_t, 100, np.random.default_rng(1).uniform(0, 1, (3, 32, 32)))
        out_null = den(x_t, 100, None)
        assert out_cond.shape == (2, 32, 32)
        assert out_null.shape == (2, 32, 32)
        assert np.isfinite(out_cond).all() and np.isfinite(out_null).all()
        again = den(x_t, 100, None)
        np.testing.assert_array_equal(out_null, again)


class TestWarp:
    def test_zero_field_identity_inside(self):
        img = torch.rand(1, 3, 12, 10)
        warped, valid = warp_by_field(img, torch.zeros(1, 2, 12, 10))
        assert valid.all()
        torch.testing.assert_close(warped, img, rtol=0, atol=1e-6)

    def test_shift_marks_out_of_bounds(self):
        img = torch.rand(1, 1, 8, 8)
        field = torch.zeros(1, 2, 8, 8)
        field[:, 0] = 3.0
        warped, valid = warp_by_field(img, field)
        assert valid[0, :, :5].all()
        assert not valid[0, :, 5:].any()
        torch.testing.assert_close(warped[0, 0, :, :5], img[0, 0, :, 3:], rtol=0, atol=1e-6)


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = TrainConfig(steps=40, batch_size=4, resolution=32, base_width=16, seed=3)
    history = train(
        tiny_dataset / "manifest.jsonl", cfg, out / "ckpt.pt", out / "loss.csv"
    )
    return cfg, history, out


class TestTraining:

    def test_history_and_csv(self, trained):
        cfg, history, out = trained
        assert len(history) == 40
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "step,l_mse,l_pl,l_overall"
        assert len(lines) == 41

    def test_loss_identity_every_step(self, trained):
        _, history, _ = trained
        for row in history:
            if row["l_pl"] > 1e-12:
                assert row["l_overall"] == pytest.approx(2.0 * row["l_mse"], rel=1e-6)
            else:
                assert row["l_overall"] == row["l_mse"]

    def test_checkpoint_reload_identical(self, trained):
        cfg, _, out = trained
        model1, cfg1 = load_checkpoint(out / "ckpt.pt")
        model2, cfg2 = load_checkpoint(out / "ckpt.pt")
        assert cfg1 == cfg2
        x = torch.randn(1, 2, 32, 32)
        cond = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a = model1(x, torch.tensor([3]), cond)
            b = model2(x, torch.tensor([3]), cond)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_consistency_errors(self, tiny_dataset):
        bad_scale = TrainConfig(resolution=32, norm_scale=4.0)
        with pytest.raises(ConsistencyError):
            load_dataset(tiny_dataset / "manifest.jsonl", bad_scale)
        bad_res = TrainConfig(resolution=64)
        with pytest.raises(ConsistencyError):
            load_dataset(tiny_dataset / "manifest.jsonl", bad_res)

    def test_dataset_tensors(self, tiny_dataset):
        cfg = TrainConfig(resolution=32)
        data = load_dataset(tiny_dataset / "manifest.jsonl", cfg)
        n = len(data.ids)
        assert data.conditions.shape == (n, 3, 32, 32)
        assert data.targets.shape == (n, 2, 32, 32)
        assert data.gs.shape == (n, 3, 32, 32)
        assert data.identity.sum() == 2  # 25% of 8
        # identity pairs carry exactly-zero targets
        assert data.targets[data.identity].abs().max() == 0.0


class TestInference:
    def test_fixed_seed_bit_identical_flow(self, tiny_dataset, tmp_path):
        from rsgyro_trainer import dataio
        from rsgyro_trainer.infer import infer_field

        cfg = TrainConfig(steps=5, batch_size=2, resolution=32, base_width=16, seed=0)
        train(tiny_dataset / "manifest.jsonl", cfg, tmp_path / "c.pt", tmp_path / "l.csv")
        model, cfg = load_checkpoint(tmp_path / "c.pt")
        rows = dataio.read_manifest(tiny_dataset / "manifest.jsonl")
        rs = dataio.load_png(tiny_dataset / rows[0]["rs_path"])
        f1 = infer_field(model, cfg, rs, steps=8, seed=123)
        f2 = infer_field(model, cfg, rs, steps=8, seed=123)
        torch.testing.assert_close(f1, f2, rtol=0, atol=0)
        assert f1.shape == (2, 160, 120)
        dataio.write_flow(tmp_path / "a.flo", f1)
        dataio.write_flow(tmp_path / "b.flo", f2)
        assert (tmp_path / "a.flo").read_bytes() == (tmp_path / "b.flo").read_bytes()

    def test_flow_file_readable_by_toolkit(self, tiny_dataset, tmp_path):
        from rsgyro_trainer import dataio
        from rsgyro_trainer.infer import infer_field
        from conftest import run_toolkit

        cfg = TrainConfig(steps=5, batch_size=2, resolution=32, base_width=16, seed=0)
        train(tiny_dataset / "manifest.jsonl", cfg, tmp_path / "c.pt", tmp_path / "l.csv")
        model, cfg = load_checkpoint(tmp_path / "c.pt")
        rows = dataio.read_manifest(tiny_dataset / "manifest.jsonl")
        rs = dataio.load_png(tiny_dataset / rows[0]["rs_path"])
        dataio.write_flow(tmp_path / "pred.flo", infer_field(model, cfg, rs, seed=1))
        run_toolkit(
            "correct", "--rs", tiny_dataset / rows[0]["rs_path"],
            "--flow", tmp_path / "pred.flo", "--out", tmp_path / "corrected.png",
        )
        assert (tmp_path / "corrected.png").exists()
