import json

import pytest
from click.testing import CliRunner

from surfelgrid.cli import train as train_cli
from surfelgrid.cli.options import EXIT_CONFIG, EXIT_FAILURE, CliConfig
from surfelgrid.core.config import full_preset
from surfelgrid.main import cli
from surfelgrid.services.checkpoint_service import checkpoint_service, import_ply
from surfelgrid.services.dataset_service import Dataset, gen_toy_scene, load_nerf_synthetic, write_dataset
from surfelgrid.services.train_service import init_state


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def checkpoint_file(tmp_path, tiny_config):
    scene = gen_toy_scene("textured_quad", views=2, width=16, height=16, test_views=0, seed_points=64)
    ckpt = init_state(scene.train, tiny_config).to_checkpoint()
    return checkpoint_service.save(ckpt, tmp_path / "run" / "checkpoints" / "final.ckpt")


@pytest.fixture
def stub_training(mocker):
    """Replace data loading and optimisation so only flag handling runs."""
    empty = Dataset(cameras=[], images=[])
    load = mocker.patch.object(train_cli.dataset_service, "load", return_value=(empty, empty))
    result = mocker.Mock(checkpoint=mocker.Mock(iteration=0), checkpoint_path="final.ckpt")
    run = mocker.patch.object(train_cli.train_service, "run", return_value=result)
    return load, run


class TestHelp:
    @pytest.mark.parametrize(
        "command,flag",
        [
            ("train", "--disable-beta"),
            ("render", "--turntable"),
            ("decompose", "hash_only"),
            ("eval", "--split"),
            ("bench", "--repeats"),
            ("export-ply", "--ascii"),
            ("gen-scene", "--cells"),
        ],
    )
    def test_every_command_documents_its_flags(self, runner, command, flag):
        result = runner.invoke(cli, [command, "--help"])
        assert result.exit_code == 0
        assert flag in result.output


class TestConfigResolution:
    def test_defaults_give_the_full_preset(self):
        opts = CliConfig()
        assert opts.preset == "paper"
        assert opts.kernel_mode() == "beta"
        assert opts.train_config() == full_preset()

    def test_disable_beta_switches_kernel(self):
        assert CliConfig(disable_beta=True).train_config().render.kernel_mode == "gaussian"
        assert CliConfig(kernel="gaussian").kernel_mode() == "gaussian"

    def test_iteration_rescale_and_overrides(self):
        cfg = CliConfig(preset="desk", iters=200, overrides={"mcmc_cap": 99}).train_config()
        assert (cfg.total_iters, cfg.warmup_iters, cfg.bce_start_iter) == (200, 66, 166)
        assert cfg.mcmc_cap == 99

    def test_hash_levels_keep_the_hybrid_width(self):
        cfg = CliConfig(preset="desk", hash_levels=3).train_config()
        assert (cfg.field.hash_levels, cfg.field.hash_features, cfg.field.surfel_latent_dim) == (3, 4, 12)

    def test_no_bce_disables_sparsification(self):
        cfg = CliConfig(preset="desk", no_bce=True).train_config()
        assert cfg.loss.lambda_bce == 0.0
        assert cfg.prune_threshold == 0.0

    def test_command_line_beats_overlay(self, runner, tmp_path, stub_training):
        load, run = stub_training
        overlay = tmp_path / "overlay.json"
        overlay.write_text(json.dumps({"seed": 5, "iters": 8, "preset": "desk", "overrides": {"mcmc_cap": 40}}))
        args = ["train", "--toy", "textured_quad", "--out-dir", str(tmp_path), "--seed", "3", "--config", str(overlay)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        cfg = run.call_args.args[1]
        assert (cfg.seed, cfg.total_iters, cfg.mcmc_cap) == (3, 8, 40)
        assert load.call_args.kwargs["seed"] == 3

    def test_unknown_overlay_key(self, runner, tmp_path, stub_training):
        _, run = stub_training
        overlay = tmp_path / "overlay.json"
        overlay.write_text(json.dumps({"learning_rate": 1.0}))
        result = runner.invoke(cli, ["train", "--toy", "cube", "--config", str(overlay)])
        assert result.exit_code == EXIT_CONFIG
        run.assert_not_called()

    def test_conflicting_kernel_flags(self, runner, tmp_path, stub_training):
        _, run = stub_training
        args = ["train", "--toy", "cube", "--out-dir", str(tmp_path), "--kernel", "beta", "--disable-beta"]
        result = runner.invoke(cli, args)
        assert result.exit_code == EXIT_CONFIG
        assert "conflicts" in result.output
        run.assert_not_called()

    @pytest.mark.parametrize("preset", ["paper", "full"])
    def test_full_scale_preset_names(self, runner, tmp_path, stub_training, preset):
        _, run = stub_training
        result = runner.invoke(cli, ["train", "--toy", "cube", "--out-dir", str(tmp_path), "--preset", preset])
        assert result.exit_code == 0, result.output
        assert run.call_args.args[1] == full_preset()

    def test_default_preset_is_full_scale(self, runner, tmp_path, stub_training):
        _, run = stub_training
        result = runner.invoke(cli, ["train", "--toy", "cube", "--out-dir", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert run.call_args.args[1] == full_preset()

    def test_dataset_source_required(self, runner, tmp_path, stub_training):
        _, run = stub_training
        result = runner.invoke(cli, ["train", "--out-dir", str(tmp_path)])
        assert result.exit_code == 2
        run.assert_not_called()


class TestTrainCommand:
    def test_zero_iterations_writes_final_artifacts(self, runner, tmp_path):
        out = tmp_path / "run"
        args = ["train", "--toy", "textured_quad", "--preset", "desk", "--iters", "0", "--quiet", "--out-dir", str(out)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        assert (out / "checkpoints" / "final.ckpt").is_file()
        final = json.loads((out / "train_log.jsonl").read_text().splitlines()[-1])
        assert final["final"] is True and final["iter"] == 0
        assert "test_psnr" in final
        assert len(json.loads((out / "eval.json").read_text())["psnr"]) == 2


class TestSceneCommand:
    def test_generated_scene_loads(self, runner, tmp_path):
        args = ["gen-scene", "--name", "two_planes", "--out-dir", str(tmp_path), "--views", "2", "--test-views", "1"]
        result = runner.invoke(cli, args + ["--width", "16", "--height", "12"])
        assert result.exit_code == 0, result.output
        train = load_nerf_synthetic(tmp_path, "train")
        assert len(train) == 2
        assert train.image_size == (12, 16)
        assert train.points is not None
        assert len(load_nerf_synthetic(tmp_path, "test")) == 1


class TestRenderCommands:
    def _render(self, runner, checkpoint_file, out, *extra):
        args = ["render", "--checkpoint", str(checkpoint_file), "--out-dir", str(out), "--turntable", "3"]
        return runner.invoke(cli, args + ["--width", "12", "--height", "10", *extra])

    def test_turntable_files(self, runner, tmp_path, checkpoint_file):
        result = self._render(runner, checkpoint_file, tmp_path / "a")
        assert result.exit_code == 0, result.output
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["view_000.png", "view_001.png", "view_002.png"]

    def test_renders_are_reproducible(self, runner, tmp_path, checkpoint_file):
        self._render(runner, checkpoint_file, tmp_path / "a")
        self._render(runner, checkpoint_file, tmp_path / "b", "--threads", "2")
        for name in ("view_000.png", "view_001.png", "view_002.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_camera_file(self, runner, tmp_path, checkpoint_file, make_camera):
        cameras = tmp_path / "cameras.json"
        cameras.write_text(json.dumps([make_camera(8, 6).to_dict()]))
        result = self._render(runner, checkpoint_file, tmp_path / "c", "--cameras", str(cameras))
        assert result.exit_code == 0, result.output
        assert [p.name for p in (tmp_path / "c").iterdir()] == ["view_000.png"]

    def test_unreadable_camera_file(self, runner, tmp_path, checkpoint_file):
        cameras = tmp_path / "cameras.json"
        cameras.write_text("[{}]")
        result = self._render(runner, checkpoint_file, tmp_path / "c", "--cameras", str(cameras))
        assert result.exit_code == EXIT_CONFIG

    def test_missing_checkpoint(self, runner, tmp_path):
        result = self._render(runner, tmp_path / "nope.ckpt", tmp_path / "a")
        assert result.exit_code == EXIT_FAILURE

    def test_decompose_with_aux_buffers(self, runner, tmp_path, checkpoint_file):
        args = ["decompose", "--checkpoint", str(checkpoint_file), "--out-dir", str(tmp_path / "d"), "--mode", "hash_only"]
        result = runner.invoke(cli, args + ["--turntable", "1", "--width", "8", "--height", "8", "--aux"])
        assert result.exit_code == 0, result.output
        names = sorted(p.name for p in (tmp_path / "d").iterdir())
        assert names == ["view_000.png", "view_000_alpha.png", "view_000_depth.png", "view_000_normal.png"]


class TestEvalCommand:
    def test_report_json(self, runner, tmp_path, checkpoint_file):
        out = tmp_path / "report.json"
        args = ["eval", "--checkpoint", str(checkpoint_file), "--toy", "textured_quad", "--out", str(out)]
        result = runner.invoke(cli, args)
        assert result.exit_code == 0, result.output
        report = json.loads(out.read_text())
        assert len(report["psnr"]) == 2
        assert "mean" in result.output

    def test_no_test_views(self, runner, tmp_path, checkpoint_file):
        scene = gen_toy_scene("textured_quad", views=1, width=8, height=8, test_views=0)
        write_dataset(tmp_path / "data", {"train": scene.train, "test": scene.test})
        args = ["eval", "--checkpoint", str(checkpoint_file), "--data-dir", str(tmp_path / "data")]
        result = runner.invoke(cli, args)
        assert result.exit_code == EXIT_FAILURE


class TestBenchAndExport:
    def test_bench_two_checkpoints(self, runner, tmp_path, checkpoint_file):
        other = tmp_path / "other.ckpt"
        other.write_bytes(checkpoint_file.read_bytes())
        out = tmp_path / "bench.json"
        args = ["bench", "--checkpoint", str(checkpoint_file), "--checkpoint", str(other)]
        result = runner.invoke(cli, args + ["--views", "1", "--repeats", "1", "--width", "8", "--height", "8", "--out", str(out)])
        assert result.exit_code == 0, result.output
        timings = json.loads(out.read_text())
        assert set(timings) == {str(checkpoint_file), str(other)}
        assert all(len(entry["timings_ms"]) == 1 for entry in timings.values())

    def test_export_ply(self, runner, tmp_path, checkpoint_file):
        out = tmp_path / "surfels.ply"
        result = runner.invoke(cli, ["export-ply", "--checkpoint", str(checkpoint_file), "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert import_ply(out).count == checkpoint_service.load(checkpoint_file).cloud.count
