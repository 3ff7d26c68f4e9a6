import json
import math

import numpy as np
import pytest

from surfelgrid.core.config import RenderConfig
from surfelgrid.core.errors import EmptyReportError
from surfelgrid.services.dataset_service import Dataset
from surfelgrid.services.metrics_service import (
    EvalReport,
    bench_render,
    chamfer,
    evaluate,
    metrics_service,
    overdraw_sweep,
    psnr,
)
from surfelgrid.services.render_service import render


def _report(**overrides):
    values = dict(
        psnr=[math.inf, 31.5],
        ssim=[1.0, 0.95],
        mean_psnr=math.inf,
        mean_ssim=0.975,
        mean_blends=3.2,
        p50_blends=3.0,
        p95_blends=7.0,
        surfels=1200,
        ms_per_frame=12.5,
    )
    values.update(overrides)
    return EvalReport(**values)


class TestPsnr:
    def test_identical_images(self, rng):
        image = rng.uniform(size=(8, 8, 3))
        assert psnr(image, image) == math.inf

    def test_known_error(self):
        pred = np.full((4, 4, 3), 0.6)
        gt = np.full((4, 4, 3), 0.5)
        assert psnr(pred, gt) == pytest.approx(20.0)

    def test_more_noise_scores_lower(self, rng):
        gt = rng.uniform(size=(16, 16, 3))
        noise = rng.standard_normal(gt.shape)
        scores = [psnr(gt + sigma * noise, gt) for sigma in (0.01, 0.05, 0.2)]
        assert scores[0] > scores[1] > scores[2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestChamfer:
    def test_identical_sets(self, rng):
        points = rng.uniform(size=(50, 3))
        assert chamfer(points, points) == 0.0

    def test_shifted_set(self, rng):
        points = rng.uniform(size=(20, 3)) * 10.0
        assert chamfer(points, points + [0.0, 0.0, 0.01]) == pytest.approx(0.01)

    def test_asymmetric_sets(self):
        a = np.zeros((1, 3))
        b = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        assert chamfer(a, b) == pytest.approx(0.5 * (0.0 + 1.0))

    def test_empty_set(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((3, 3)))


class TestEvaluate:
    def test_no_views(self, flat_cloud, grid, decoder, render_cfg):
        with pytest.raises(EmptyReportError):
            evaluate(flat_cloud([0.0]), grid, decoder, [], [], render_cfg)

    def test_self_consistent_views_score_infinite(self, make_camera, flat_cloud, grid, decoder, render_cfg):
        cloud = flat_cloud([0.0], o_logit=0.0)
        cameras = [make_camera(), make_camera(eye=(0.2, 0.1, 3.0))]
        images = [render(cloud, grid, decoder, cam, render_cfg).rgb for cam in cameras]
        report = metrics_service.evaluate(cloud, grid, decoder, Dataset(cameras=cameras, images=images), render_cfg)
        assert report.psnr == [math.inf, math.inf]
        assert report.ssim == pytest.approx([1.0, 1.0])
        assert report.surfels == 1
        assert report.mean_blends > 0
        assert report.ms_per_frame >= 0

    def test_report_json_keeps_infinity(self, tmp_path):
        report = _report()
        path = report.write_json(tmp_path / "eval" / "report.json")
        assert "Infinity" in path.read_text()
        assert json.loads(path.read_text())["surfels"] == 1200
        assert EvalReport.read_json(path) == report

    def test_table_has_a_row_per_view(self):
        lines = _report().table().splitlines()
        assert len(lines) == 5
        assert lines[2].split() == ["1", "31.500", "0.9500"]
        assert lines[3].startswith("  mean")
        assert "surfels: 1200" in lines[4]


class TestBench:
    def test_single_repeat(self, make_camera, flat_cloud, grid, decoder, render_cfg):
        cameras = [make_camera(), make_camera(eye=(0.0, 0.3, 3.0))]
        result = bench_render(flat_cloud([0.0, -0.5]), grid, decoder, cameras, render_cfg, repeats=1)
        assert len(result.timings_ms) == 2
        assert result.median_ms >= 0
        assert result.surfels == 2
        assert set(result.blends) == {"mean", "p50", "p95", "queries_saved"}

    def test_repeats_must_be_positive(self, camera, flat_cloud, grid, decoder, render_cfg):
        with pytest.raises(ValueError):
            bench_render(flat_cloud([0.0]), grid, decoder, [camera], render_cfg, repeats=0)

    def test_service_times_every_view(self, camera, flat_cloud, grid, decoder, render_cfg):
        result = metrics_service.bench(flat_cloud([0.0]), grid, decoder, [camera], render_cfg, repeats=3)
        assert len(result.timings_ms) == 3


class TestOverdraw:
    def test_sharper_kernels_blend_more(self, camera, flat_cloud, grid, decoder):
        cloud = flat_cloud(-0.1 * np.arange(10), o_logit=10.0, b=0.0)
        sweep = overdraw_sweep(cloud, grid, decoder, [camera], RenderConfig(tile_size=4), b_values=(-4.0, 0.0, 4.0))
        assert list(sweep) == [-4.0, 0.0, 4.0]
        assert sweep[-4.0] < sweep[0.0] < sweep[4.0]
        assert 1.0 <= sweep[-4.0] and sweep[4.0] <= 10.0

    def test_sweep_leaves_cloud_untouched(self, camera, flat_cloud, grid, decoder, render_cfg):
        cloud = flat_cloud([0.0, -0.2], b=1.5)
        overdraw_sweep(cloud, grid, decoder, [camera], render_cfg, b_values=(3.0,))
        np.testing.assert_array_equal(cloud.b, [1.5, 1.5])
