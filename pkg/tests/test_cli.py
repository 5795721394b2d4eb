import json
import shutil

import numpy as np
import pytest

from distmnmf.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SHAPE, EXIT_TRUTH, RunConfig, ConfigError, main
from distmnmf.mixsim import Scenario
from distmnmf.stft import StftConfig, read_wav


@pytest.fixture
def scenario_file(tmp_path):
    sc = Scenario(
        room=(5.0, 4.0, 3.0),
        subarrays=[[(2.0, 2.0, 1.5), (2.05, 2.0, 1.5)], [(3.0, 2.0, 1.5), (3.05, 2.0, 1.5)]],
        sources=[(1.0, 1.0, 1.5), (4.0, 3.0, 1.5)],
        sample_rate=8000,
        noise_floor_db=60.0,
    )
    path = tmp_path / "scene.json"
    path.write_text(sc.to_json())
    return path


@pytest.fixture
def simulated(tmp_path, scenario_file):
    out = tmp_path / "sim"
    assert main(["simulate", str(scenario_file), "--out", str(out), "--duration", "1.0", "--seed", "3"]) == EXIT_OK
    return out


class TestSimulate:
    def test_deterministic(self, tmp_path, scenario_file, simulated):
        again = tmp_path / "again"
        main(["simulate", str(scenario_file), "--out", str(again), "--duration", "1.0", "--seed", "3"])
        for name in ("mixture.wav", "image_src0.wav", "image_src1.wav"):
            np.testing.assert_array_equal(read_wav(simulated / name)[1], read_wav(again / name)[1])
        manifest = json.loads((simulated / "manifest.json").read_text())
        assert manifest["partition"] == [2, 2] and manifest["n_samples"] == 8000

    def test_missing_scenario(self, tmp_path):
        assert main(["simulate", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_bad_duration(self, tmp_path, scenario_file):
        assert main(["simulate", str(scenario_file), "--out", str(tmp_path), "--duration", "0"]) == EXIT_CONFIG


class TestSeparate:
    def test_zero_iterations(self, tmp_path, simulated):
        out = tmp_path / "sep"
        code = main(["separate", str(simulated / "mixture.wav"), "--out", str(out), "--method",
                     "distributed", "--partition", "2,2", "--n-sources", "2", "--k-bases", "2",
                     "--iters", "0", "--window-ms", "64", "--hop-ms", "16"])
        assert code == EXIT_OK
        a = read_wav(out / "mixture_src0.wav")[1]
        b = read_wav(out / "mixture_src1.wav")[1]
        mix = read_wav(simulated / "mixture.wav")[1]
        assert a.shape == mix.shape
        cfg = StftConfig.from_ms(8000, 64, 16)
        inner = cfg.interior(cfg.n_frames(len(mix)))
        # the filters sum to one, so the estimates add back to the mixture on the interior
        np.testing.assert_allclose((a + b)[inner], mix[inner], atol=1e-5)
        report = json.loads((out / "fit_report.json").read_text())
        assert report["iterations"] == 0
        assert (out / "model.npz").exists() and (out / "cost_trace.csv").exists()

    def test_partition_mismatch(self, tmp_path, simulated):
        code = main(["separate", str(simulated / "mixture.wav"), "--out", str(tmp_path / "x"),
                     "--partition", "2,3", "--iters", "0"])
        assert code == EXIT_SHAPE

    def test_channel_selection_out_of_range(self, tmp_path, simulated):
        code = main(["separate", str(simulated / "mixture.wav"), "--out", str(tmp_path / "x"),
                     "--method", "single", "--channels", "0,7", "--iters", "0"])
        assert code == EXIT_SHAPE

    def test_missing_mixture(self, tmp_path):
        code = main(["separate", str(tmp_path / "no.wav"), "--out", str(tmp_path / "x"),
                     "--method", "full", "--iters", "0"])
        assert code == EXIT_IO

    def test_config_file_and_errors(self, tmp_path, simulated):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"method": "full", "bogus": 1}))
        code = main(["separate", str(simulated / "mixture.wav"), "--out", str(tmp_path / "x"),
                     "--config", str(cfg)])
        assert code == EXIT_CONFIG

    def test_run_config_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(method="full", partition=[2, 2]).validate()
        with pytest.raises(ConfigError):
            RunConfig(partition=None).validate()
        assert RunConfig(partition=[4, 4, 4]).validate().method == "distributed"


class TestEvaluate:
    def test_true_images_and_mixture_copies(self, tmp_path, simulated):
        perfect = tmp_path / "perfect"
        perfect.mkdir()
        for n in range(2):
            shutil.copy(simulated / f"image_src{n}.wav", perfect / f"est_src{n}.wav")
        assert main(["evaluate", str(simulated / "manifest.json"), str(perfect)]) == EXIT_OK
        summary = json.loads((perfect / "sdr_summary.json").read_text())
        assert min(summary["improvement_db"]) > 20

        copies = tmp_path / "copies"
        copies.mkdir()
        for n in range(2):
            shutil.copy(simulated / "mixture.wav", copies / f"est_src{n}.wav")
        main(["evaluate", str(simulated / "manifest.json"), str(copies)])
        summary = json.loads((copies / "sdr_summary.json").read_text())
        np.testing.assert_allclose(summary["improvement_db"], 0.0, atol=1e-6)

    def test_missing_truth(self, tmp_path, simulated):
        (simulated / "image_src1.wav").unlink()
        assert main(["evaluate", str(simulated / "manifest.json"), str(simulated)]) == EXIT_TRUTH
        assert main(["evaluate", str(tmp_path / "none.json"), str(simulated)]) == EXIT_TRUTH


class TestBenchmark:
    def test_small_grid(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"n_bins": 6, "n_frames": 8, "partition": [2, 2],
                                    "n_sources": 2, "n_bases": 2, "iters": 1, "repeats": 1}))
        assert main(["benchmark", "--grid", str(grid), "--out", str(tmp_path / "b")]) == EXIT_OK
        payload = json.loads((tmp_path / "b.json").read_text())
        assert sorted(payload["ordering"]) == ["distributed", "full", "single"]

    @pytest.mark.parametrize("content", ['{"n_bins": "many"}', '{"speed": 1}', "[1, 2]", "{not json"])
    def test_malformed_grid(self, tmp_path, content):
        grid = tmp_path / "grid.json"
        grid.write_text(content)
        assert main(["benchmark", "--grid", str(grid), "--out", str(tmp_path / "b")]) == EXIT_CONFIG
