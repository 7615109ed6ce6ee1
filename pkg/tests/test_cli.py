import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from procconv import __version__, cli, io
from procconv.exceptions import SamplerAbort
from procconv.predict import predict_surface


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    return io.read_table(path)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert run("make-synthetic", "--n", 20, "--seed", 3, "--output-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def fitted(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert run("fit", "--data", scene / "observations.csv", "--n-iter", 1200, "--burn-in", 200,
               "--thin", 5, "--seed", 1, "--output-dir", out) == 0
    return out


class TestIngest:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "obs.csv"
        p.write_text("x,y,value\n0,0,1.5\n1,0,2.5\n0,1,-0.5\n")
        d = io.ingest_observations(p)
        assert d.n == 3 and d.values.tolist() == [1.5, 2.5, -0.5]

    def test_text_names_line(self, tmp_path):
        p = tmp_path / "obs.csv"
        p.write_text("x,y,value\n0,0,abc\n1,0,2.5\n")
        with pytest.raises(io.InputError, match="line 2"):
            io.ingest_observations(p)

    def test_log_transform(self, tmp_path):
        p = tmp_path / "obs.csv"
        p.write_text("x,y,value\n0,0,100\n1,1,1\n")
        d = io.ingest_observations(p, log_transform=True)
        assert d.values[0] == pytest.approx(4.60517, abs=5e-6)
        assert d.values[0] == math.log(100) and d.values[1] == 0.0

    @pytest.mark.parametrize("bad", ["0", "-3"])
    def test_log_transform_needs_positive(self, tmp_path, bad):
        p = tmp_path / "obs.csv"
        p.write_text(f"x,y,value\n0,0,2\n1,1,{bad}\n")
        with pytest.raises(io.InputError, match="line 3"):
            io.ingest_observations(p, log_transform=True)

    def test_non_finite_and_missing_column(self, tmp_path):
        p = tmp_path / "obs.csv"
        p.write_text("x,y,value\n0,0,inf\n")
        with pytest.raises(io.InputError):
            io.ingest_observations(p)
        p.write_text("x,y,conc\n0,0,1\n")
        with pytest.raises(io.InputError, match="value"):
            io.ingest_observations(p)

    def test_trace_round_trip(self, fitted):
        tr = io.read_trace(fitted / "trace.csv")
        again = fitted / "again.csv"
        io.write_trace(again, tr)
        assert again.read_bytes() == (fitted / "trace.csv").read_bytes()


class TestSimulate:
    def test_defaults(self, tmp_path):
        assert run("simulate", "--output-dir", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["ellipses.csv", "metadata.json", "surface.csv"]
        surface = read_csv(tmp_path / "surface.csv")
        assert list(surface) == ["x", "y", "z"] and len(surface["z"]) == 441
        ell = read_csv(tmp_path / "ellipses.csv")
        assert list(ell) == io.ELLIPSE_HEADER and len(ell["bx"]) == 441 * 36
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["version"] == __version__ and meta["seed"] == 0
        assert meta["config"]["nx"] == 21 and meta["config"]["shrink_factor"] == 10.0

    def test_seed_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert run("simulate", "--seed", 7, "--nx", 6, "--ny", 5, "--output-dir", tmp_path / d) == 0
        for name in ("surface.csv", "ellipses.csv", "metadata.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_invalid_lattice(self, tmp_path, capsys):
        assert run("simulate", "--nx", 0, "--output-dir", tmp_path) == 2
        assert "nx" in capsys.readouterr().err

    def test_usage_error(self, capsys):
        assert run("simulate", "--nx", "many") == 2
        assert run("no-such-command") == 2

    def test_config_file_and_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[simulate]\nnx = 3\nny = 4\nseed = 5\n")
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "env"))
        assert run("simulate", "--config", cfg, "--ny", 2) == 0
        meta = json.loads((tmp_path / "env" / "metadata.json").read_text())
        assert (meta["config"]["nx"], meta["config"]["ny"], meta["seed"]) == (3, 2, 5)
        assert run("simulate", "--config", cfg, "--output-dir", tmp_path / "flag") == 0
        assert (tmp_path / "flag" / "surface.csv").exists()

    def test_bad_config(self, tmp_path):
        assert run("simulate", "--config", tmp_path / "missing.ini") == 2
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[simulate]\nnx = lots\n")
        assert run("simulate", "--config", cfg, "--output-dir", tmp_path) == 2


class TestMakeSynthetic:
    def test_defaults(self, tmp_path):
        assert run("make-synthetic", "--output-dir", tmp_path) == 0
        obs = read_csv(tmp_path / "observations.csv")
        assert list(obs) == ["x", "y", "value"] and len(obs["value"]) == 60
        truth = json.loads((tmp_path / "truth.json").read_text())
        for key, value in [("tau_z", 10.0), ("tau_psi", 30.0), ("lambda_y", 10.0),
                           ("lambda_z", 1.0), ("seed", 0)]:
            assert truth[key] == value
        assert len(read_csv(tmp_path / "truth_surface.csv")["z"]) == 441

    def test_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert run("make-synthetic", "--n", 10, "--seed", 9, "--output-dir", tmp_path / d) == 0
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


class TestFit:
    def test_outputs(self, fitted):
        tr = read_csv(fitted / "trace.csv")
        assert list(tr)[:7] == ["iteration", "log_post", "mu", "lambda_y", "lambda_z", "tau_z", "tau_psi"]
        assert len(tr["mu"]) == 200
        report = json.loads((fitted / "acceptance.json").read_text())
        chain = report["chains"][0]
        assert chain["trace"] == "trace.csv" and chain["n_samples"] == 200
        for b, rate in chain["acceptance_rates"].items():
            assert chain["accepted"][b] + chain["rejected"][b] == chain["proposals"][b]
            assert 0 <= rate <= 1

    def test_tau_psi_fixed(self, scene, tmp_path):
        assert run("fit", "--data", scene / "observations.csv", "--n-iter", 40, "--burn-in", 20,
                   "--tau-psi-fixed", 25, "--output-dir", tmp_path) == 0
        assert np.all(read_csv(tmp_path / "trace.csv")["tau_psi"] == 25.0)

    def test_missing_input(self, tmp_path, capsys):
        assert run("fit", "--data", tmp_path / "none.csv", "--output-dir", tmp_path) == 2
        assert "not found" in capsys.readouterr().err
        assert run("fit", "--output-dir", tmp_path) == 2

    def test_bad_sampler_config(self, scene, tmp_path):
        assert run("fit", "--data", scene / "observations.csv", "--n-iter", 10, "--burn-in", 10,
                   "--output-dir", tmp_path) == 2

    def test_sampler_abort_exit_code(self, scene, tmp_path, monkeypatch):
        def abort(*a, **k):
            raise SamplerAbort("forced")

        monkeypatch.setattr(cli, "run_chain", abort)
        assert run("fit", "--data", scene / "observations.csv", "--output-dir", tmp_path) == 1

    def test_chains(self, scene, tmp_path):
        assert run("fit", "--data", scene / "observations.csv", "--n-iter", 30, "--burn-in", 10,
                   "--chains", 2, "--seed", 4, "--output-dir", tmp_path) == 0
        a = read_csv(tmp_path / "trace_chain0.csv")
        b = read_csv(tmp_path / "trace_chain1.csv")
        assert len(a["mu"]) == len(b["mu"]) == 20
        assert not np.array_equal(a["mu"], b["mu"])
        seeds = [c["seed"] for c in json.loads((tmp_path / "acceptance.json").read_text())["chains"]]
        assert len(set(seeds)) == 2


class TestPredict:
    def test_grid(self, scene, fitted, tmp_path):
        trace100 = tmp_path / "trace100.csv"
        lines = (fitted / "trace.csv").read_text().splitlines()
        trace100.write_text("\n".join(lines[:101]) + "\n")
        assert run("predict", "--data", scene / "observations.csv", "--trace", trace100,
                   "--nx", 10, "--ny", 10, "--output-dir", tmp_path / "p") == 0
        pred = read_csv(tmp_path / "p" / "prediction.csv")
        assert list(pred) == ["x", "y", "mean", "sd"] and len(pred["mean"]) == 100
        assert np.all(np.isfinite(pred["mean"])) and np.all(np.isfinite(pred["sd"]))
        assert np.all(pred["sd"] >= 0)

    def test_doubling_trace_is_stable(self, scene, fitted, tmp_path):
        data = io.ingest_observations(scene / "observations.csv")
        full = io.read_trace(fitted / "trace.csv")
        lines = (fitted / "trace.csv").read_text().splitlines()
        half = tmp_path / "half.csv"
        half.write_text("\n".join(lines[:101]) + "\n")
        for name, tr in (("half", half), ("full", fitted / "trace.csv")):
            assert run("predict", "--data", scene / "observations.csv", "--trace", tr, "--nx", 5,
                       "--ny", 5, "--psi-mode", "mean", "--output-dir", tmp_path / name) == 0
        m_half = read_csv(tmp_path / "half" / "prediction.csv")["mean"]
        m_full = read_csv(tmp_path / "full" / "prediction.csv")["mean"]
        # batch-means standard error of the full-trace mean
        grid = cli._grid_for({"x_min": None, "x_max": None, "y_min": None, "y_max": None,
                              "nx": 5, "ny": 5}, data)
        batches = []
        for k in range(10):
            part = io.read_trace(fitted / "trace.csv")
            part.samples = full.samples[20 * k:20 * (k + 1)]
            batches.append(predict_surface(data, part, grid, psi_mode="mean").mean)
        se = np.std(batches, axis=0, ddof=1) / math.sqrt(10)
        z = (m_half - m_full) / se
        assert math.sqrt(np.mean(z * z)) < 2.0

    def test_kernel_summaries(self, scene, fitted, tmp_path):
        assert run("predict", "--data", scene / "observations.csv", "--trace", fitted / "trace.csv",
                   "--nx", 2, "--ny", 2, "--max-samples", 20, "--kernel-summaries",
                   "--modal-tau-psi", "25,50", "--modal-max-sweeps", 2, "--n-angles", 12,
                   "--output-dir", tmp_path) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["kernels_mean_foci.csv", "kernels_modal_tau25.csv", "kernels_modal_tau50.csv",
                         "kernels_radial.csv", "metadata.json", "prediction.csv"]
        radial = read_csv(tmp_path / "kernels_radial.csv")
        assert len(radial["radius"]) == 20 * 12 and np.all(radial["radius"] > 0)
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["config"]["shrink_factor"] == 4.0
        assert meta["n_samples_used"] == 20

    def test_site_count_mismatch(self, fitted, tmp_path, capsys):
        obs = tmp_path / "obs.csv"
        obs.write_text("x,y,value\n0,0,1\n1,1,2\n")
        assert run("predict", "--data", obs, "--trace", fitted / "trace.csv",
                   "--output-dir", tmp_path) == 2
        assert "sites" in capsys.readouterr().err


class TestSummarize:
    def test_table(self, fitted, tmp_path, capsys):
        assert run("summarize", "--trace", fitted / "trace.csv", "--output-dir", tmp_path) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].split() == cli.SUMMARY_HEADER
        assert out[2].split()[0] == "mu"
        summ = read_csv_named(tmp_path / "summary.csv")
        assert summ[0] == cli.SUMMARY_HEADER
        params = [row[0] for row in summ[1:]]
        assert params[:5] == ["mu", "lambda_y", "lambda_z", "tau_z", "tau_psi"]
        assert params[5:7] == ["psi_x[0]", "psi_x[1]"] and params[-1] == "psi_y[19]"
        values = np.array([[float(v) for v in row[1:]] for row in summ[1:]])
        assert np.all(np.isfinite(values[:, :5]))

    def test_constant_column(self, scene, tmp_path):
        assert run("fit", "--data", scene / "observations.csv", "--n-iter", 30, "--burn-in", 10,
                   "--tau-psi-fixed", 25, "--output-dir", tmp_path) == 0
        assert run("summarize", "--trace", tmp_path / "trace.csv", "--output-dir", tmp_path / "s") == 0
        rows = {r[0]: r for r in read_csv_named(tmp_path / "s" / "summary.csv")}
        assert float(rows["tau_psi"][2]) == 0.0 and float(rows["tau_psi"][1]) == 25.0

    def test_empty_trace(self, tmp_path):
        p = tmp_path / "trace.csv"
        p.write_text(",".join(io.trace_header(2)) + "\n")
        assert run("summarize", "--trace", p, "--output-dir", tmp_path) == 2


def read_csv_named(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "procconv", "simulate", "--nx", "2", "--ny", "2",
                          "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "surface.csv").exists()
