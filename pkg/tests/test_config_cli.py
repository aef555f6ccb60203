import subprocess
import sys

import numpy as np
import pytest

from conftest import small_config
from nsnudge import config
from nsnudge.assimilation import ErrorSeries
from nsnudge.cli import main
from nsnudge.ensemble import EnsembleStats
from nsnudge.observables import write_network_file
from nsnudge.runner import read_table
from nsnudge.spectral import load_checkpoint, norms


@pytest.fixture
def cfg_file(tmp_path):
    def make(**overrides):
        path = tmp_path / f"cfg{len(list(tmp_path.glob('cfg*')))}.ini"
        path.write_text(config.serialize(small_config(**overrides)))
        return str(path)
    return make


def snapshot(directory):
    return {p.name: (p.stat().st_mtime_ns, p.read_bytes()) for p in sorted(directory.iterdir())}


class TestConfig:
    def test_round_trip_defaults(self):
        text = config.serialize(config.defaults())
        assert config.serialize(config.parse(text)) == text
        assert config.parse(text) == config.defaults()

    def test_round_trip_small(self):
        cfg = small_config(outlier_M="12.5", initial_state="state.ckpt")
        assert config.parse(config.serialize(cfg)) == cfg

    def test_partial_file_uses_defaults(self):
        cfg = config.parse("[run]\nnu = 0.002\n")
        assert cfg["nu"] == 0.002 and cfg["grid_n"] == 128

    @pytest.mark.parametrize("text, message", [
        ("grid_n = 100", "power of two"),
        ("dt = 0.3", "delta/dt"),
        ("mu = -1", "mu must be non-negative"),
        ("mode = fancy", "plain or filtered"),
        ("outlier_M = -3", "outlier_M"),
        ("colour = red", "unknown config key"),
        ("nu = abc", "bad value for nu"),
        ("force_lambda_M = 5000", "dealiased range"),
        ("bands = 0.5, 1.2", "band levels"),
        ("network = lattice:x", "lattice network"),
        ("window_lo = 400", "window_lo"),
    ])
    def test_rejections(self, text, message):
        with pytest.raises(config.ConfigFileError, match=message):
            config.parse("[run]\n" + text + "\n")

    def test_manifest_is_a_config(self, cfg_file, tmp_path):
        out = tmp_path / "force"
        assert main(["make-force", "--config", cfg_file(), "--out", str(out)]) == 0
        again = config.load(out / "manifest.ini")
        assert again == small_config()


class TestMakeForce:
    def test_same_seed_same_file(self, cfg_file, tmp_path):
        f = cfg_file()
        for d in ("a", "b"):
            assert main(["make-force", "--config", f, "--seed", "4", "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a/force.ckpt").read_bytes() == (tmp_path / "b/force.ckpt").read_bytes()
        (force,), _ = load_checkpoint(tmp_path / "a/force.ckpt")
        assert norms(force)[0] == pytest.approx(0.1, rel=1e-14)

    def test_zero_force(self, cfg_file, tmp_path):
        assert main(["make-force", "--config", cfg_file(force_l2=0.0), "--out", str(tmp_path / "z")]) == 0
        (force,), _ = load_checkpoint(tmp_path / "z/force.ckpt")
        assert np.all(force.coeffs == 0)

    def test_refuses_existing_run(self, cfg_file, tmp_path, capsys):
        f = cfg_file()
        main(["make-force", "--config", f, "--out", str(tmp_path / "a")])
        before = snapshot(tmp_path / "a")
        assert main(["make-force", "--config", f, "--out", str(tmp_path / "a")]) == 2
        assert "refusing to overwrite" in capsys.readouterr().err
        assert snapshot(tmp_path / "a") == before


class TestSpinup:
    def test_resume_matches_uninterrupted(self, cfg_file, tmp_path):
        assert main(["spinup", "--config", cfg_file(spinup_time=20.0), "--out", str(tmp_path / "full")]) == 0
        assert main(["spinup", "--config", cfg_file(spinup_time=10.0), "--out", str(tmp_path / "half")]) == 0
        assert main(["spinup", "--config", cfg_file(spinup_time=20.0), "--from", str(tmp_path / "half/state.ckpt"),
                     "--out", str(tmp_path / "rest")]) == 0
        (a,), ta = load_checkpoint(tmp_path / "full/state.ckpt")
        (b,), tb = load_checkpoint(tmp_path / "rest/state.ckpt")
        assert ta == tb == 20.0
        assert np.array_equal(a.coeffs, b.coeffs)

    def test_outputs(self, cfg_file, tmp_path):
        out = tmp_path / "s"
        assert main(["spinup", "--config", cfg_file(spinup_time=5.0), "--out", str(out)]) == 0
        assert {"state.ckpt", "energy.csv", "energy.png", "summary.txt", "manifest.ini", "columns.txt"} <= set(
            p.name for p in out.iterdir())
        header, rows = read_table(out / "energy.csv")
        assert header == ["t", "l2", "h1"]
        assert rows[-1, 0] == 5.0


class TestRuns:
    def test_assimilate_and_single_member_ensemble(self, cfg_file, tmp_path):
        f = cfg_file(epsilon=1e-2)
        assert main(["assimilate", "--config", f, "--out", str(tmp_path / "a")]) == 0
        assert main(["ensemble", "--config", f, "--members", "1", "--out", str(tmp_path / "e")]) == 0
        series = ErrorSeries.from_csv(tmp_path / "a/error.csv")
        stats = EnsembleStats.from_csv(tmp_path / "e/stats.csv")
        assert np.array_equal(series.w_h1_sq, stats.mean_sq_error)
        assert (tmp_path / "a/error.png").stat().st_size > 0
        assert (tmp_path / "e/stats.png").stat().st_size > 0
        assert not list((tmp_path / "e").glob("*.truth.npy"))

    def test_ensemble_rerun_bitwise_across_workers(self, cfg_file, tmp_path, monkeypatch):
        f = cfg_file(epsilon=1e-2)
        monkeypatch.setenv("NUDGE_WORKERS", "1")
        assert main(["ensemble", "--config", f, "--out", str(tmp_path / "a")]) == 0
        monkeypatch.setenv("NUDGE_WORKERS", "2")
        assert main(["ensemble", "--config", str(tmp_path / "a/manifest.ini"), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a/stats.csv").read_bytes() == (tmp_path / "b/stats.csv").read_bytes()

    def test_sweep_outputs_and_stats_read_only(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "sw"
        assert main(["sweep", "--config", cfg_file(), "--out", str(out)]) == 0
        names = {p.name for p in out.iterdir()}
        assert {"stats_eps1e-02.csv", "stats_eps1e-03.csv", "stats_eps1e-04.csv", "scaling.csv",
                "scaling.png", "stats.png", "summary.txt", "manifest.ini", "columns.txt"} <= names
        header, table = read_table(out / "scaling.csv")
        assert header == ["epsilon", "sigma_sq", "max", "avg", "min"]
        assert len(table) == 3
        first = (out / "stats_eps1e-02.csv").read_text().splitlines()
        assert first[0] == "# manifest=manifest.ini"
        capsys.readouterr()
        before = snapshot(out)
        assert main(["stats", "--in", str(out), "--window", "5", "20"]) == 0
        report = capsys.readouterr().out
        assert report.count("max/avg=") == 3
        assert snapshot(out) == before

    def test_mu_sweep(self, cfg_file, tmp_path):
        out = tmp_path / "mu"
        assert main(["sweep", "--over", "mu", "--config", cfg_file(), "--out", str(out)]) == 0
        header, rows = read_table(out / "sync.csv")
        assert header == ["t", "mu_0.5", "mu_1"]
        assert rows[-1, 2] < rows[0, 2]

    def test_stats_missing(self, tmp_path, capsys):
        assert main(["stats", "--in", str(tmp_path)]) == 2


class TestCertify:
    def test_pass(self, cfg_file, tmp_path, capsys):
        assert main(["certify", "--config", cfg_file(), "--out", str(tmp_path / "c")]) == 0
        text = (tmp_path / "c/certify.txt").read_text()
        assert "type1 = PASS" in text
        assert text.count("PASS") == 4

    def test_gamma_rejected(self, cfg_file, tmp_path, capsys):
        net = tmp_path / "net.txt"
        write_network_file(net, [(0.0, 0.0), (3.0, 3.0)], 4.0)
        rc = main(["certify", "--config", cfg_file(network=str(net)), "--out", str(tmp_path / "c")])
        assert rc == 2
        assert "0 < gamma < 1" in capsys.readouterr().err

    def test_network_file_accepted(self, cfg_file, tmp_path):
        net = tmp_path / "net.txt"
        pts = np.random.default_rng(0).uniform(0, 6.28, (12, 2))
        write_network_file(net, pts, 0.35, seed=0)
        assert main(["certify", "--config", cfg_file(network=str(net)), "--out", str(tmp_path / "c")]) == 0


def test_show_config(capsys):
    assert main(["show-config"]) == 0
    assert config.parse(capsys.readouterr().out) == config.defaults()


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "nsnudge.cli", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("make-force", "spinup", "assimilate", "ensemble", "sweep", "certify", "stats"):
        assert cmd in out.stdout
