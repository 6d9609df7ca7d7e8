"""CLI surface: exit codes, determinism, flag validation, and the
selector-collapse identity. Commands run in-process via main(argv)."""
import json

import numpy as np
import pytest

from kvcoreset import read_kvd, read_results
from kvcoreset.cli import main


@pytest.fixture
def cache_file(tmp_path):
    path = tmp_path / "cache.kvd"
    assert main(["gen", "--out", str(path), "--frames", "32",
                 "--tokens-per-frame", "4", "--layers", "3",
                 "--duplicate-rate", "0.1"]) == 0
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestGen:
    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.kvd", tmp_path / "b.kvd"
        assert run("gen", "--out", a, "--gen-seed", 3) == 0
        assert run("gen", "--out", b, "--gen-seed", 3) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        a, b = tmp_path / "a.kvd", tmp_path / "b.kvd"
        run("gen", "--out", a, "--gen-seed", 3)
        run("gen", "--out", b, "--gen-seed", 4)
        assert a.read_bytes() != b.read_bytes()


class TestCompress:
    def test_defaults_retain_budget_per_layer(self, cache_file, tmp_path):
        out = tmp_path / "out"
        assert run("compress", "--input", cache_file, "--budget", 24,
                   "--out", out) == 0
        comp = read_kvd(out / "compressed.kvd")
        assert comp.n_tokens == 24 and comp.n_layers == 3
        meta, records = read_results(out / "results.txt")
        assert meta["retained_tokens"] == 24
        assert len(records) == 3
        for rec in records:
            assert len(rec["retained_indices"]) == 24

    def test_byte_identical_reruns(self, cache_file, tmp_path):
        outs = []
        for name in ("o1", "o2"):
            out = tmp_path / name
            assert run("compress", "--input", cache_file, "--budget", 16,
                       "--out", out) == 0
            outs.append(out)
        a, b = outs
        assert (a / "compressed.kvd").read_bytes() == (b / "compressed.kvd").read_bytes()
        assert (a / "results.txt").read_bytes() == (b / "results.txt").read_bytes()

    def test_d2_equals_cords_lambda_zero(self, cache_file, tmp_path):
        run("compress", "--input", cache_file, "--budget", 16,
            "--selector", "d2", "--out", tmp_path / "d2")
        run("compress", "--input", cache_file, "--budget", 16,
            "--selector", "cords", "--lambda", 0, "--out", tmp_path / "l0")
        _, rec_a = read_results(tmp_path / "d2" / "results.txt")
        _, rec_b = read_results(tmp_path / "l0" / "results.txt")
        assert rec_a == rec_b

    @pytest.mark.parametrize(
        "selector", ["cords", "d2", "uniform", "random", "vnorm", "kmeans",
                     "shortlist"]
    )
    def test_every_selector_runs(self, cache_file, tmp_path, selector):
        out = tmp_path / selector
        assert run("compress", "--input", cache_file, "--budget", 8,
                   "--selector", selector, "--out", out) == 0
        _, records = read_results(out / "results.txt")
        assert len(records[0]["retained_indices"]) == 8

    def test_alpha_out_of_range_is_usage_error(self, cache_file, tmp_path):
        assert run("compress", "--input", cache_file, "--budget", 8,
                   "--alpha", 1.5, "--out", tmp_path / "x") == 1

    def test_missing_input(self, tmp_path):
        assert run("compress", "--input", tmp_path / "nope.kvd",
                   "--budget", 8, "--out", tmp_path / "x") == 1

    def test_bad_budget(self, cache_file, tmp_path):
        assert run("compress", "--input", cache_file, "--budget", 0,
                   "--out", tmp_path / "x") == 1
        assert run("compress", "--input", cache_file, "--budget", 10**6,
                   "--out", tmp_path / "x") == 1

    def test_corrupt_input(self, tmp_path):
        bad = tmp_path / "bad.kvd"
        bad.write_bytes(b"garbage")
        assert run("compress", "--input", bad, "--budget", 4,
                   "--out", tmp_path / "x") == 1

    def test_threads_flag_does_not_change_output(self, cache_file, tmp_path):
        run("compress", "--input", cache_file, "--budget", 16,
            "--out", tmp_path / "t1")
        run("--threads", 4, "compress", "--input", cache_file, "--budget", 16,
            "--out", tmp_path / "t4")
        assert (tmp_path / "t1" / "results.txt").read_bytes() == \
               (tmp_path / "t4" / "results.txt").read_bytes()
        assert run("--threads", 0, "compress", "--input", cache_file,
                   "--budget", 16, "--out", tmp_path / "t0") == 1


class TestStream:
    def test_under_budget_is_identity(self, cache_file, tmp_path):
        out = tmp_path / "s"
        assert run("stream", "--input", cache_file, "--budget", 512,
                   "--out", out) == 0
        meta, records = read_results(out / "stream_log.txt")
        assert meta["firings"] == 0 and records == []
        back = read_kvd(out / "stream.kvd")
        orig = read_kvd(cache_file)
        np.testing.assert_array_equal(back.layers[0].keys, orig.layers[0].keys)
        np.testing.assert_array_equal(back.positions, orig.positions)

    def test_over_budget_bounded_and_deterministic(self, cache_file, tmp_path):
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert run("stream", "--input", cache_file, "--budget", 32,
                       "--block-tokens", 16, "--out", out) == 0
            outs.append(out)
        a, b = outs
        assert (a / "stream.kvd").read_bytes() == (b / "stream.kvd").read_bytes()
        assert (a / "stream_log.txt").read_bytes() == (b / "stream_log.txt").read_bytes()
        meta, _ = read_results(a / "stream_log.txt")
        assert meta["firings"] >= 1

    def test_layer_list_and_anchors(self, cache_file, tmp_path):
        assert run("stream", "--input", cache_file, "--budget", 32,
                   "--layers-mode", "0,1", "--anchors", "0",
                   "--out", tmp_path / "s") == 0
        meta, _ = read_results(tmp_path / "s" / "stream_log.txt")
        assert meta["active_layers"] == [0, 1] and meta["anchors"] == [0]

    def test_all_layers_mode(self, cache_file, tmp_path):
        assert run("stream", "--input", cache_file, "--budget", 32,
                   "--layers-mode", "all", "--out", tmp_path / "s") == 0
        meta, _ = read_results(tmp_path / "s" / "stream_log.txt")
        assert meta["active_layers"] == [0, 1, 2]

    def test_bad_layer_list(self, cache_file, tmp_path):
        assert run("stream", "--input", cache_file, "--budget", 32,
                   "--layers-mode", "0,9", "--out", tmp_path / "s") == 1


class TestDiagnose:
    def test_emits_csvs(self, cache_file, tmp_path):
        out = tmp_path / "d"
        assert run("diagnose", "--input", cache_file, "--budget", 24,
                   "--queries", 4, "--out", out) == 0
        eb = (out / "error_bounds.csv").read_text().splitlines()
        assert eb[0] == "query,error,bound_v,bound_dalpha"
        assert len(eb) == 5
        cc = (out / "coverage_cdf.csv").read_text().splitlines()
        assert cc[0] == "metric,layer,distance"
        assert any(line.startswith("JointKV,pooled,") for line in cc)

    def test_deterministic(self, cache_file, tmp_path):
        for name in ("d1", "d2"):
            run("diagnose", "--input", cache_file, "--budget", 16,
                "--out", tmp_path / name)
        assert (tmp_path / "d1" / "error_bounds.csv").read_bytes() == \
               (tmp_path / "d2" / "error_bounds.csv").read_bytes()
        assert (tmp_path / "d1" / "coverage_cdf.csv").read_bytes() == \
               (tmp_path / "d2" / "coverage_cdf.csv").read_bytes()


class TestAudit:
    def test_clean_audit(self, tmp_path, capsys):
        assert run("audit", "--trials", 200, "--out", tmp_path / "a.txt") == 0
        printed = capsys.readouterr().out
        assert "max identity deviation" in printed
        meta, records = read_results(tmp_path / "a.txt")
        assert meta["max_identity_diff"] <= 1e-8
        assert len(records) == 200


class TestSweep:
    def test_grid_rows(self, cache_file, tmp_path):
        out = tmp_path / "w"
        assert run("sweep", "--input", cache_file, "--alphas", "0,0.25,0.5,1",
                   "--budgets", "16", "--queries", 2, "--out", out) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 5  # header + 4 alpha rows
        assert lines[0].startswith("alpha,eta,lambda,budget,quant_error")

    def test_deterministic(self, cache_file, tmp_path):
        for name in ("w1", "w2"):
            run("sweep", "--input", cache_file, "--alphas", "0.25",
                "--budgets", "8,16", "--out", tmp_path / name)
        assert (tmp_path / "w1" / "sweep.csv").read_bytes() == \
               (tmp_path / "w2" / "sweep.csv").read_bytes()


class TestConfigFile:
    def test_env_var_supplies_defaults(self, cache_file, tmp_path, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"alpha": 0.5, "lambda": 0.0}))
        monkeypatch.setenv("KVCORESET_CONFIG", str(cfg))
        out = tmp_path / "c"
        assert run("compress", "--input", cache_file, "--budget", 8,
                   "--out", out) == 0
        meta, _ = read_results(out / "results.txt")
        assert meta["config"]["alpha"] == 0.5
        assert meta["config"]["lam"] == 0.0

    def test_flags_override_config_file(self, cache_file, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"alpha": 0.5}))
        out = tmp_path / "c"
        assert run("--config", cfg, "compress", "--input", cache_file,
                   "--budget", 8, "--alpha", 0.75, "--out", out) == 0
        meta, _ = read_results(out / "results.txt")
        assert meta["config"]["alpha"] == 0.75
