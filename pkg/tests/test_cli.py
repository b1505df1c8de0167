"""Command-line surface: the full pipeline, exit codes, determinism."""

import os
import time

import numpy as np
import pytest

from brtf import io
from brtf.cli import main

from conftest import random_problem


def run(*argv):
    return main(list(argv))


class TestSimulate:
    def test_writes_all_artifacts(self, tmp_path):
        out = str(tmp_path / "sim")
        assert run("simulate", "--output-dir", out, "--shape", "8,8,8",
                   "--seed", "3", "--missing-fraction", "0.2") == 0
        for name in ("y.bt", "mask.bm", "x_true.bt", "factor_0.bt", "factor_1.bt",
                     "factor_2.bt", "outliers.bt", "outlier_mask.bm"):
            assert os.path.exists(os.path.join(out, name)), name

    def test_identical_seed_identical_files(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert run("simulate", "--output-dir", out, "--shape", "6,6,6",
                       "--seed", "7") == 0
        for name in ("y.bt", "mask.bm", "x_true.bt"):
            assert open(os.path.join(a, name), "rb").read() == \
                open(os.path.join(b, name), "rb").read()

    def test_bad_shape_is_usage_error(self, tmp_path):
        assert run("simulate", "--output-dir", str(tmp_path), "--shape", "x,y") == 1


class TestFit:
    def test_max_iters_one_exits_two_with_single_trace_entry(self, tmp_path):
        sim = str(tmp_path / "sim")
        run("simulate", "--output-dir", sim, "--shape", "8,8,8", "--seed", "0")
        out = str(tmp_path / "fit")
        code = run("fit", "--input", os.path.join(sim, "y.bt"),
                   "--output-dir", out, "--init-rank", "3", "--max-iters", "1")
        assert code == 2
        report = io.read_report(os.path.join(out, "report.json"))
        assert len(report["elbo_trace"]) == 1
        assert report["converged"] is False

    def test_missing_input_is_error(self, tmp_path):
        assert run("fit", "--input", str(tmp_path / "absent.bt"),
                   "--output-dir", str(tmp_path / "out")) == 1

    def test_input_flag_required(self):
        assert run("fit", "--output-dir", "/tmp/whatever") == 1

    def test_nan_encoded_input_needs_no_mask(self, tmp_path):
        y, mask = random_problem(1, shape=(6, 6, 6), observed_fraction=0.7)
        path = str(tmp_path / "y.bt")
        io.write_tensor(path, y, mask=mask, encoding=io.ENC_NAN_MISSING)
        out = str(tmp_path / "fit")
        code = run("fit", "--input", path, "--output-dir", out,
                   "--init-rank", "2", "--max-iters", "4")
        assert code in (0, 2)
        _, loaded_mask = io.load_checkpoint(os.path.join(out, "checkpoint.brtc"))
        np.testing.assert_array_equal(loaded_mask, mask)

    def test_mask_conflict_rejected(self, tmp_path):
        y, mask = random_problem(2, shape=(5, 5, 5), observed_fraction=0.8)
        ypath = str(tmp_path / "y.bt")
        mpath = str(tmp_path / "m.bm")
        io.write_tensor(ypath, y, mask=mask, encoding=io.ENC_NAN_MISSING)
        io.write_mask(mpath, mask)
        assert run("fit", "--input", ypath, "--mask", mpath,
                   "--output-dir", str(tmp_path / "out")) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> fit -> (predict/eval run in the tests); the whole default
    problem must stay well under a minute."""
    started = time.perf_counter()
    root = tmp_path_factory.mktemp("pipeline")
    sim = str(root / "sim")
    fit_dir = str(root / "fit")
    assert run("simulate", "--output-dir", sim, "--seed", "1",
               "--missing-fraction", "0.3") == 0
    code = run("fit", "--input", os.path.join(sim, "y.bt"),
               "--mask", os.path.join(sim, "mask.bm"),
               "--output-dir", fit_dir, "--init-rank", "10",
               "--max-iters", "120", "--seed", "1")
    assert code in (0, 2)
    assert time.perf_counter() - started < 60.0
    return root, sim, fit_dir


class TestPipeline:

    def test_fit_recovers_rank_three(self, pipeline):
        _, _, fit_dir = pipeline
        report = io.read_report(os.path.join(fit_dir, "report.json"))
        assert report["inferred_rank"] == 3

    def test_predict_missing_entries(self, pipeline):
        root, _, fit_dir = pipeline
        pred = str(root / "pred")
        assert run("predict", "--checkpoint",
                   os.path.join(fit_dir, "checkpoint.brtc"),
                   "--output-dir", pred) == 0
        means, mask = io.read_tensor(os.path.join(pred, "pred_mean.bt"))
        assert mask is not None and mask.any()
        lines = open(os.path.join(pred, "entries.csv")).read().splitlines()
        assert lines[0] == "index,mean,variance"
        assert len(lines) == 1 + int(mask.sum())

    def test_eval_metrics(self, pipeline):
        root, sim, fit_dir = pipeline
        out = str(root / "metrics.csv")
        assert run("eval", "--truth", os.path.join(sim, "x_true.bt"),
                   "--checkpoint", os.path.join(fit_dir, "checkpoint.brtc"),
                   "--truth-factors", os.path.join(sim, "factor_0.bt"),
                   os.path.join(sim, "factor_1.bt"), os.path.join(sim, "factor_2.bt"),
                   "--mask", os.path.join(sim, "mask.bm"),
                   "--output", out) == 0
        lines = open(out).read().splitlines()
        assert lines[0] == io.METRICS_HEADER
        fields = lines[1].split(",")
        assert float(fields[5]) < 0.15   # overall error
        assert float(fields[6]) < 0.2    # missing-entry error
        assert float(fields[7]) < 0.15   # factor match error
        assert int(fields[8]) == 3


class TestEval:
    def test_truth_against_itself_is_zero(self, tmp_path):
        y, _ = random_problem(3, shape=(5, 5, 5))
        path = str(tmp_path / "x.bt")
        io.write_tensor(path, y)
        out = str(tmp_path / "m.csv")
        assert run("eval", "--truth", path, "--estimate", path,
                   "--output", out) == 0
        fields = open(out).read().splitlines()[1].split(",")
        assert float(fields[5]) == 0.0

    def test_requires_estimate_or_checkpoint(self, tmp_path):
        y, _ = random_problem(4)
        path = str(tmp_path / "x.bt")
        io.write_tensor(path, y)
        assert run("eval", "--truth", path, "--output",
                   str(tmp_path / "m.csv")) == 1


class TestPredictEdge:
    def test_complete_checkpoint_missing_only_warns_and_writes_empty(self, tmp_path, capsys):
        y, _ = random_problem(5, shape=(5, 4, 3))
        ypath = str(tmp_path / "y.bt")
        io.write_tensor(ypath, y)
        fit_dir = str(tmp_path / "fit")
        assert run("fit", "--input", ypath, "--output-dir", fit_dir,
                   "--init-rank", "2", "--max-iters", "3") in (0, 2)
        pred = str(tmp_path / "pred")
        assert run("predict", "--checkpoint",
                   os.path.join(fit_dir, "checkpoint.brtc"),
                   "--output-dir", pred) == 0
        assert "no missing entries" in capsys.readouterr().err
        lines = open(os.path.join(pred, "entries.csv")).read().splitlines()
        assert lines == ["index,mean,variance"]

    def test_all_entries_flag(self, tmp_path):
        y, mask = random_problem(6, shape=(5, 4, 3), observed_fraction=0.7)
        ypath = str(tmp_path / "y.bt")
        mpath = str(tmp_path / "m.bm")
        io.write_tensor(ypath, y)
        io.write_mask(mpath, mask)
        fit_dir = str(tmp_path / "fit")
        assert run("fit", "--input", ypath, "--mask", mpath, "--output-dir",
                   fit_dir, "--init-rank", "2", "--max-iters", "3") in (0, 2)
        pred = str(tmp_path / "pred")
        assert run("predict", "--checkpoint",
                   os.path.join(fit_dir, "checkpoint.brtc"),
                   "--output-dir", pred, "--all-entries") == 0
        means, enc_mask = io.read_tensor(os.path.join(pred, "pred_mean.bt"))
        assert enc_mask is None or enc_mask.all()
