import csv
import dataclasses
import json

import numpy as np
import pytest

from mtpose.cli import main as cli_main
from mtpose.cnn import Activation
from mtpose.exceptions import MtposeError
from mtpose.harness import (
    RESULTS_HEADER,
    CsvSource,
    MrclOpts,
    PipelineConfig,
    TrainingOpts,
    Variant,
    ablate,
    compare_activations,
    compare_losses,
    config_from_dict,
    run_pipeline,
    write_results_csv,
)
from mtpose.multitask import Penalty, SolverOpts
from mtpose.synth import SceneParams


def _tiny_config(**kw):
    defaults = dict(
        variant=Variant.TDL,
        activation=Activation.RELU,
        mtl_penalty=Penalty.LASSO,
        repeats=1,
        seed=5,
        solver=SolverOpts(rho1=0.01, standardize=True, max_iter=500),
        training=TrainingOpts(epochs=1, eta=0.05, batch_size=4),
        mrcl=MrclOpts(max_iter=100),
        scene=SceneParams(
            n_subjects=2, n_samples=10, views=2, seed=0, image_size=32
        ),
    )
    defaults.update(kw)
    return PipelineConfig(**defaults)


def test_config_validation():
    with pytest.raises(MtposeError):
        _tiny_config(repeats=0)
    with pytest.raises(MtposeError):
        PipelineConfig(scene=None, csv=None)
    with pytest.raises(MtposeError):
        PipelineConfig(csv=CsvSource("x", "y", 5))  # scene also set


def test_tdl_memorizes_toy_set():
    # zero-noise, 10 samples/task: stage 2 has 512 features for 10 points
    # and must drive the training error to nearly zero
    report = run_pipeline(_tiny_config())
    assert not report.incomplete
    assert report.results[0].train_mae_pan < 1.0


def test_repeat_determinism_bit_identical():
    config = _tiny_config(variant=Variant.M2DL)
    r1 = run_pipeline(config)
    r2 = run_pipeline(config)
    assert r1.results[0].mae_pan == r2.results[0].mae_pan
    assert r1.results[0].mae_tilt == r2.results[0].mae_tilt


def test_seed_isolation_repeat0_unchanged_by_more_repeats():
    one = run_pipeline(_tiny_config(repeats=1))
    two = run_pipeline(_tiny_config(repeats=2))
    assert one.results[0].mae_pan == two.results[0].mae_pan
    assert two.results[1].mae_pan != two.results[0].mae_pan


def test_cached_stage2_rerun_matches_full_rerun():
    config = _tiny_config(variant=Variant.MDL)
    cache: dict = {}
    run_pipeline(config, cache)  # populates dataset + feature cache
    cached = run_pipeline(config, cache)  # stage-2-only rerun
    full = run_pipeline(config)
    assert cached.results[0].mae_pan == full.results[0].mae_pan


def test_report_mean_std_consistent_with_repeats():
    report = run_pipeline(_tiny_config(repeats=3))
    vals = np.array([r.mae_pan for r in report.results])
    assert abs(report.mean_pan - vals.mean()) < 1e-12
    assert abs(report.std_pan - vals.std()) < 1e-12


def test_aborted_repeat_recorded_not_raised(tmp_path):
    config = _tiny_config(
        scene=None,
        csv=CsvSource(str(tmp_path), str(tmp_path / "none.csv"), 5),
    )
    report = run_pipeline(config)
    assert report.incomplete
    assert report.results[0].error is not None
    assert np.isnan(report.results[0].mae_pan)


def test_compare_activations_three_reports_shared_data():
    reports = compare_activations(_tiny_config())
    assert [r.activation.value for r in reports] == ["relu", "sigmoid", "tanh"]
    assert all(r.variant is Variant.TDL for r in reports)


def test_compare_losses_four_reports_exact_labels():
    reports = compare_losses(_tiny_config())
    assert [r.penalty.value for r in reports] == [
        "LeastTrace",
        "LeastL21",
        "LeastLasso",
        "LeastSparseTrace",
    ]


def test_ablate_four_variants_and_coupling_structure():
    reports = ablate(_tiny_config())
    assert [r.variant.value for r in reports] == ["M2DL", "SMDL", "MDL", "TDL"]
    # raw-feature variants see identical stage-1 features, so any difference
    # between MDL and TDL is purely the multi-task coupling
    by = {r.variant: r.results[0].mae_pan for r in reports}
    assert np.isfinite(list(by.values())).all()


def test_write_results_csv_format(tmp_path):
    reports = ablate(_tiny_config())
    path = tmp_path / "results.csv"
    write_results_csv(reports, path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == RESULTS_HEADER
    # one row per repeat plus one summary row per report
    assert len(rows) == 1 + len(reports) * (1 + 1)
    summaries = [r for r in rows[1:] if r[3] == "-1"]
    assert len(summaries) == 4
    for s in summaries:
        assert s[8] != ""  # std_pan_deg filled on the summary row
    per_repeat = [r for r in rows[1:] if r[3] != "-1"]
    for r in per_repeat:
        assert r[8] == ""


def test_results_csv_deterministic_excluding_wall(tmp_path):
    config = _tiny_config(repeats=2)
    for name in ("a.csv", "b.csv"):
        write_results_csv([run_pipeline(config)], tmp_path / name)

    def strip_wall(p):
        with open(p) as fh:
            return [
                [c for i, c in enumerate(row) if RESULTS_HEADER[i] != "wall_ms"]
                for row in csv.reader(fh)
            ]

    assert strip_wall(tmp_path / "a.csv") == strip_wall(tmp_path / "b.csv")


# ----------------------------------------------------------- config parsing


def test_config_from_dict_full_round_trip():
    data = {
        "variant": "M2DL",
        "activation": "tanh",
        "mtl_penalty": "LeastTrace",
        "repeats": 3,
        "seed": 9,
        "solver": {"rho1": 0.5, "standardize": False},
        "training": {"epochs": 2, "eta": 0.01},
        "mrcl": {"lam": 0.2},
        "scene": {"n_samples": 5, "views": 2},
    }
    config = config_from_dict(data)
    assert config.variant is Variant.M2DL
    assert config.activation is Activation.TANH
    assert config.mtl_penalty is Penalty.TRACE
    assert config.repeats == 3 and config.seed == 9
    assert config.solver.rho1 == 0.5
    assert config.training.epochs == 2
    assert config.mrcl.lam == 0.2
    assert config.scene.n_samples == 5


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(MtposeError):
        config_from_dict({"not_a_field": 1})
    with pytest.raises(MtposeError):
        config_from_dict({"variant": "XXDL"})


def test_config_from_dict_csv_source():
    config = config_from_dict(
        {"csv": {"image_dir": "d", "annotations": "a.csv", "n_train": 4}}
    )
    assert config.scene is None
    assert config.csv.n_train == 4


# -------------------------------------------------------------------- CLI


def _write_config(tmp_path, **overrides):
    data = {
        "variant": "TDL",
        "activation": "relu",
        "mtl_penalty": "LeastLasso",
        "repeats": 1,
        "seed": 2,
        "solver": {"rho1": 0.01, "standardize": True, "max_iter": 500},
        "training": {"epochs": 1, "eta": 0.05, "batch_size": 4},
        "scene": {"n_subjects": 2, "n_samples": 8, "views": 2, "image_size": 32},
    }
    data.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_cli_eval_writes_results(tmp_path):
    cfg = _write_config(tmp_path)
    out = str(tmp_path / "results.csv")
    assert cli_main(["eval", "--config", cfg, "--out", out]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == RESULTS_HEADER
    assert rows[1][0] == "TDL"


def test_cli_flag_overrides_config(tmp_path):
    cfg = _write_config(tmp_path)
    out = str(tmp_path / "results.csv")
    assert cli_main(["eval", "--config", cfg, "--variant", "MDL", "--out", out]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[1][0] == "MDL"


def test_cli_gen_data_and_csv_pipeline(tmp_path):
    cfg = _write_config(tmp_path)
    ds = str(tmp_path / "ds")
    assert cli_main(["gen-data", "--config", cfg, "--out", ds]) == 0
    cfg2 = _write_config(
        tmp_path,
        scene=None,
        csv={
            "image_dir": ds,
            "annotations": str(tmp_path / "ds" / "annotations.csv"),
            "n_train": 8,
        },
    )
    out = str(tmp_path / "results.csv")
    assert cli_main(["eval", "--config", cfg2, "--out", out]) == 0


def test_cli_train_writes_checkpoints(tmp_path):
    cfg = _write_config(tmp_path)
    out = str(tmp_path / "ckpt")
    assert cli_main(["train", "--config", cfg, "--out", out]) == 0
    import os

    assert sorted(os.listdir(out)) == ["task0.npz", "task1.npz"]


def test_cli_lrr_demo_runs():
    assert cli_main(["lrr-demo", "--seed", "0"]) == 0


def test_cli_ablate_and_compare_commands(tmp_path):
    cfg = _write_config(tmp_path)
    for cmd in ("ablate", "compare-losses"):
        out = str(tmp_path / f"{cmd}.csv")
        assert cli_main([cmd, "--config", cfg, "--out", out]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert len([r for r in rows[1:] if r[3] == "-1"]) == 4


def test_cli_nonzero_exit_on_aborted_group(tmp_path, capsys):
    cfg = _write_config(
        tmp_path,
        scene=None,
        csv={
            "image_dir": str(tmp_path),
            "annotations": str(tmp_path / "missing.csv"),
            "n_train": 4,
        },
    )
    out = str(tmp_path / "results.csv")
    assert cli_main(["eval", "--config", cfg, "--out", out]) != 0
