"""End-to-end CLI: dataset, training phases, sampling, eval, analytics."""

import json
from pathlib import Path

import numpy as np
import pytest

from roar3d import checkpoint as ckpt
from roar3d.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from roar3d.evaluation import load_trace, save_trace


def _write_micro_cfg(path: Path, seed: int = 0) -> Path:
    cfg = path / "micro.cfg"
    cfg.write_text(
        "\n".join([
            "[world]",
            "points = 256",
            "patch_grid = 2",
            "feat_dim = 8",
            "[model]",
            "blocks = 2",
            "grid = 2",
            "model_dim = 16",
            "heads = 2",
            "head_dim = 4",
            "patches = 4",
            "feat_dim = 8",
            "[train]",
            "batch = 4",
            "steps_single = 25",
            "steps_mv = 25",
            "[sample]",
            "euler_steps = 8",
            "n_train = 16",
            "n_val = 2",
            "n_test = 4",
            "views_per_bin = 2",
            "[run]",
            f"seed = {seed}",
            "",
        ]),
        encoding="utf-8",
    )
    return cfg


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + both training phases, shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_micro_cfg(root)
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == EXIT_OK
    single = root / "single"
    assert main(["train-single", "--config", str(cfg), "--data", str(data),
                 "--out", str(single)]) == EXIT_OK
    up = root / "up"
    assert main(["upgrade", "--config", str(cfg), "--ckpt", str(single / "checkpoint.bin"),
                 "--out", str(up)]) == EXIT_OK
    mv = root / "mv"
    assert main(["train-mv", "--config", str(cfg), "--data", str(data),
                 "--ckpt", str(up / "checkpoint.bin"), "--out", str(mv)]) == EXIT_OK
    return {"root": root, "cfg": cfg, "data": data, "single": single, "up": up, "mv": mv}


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_manifest_contract(pipeline):
    manifest = (pipeline["data"] / "manifest.jsonl").read_text().splitlines()
    assert len(manifest) == 16 + 2 + 4
    recs = [json.loads(line) for line in manifest]
    assert {r["split"] for r in recs} == {"train", "val", "test"}
    assert all(set(r) == {"shape_id", "class", "seed", "split"} for r in recs)


def test_gen_data_refuses_overwrite_without_force(pipeline):
    code = main(["gen-data", "--config", str(pipeline["cfg"]), "--out", str(pipeline["data"])])
    assert code == EXIT_CONFIG


def test_gen_data_deterministic(tmp_path):
    cfg = _write_micro_cfg(tmp_path, seed=9)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-data", "--config", str(cfg), "--out", str(a)]) == EXIT_OK
    assert main(["gen-data", "--config", str(cfg), "--out", str(b)]) == EXIT_OK
    assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
    assert (a / "train.bin").read_bytes() == (b / "train.bin").read_bytes()


def test_gen_data_class_filter(tmp_path):
    cfg = _write_micro_cfg(tmp_path, seed=3)
    out = tmp_path / "nb"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out),
                 "--classes", "notched-box"]) == EXIT_OK
    recs = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
    assert all(r["class"] == "notched-box" for r in recs)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "bad"),
                 "--classes", "dodecahedron"]) == EXIT_CONFIG


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------


def test_training_artifacts_exist(pipeline):
    for run in ("single", "up", "mv"):
        out = pipeline[run]
        assert (out / "checkpoint.bin").exists()
        assert (out / "checkpoint.bin.json").exists()
        assert (out / "resolved.cfg").exists()
    for run in ("single", "mv"):
        lines = (pipeline[run] / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr,pert_fraction,pert_skips,routing_entropy_mean"
        assert len(lines) == 26  # header + 25 steps


def test_upgrade_marks_arch_routed(pipeline):
    meta = ckpt.load_sidecar(pipeline["up"] / "checkpoint.bin")
    assert meta["model"]["arch"] == "routed"


def test_train_mv_p_pert_zero_logs_zero_fraction(pipeline, tmp_path):
    out = tmp_path / "mv0"
    code = main(["train-mv", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                 "--ckpt", str(pipeline["up"] / "checkpoint.bin"), "--out", str(out),
                 "--p-pert", "0"])
    assert code == EXIT_OK
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[3] == "0.000000" for r in rows)


def test_train_mv_concat_baseline(pipeline, tmp_path):
    out = tmp_path / "concat"
    code = main(["train-mv", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                 "--ckpt", str(pipeline["single"] / "checkpoint.bin"), "--out", str(out),
                 "--arch", "concat"])
    assert code == EXIT_OK
    meta = ckpt.load_sidecar(out / "checkpoint.bin")
    assert meta["model"]["arch"] == "concat"


def test_missing_inputs_exit_code(pipeline, tmp_path):
    code = main(["train-mv", "--config", str(pipeline["cfg"]), "--data", str(tmp_path / "nope"),
                 "--ckpt", str(pipeline["up"] / "checkpoint.bin"), "--out", str(tmp_path / "x")])
    assert code == EXIT_MISSING
    code = main(["sample", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                 "--ckpt", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "y")])
    assert code == EXIT_MISSING
    code = main(["train-single", "--config", str(tmp_path / "absent.cfg"),
                 "--data", str(pipeline["data"]), "--out", str(tmp_path / "z")])
    assert code == EXIT_MISSING


def test_bad_config_exit_code(pipeline, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\np_pert = 1.5\n", encoding="utf-8")
    code = main(["train-single", "--config", str(bad), "--data", str(pipeline["data"]),
                 "--out", str(tmp_path / "w")])
    assert code == EXIT_CONFIG


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def test_sample_deterministic_bytes(pipeline, tmp_path):
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        code = main(["sample", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                     "--ckpt", str(pipeline["mv"] / "checkpoint.bin"), "--out", str(out),
                     "--views", "2", "--shape", "1", "--trace"])
        assert code == EXIT_OK
        outs.append(out)
    for fname in ("sample.bin", "sample.bin.json", "trace.rtrc", "trace.rtrc.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname


def test_sample_trace_shape_contract(pipeline, tmp_path):
    out = tmp_path / "tr"
    assert main(["sample", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                 "--ckpt", str(pipeline["mv"] / "checkpoint.bin"), "--out", str(out),
                 "--views", "3", "--trace"]) == EXIT_OK
    trace, v = load_trace(out / "trace.rtrc")
    assert v == 3
    assert trace.shape == (8, 2, 8)  # euler_steps x blocks x tokens
    assert trace.max() < 3


def test_sample_view_counts_both_work(pipeline, tmp_path):
    for views in (1, 4):
        out = tmp_path / f"v{views}"
        assert main(["sample", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                     "--ckpt", str(pipeline["mv"] / "checkpoint.bin"), "--out", str(out),
                     "--views", str(views)]) == EXIT_OK
        assert (out / "sample.bin").exists()
    bad = main(["sample", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                "--ckpt", str(pipeline["mv"] / "checkpoint.bin"), "--out", str(tmp_path / "vb"),
                "--views", "40"])
    assert bad == EXIT_CONFIG


# ---------------------------------------------------------------------------
# eval + analyze-router
# ---------------------------------------------------------------------------


def test_eval_outputs_and_determinism(pipeline, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        code = main(["eval", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                     "--ckpt", str(pipeline["mv"] / "checkpoint.bin"), "--out", str(out),
                     "--view-counts", "1,2,4"])
        assert code == EXIT_OK
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "summary.json").read_bytes() == (outs[1] / "summary.json").read_bytes()

    rows = (outs[0] / "metrics.csv").read_text().splitlines()
    assert rows[0] == "shape_id,view_count,cd_x1000,f1_0_1,f1_0_05"
    assert len(rows) == 1 + 3 * 4  # header + 3 view counts x 4 test shapes
    summary = json.loads((outs[0] / "summary.json").read_text())
    assert set(summary) == {"1", "2", "4"}


def test_analyze_router_constant_trace(tmp_path):
    trace = np.full((6, 3, 10), 1, dtype=int)
    paths = []
    for i in range(2):
        p = tmp_path / f"t{i}.rtrc"
        save_trace(p, trace, view_count=4)
        paths.append(str(p))
    out = tmp_path / "report.json"
    assert main(["analyze-router", "--out", str(out)] + paths) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["cross_block"]["mean"] == 1.0
    assert rep["cross_timestep"]["mean"] == 1.0
    assert rep["global"]["mean"] == 1.0


def test_analyze_router_matches_library_metrics(pipeline, tmp_path):
    out = tmp_path / "tr2"
    assert main(["sample", "--config", str(pipeline["cfg"]), "--data", str(pipeline["data"]),
                 "--ckpt", str(pipeline["mv"] / "checkpoint.bin"), "--out", str(out),
                 "--views", "4", "--trace"]) == EXIT_OK
    report_path = tmp_path / "rep.json"
    assert main(["analyze-router", "--out", str(report_path),
                 str(out / "trace.rtrc")]) == EXIT_OK
    rep = json.loads(report_path.read_text())
    from roar3d.evaluation import (cross_block_consistency, cross_timestep_consistency,
                                   global_consistency)
    trace, _ = load_trace(out / "trace.rtrc")
    assert rep["cross_block"]["mean"] == cross_block_consistency(trace)
    assert rep["cross_timestep"]["mean"] == cross_timestep_consistency(trace)
    assert rep["global"]["mean"] == global_consistency(trace)
