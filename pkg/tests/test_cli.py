import json
import subprocess
import sys

import numpy as np
import pytest

from idam.cli import BENCH_COLUMNS, TRAIN_COLUMNS, TrainRunConfig, build_config, main, read_csv
from idam.data import read_manifest, read_pair, write_xyz
from idam.errors import ConfigError
from idam.geometry import RigidTransform, compute_metrics

SMALL = ["--set", "count=10", "--set", "n_points=200", "--set", "crop_size=150"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--set", f"out_dir={root / 'data'}", *SMALL]) == 0
    train_args = [
        "train", "--set", f"data={root / 'data' / 'manifest.tsv'}", "--set", f"checkpoint={root / 'model.bin'}",
        "--set", f"log_csv={root / 'log.csv'}", "--set", "epochs=2", "--set", "lr=1e-3", "--set", "feature_scale=0.02",
    ]
    assert main(train_args) == 0
    return root


def test_gen_data_layout_and_seed_header(workspace):
    entries = read_manifest(workspace / "data" / "manifest.tsv")
    assert len(entries) == 10 and sum(e.split == "test" for e in entries) == 2
    header = (workspace / "data" / "manifest.tsv").read_text().splitlines()[0]
    assert header.startswith("# ") and json.loads(header[2:])["config"]["seed"] == 0
    pair = read_pair(workspace / "data" / entries[0].shape)
    assert pair.source.shape == (150, 3) and pair.provenance["seed"] == "0"


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--set", f"out_dir={tmp_path / name}", *SMALL]) == 0
    files = sorted((tmp_path / "a").rglob("*.txt"))
    assert len(files) == 10
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    # header line records out_dir, which differs by construction
    body = [(tmp_path / d / "manifest.tsv").read_text().splitlines()[1:] for d in ("a", "b")]
    assert body[0] == body[1]


def test_gen_data_noisy_and_empty(tmp_path):
    assert main(["gen-data", "--set", f"out_dir={tmp_path / 'n'}", "--set", "protocol=noisy", *SMALL]) == 0
    for e in read_manifest(tmp_path / "n" / "manifest.tsv"):
        assert read_pair(tmp_path / "n" / e.shape).provenance["noise"] is True
    assert main(["gen-data", "--set", f"out_dir={tmp_path / 'e'}", "--set", "count=0"]) == 0
    assert read_manifest(tmp_path / "e" / "manifest.tsv") == []


def test_invalid_protocol_exits_nonzero(tmp_path, capsys):
    assert main(["gen-data", "--set", f"out_dir={tmp_path}", "--set", "protocol=bogus"]) == 1
    assert "protocol" in capsys.readouterr().err


def test_train_csv(workspace):
    rows = read_csv(workspace / "log.csv")
    assert len(rows) == 2 and list(rows[0]) == TRAIN_COLUMNS
    assert all(float(r["match_loss"]) > 0 for r in rows)


def test_resume_zero_epochs_is_byte_identical(workspace, tmp_path):
    out = tmp_path / "again.bin"
    args = [
        "train", "--set", f"data={workspace / 'data' / 'manifest.tsv'}", "--set", f"resume={workspace / 'model.bin'}",
        "--set", f"checkpoint={out}", "--set", f"log_csv={tmp_path / 'l.csv'}", "--set", "epochs=0",
    ]
    assert main(args) == 0
    assert out.read_bytes() == (workspace / "model.bin").read_bytes()
    assert read_csv(tmp_path / "l.csv") == []


def test_register_prints_transform_and_dump(workspace, tmp_path, capsys):
    pair = read_pair(workspace / "data" / read_manifest(workspace / "data" / "manifest.tsv")[-1].shape)
    write_xyz(tmp_path / "s.xyz", pair.source)
    write_xyz(tmp_path / "t.xyz", pair.target)
    capsys.readouterr()
    args = ["register", str(tmp_path / "s.xyz"), str(tmp_path / "t.xyz"), "--set", f"checkpoint={workspace / 'model.bin'}",
            "--set", f"dump={tmp_path / 'dump.csv'}"]
    assert main(args) == 0
    numbers = [float(x) for x in capsys.readouterr().out.split()]
    assert len(numbers) == 12
    RigidTransform.from_row12(numbers)  # valid rotation to printed precision
    rows = read_csv(tmp_path / "dump.csv")
    assert sum(r["cloud"] == "source" for r in rows) == 25 and sum(r["cloud"] == "target" for r in rows) == 25


def test_register_missing_checkpoint(tmp_path, capsys):
    write_xyz(tmp_path / "s.xyz", np.random.default_rng(0).normal(size=(30, 3)))
    code = main(["register", str(tmp_path / "s.xyz"), str(tmp_path / "s.xyz"), "--set", f"checkpoint={tmp_path / 'none.bin'}"])
    assert code == 1 and "checkpoint not found" in capsys.readouterr().err


def test_register_extractor_mismatch(workspace, tmp_path, capsys):
    write_xyz(tmp_path / "s.xyz", np.random.default_rng(0).normal(size=(30, 3)))
    args = ["register", str(tmp_path / "s.xyz"), str(tmp_path / "s.xyz"), "--set", f"checkpoint={workspace / 'model.bin'}",
            "--set", "extractor=stub"]
    assert main(args) == 0  # stub is 33-d too
    assert main(args[:-1] + ["extractor=nope"]) == 1


def test_benchmark_rows_oracle_and_recomputation(workspace, tmp_path):
    out, dump = tmp_path / "bench.csv", tmp_path / "tf.csv"
    args = ["benchmark", "--set", f"data={workspace / 'data' / 'manifest.tsv'}", "--set", f"checkpoint={workspace / 'model.bin'}",
            "--set", "oracle=true", "--set", f"output={out}", "--set", f"transforms_out={dump}"]
    assert main(args) == 0
    rows = {r["method"]: r for r in read_csv(out)}
    assert list(next(iter(rows.values()))) == BENCH_COLUMNS
    assert set(rows) == {"idam", "icp", "oracle"}
    assert all(float(rows["oracle"][c]) == 0.0 for c in BENCH_COLUMNS[1:5])
    assert all(float(r["sec_per_frame"]) > 0 for r in rows.values())
    per_pair = read_csv(dump)
    for method in ("idam", "icp"):
        sel = [r for r in per_pair if r["method"] == method]
        preds = [RigidTransform.from_row12([float(r[f"pred_{i}"]) for i in range(12)]) for r in sel]
        gts = [RigidTransform.from_row12([float(r[f"gt_{i}"]) for i in range(12)]) for r in sel]
        m = compute_metrics(preds, gts)
        assert m.mae_rot_deg == pytest.approx(float(rows[method]["MAE_R_deg"]), rel=1e-12)
        assert m.rmse_trans == pytest.approx(float(rows[method]["RMSE_t"]), rel=1e-12)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config(TrainRunConfig, overrides=["epoch=3"])
    with pytest.raises(ConfigError):
        build_config(TrainRunConfig, overrides=["epochs=three"])
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 7, "seed": 4}))
    cfg = build_config(TrainRunConfig, str(tmp_path / "c.json"), ["seed=5"])
    assert (cfg.epochs, cfg.seed, cfg.lr) == (7, 5, 1e-4)


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "idam", "selftest"], capture_output=True, text=True)
    assert ok.returncode == 0 and "6/6 passed" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "idam", "train", "--set", "bogus=1"], capture_output=True, text=True)
    assert bad.returncode == 1 and "unknown config key" in bad.stderr
