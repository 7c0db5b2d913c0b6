"""CLI surface: exit codes, determinism, artifacts, config precedence."""

import filecmp
import os
from pathlib import Path

import pytest

from tafusion.cli import main, parse_config_file, GEN_KEYS, UsageError

GEN_FLAGS = ["--classes", "3", "--n-train", "9", "--n-test", "6",
             "--d-audio", "8", "--d-video", "7",
             "--duration-min", "0.8", "--duration-max", "1.1", "--window", "0.3"]
FAST_TRAIN = ["--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--d-emb", "8",
              "--epochs", "2", "--lr", "1e-3", "--dropout", "0.0"]


def _gen(tmp_path, name="data", seed="7"):
    out = tmp_path / name
    assert main(["gen-data", "--out", str(out), "--seed", seed] + GEN_FLAGS) == 0
    return out


def _dirs_identical(a: Path, b: Path) -> bool:
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    for sub in cmp.common_dirs:
        if not _dirs_identical(a / sub, b / sub):
            return False
    return True


def test_gen_data_deterministic(tmp_path):
    d1 = _gen(tmp_path, "d1")
    d2 = _gen(tmp_path, "d2")
    assert _dirs_identical(d1, d2)


def test_gen_data_different_seed_differs(tmp_path):
    d1 = _gen(tmp_path, "d1", seed="7")
    d2 = _gen(tmp_path, "d2", seed="8")
    assert not _dirs_identical(d1, d2)


def test_gen_data_requires_out(tmp_path, capsys):
    assert main(["gen-data", "--seed", "7"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_gen_data_invalid_spec_no_partial_writes(tmp_path):
    out = tmp_path / "bad"
    # window longer than the clip: rejected before any file is written
    code = main(["gen-data", "--out", str(out), "--window", "5.0"] + GEN_FLAGS[:-2])
    assert code == 2
    assert not out.exists()


def test_train_writes_run_dir(tmp_path, capsys):
    data = _gen(tmp_path)
    root = tmp_path / "runs"
    code = main(["train", "--data", str(data), "--run-root", str(root),
                 "--fusion", "msa", "--posenc", "tarope", "--seed", "1"] + FAST_TRAIN)
    assert code == 0
    out = capsys.readouterr().out
    assert "best accuracy" in out
    run_dirs = list(root.glob("train-*-s1"))
    assert len(run_dirs) == 1
    for artifact in ("resolved.cfg", "metrics.csv", "log.jsonl", "best.ckpt", "final.ckpt"):
        assert (run_dirs[0] / artifact).exists(), artifact


def test_train_rerun_is_idempotent(tmp_path):
    data = _gen(tmp_path)
    root = tmp_path / "runs"
    argv = ["train", "--data", str(data), "--run-root", str(root)] + FAST_TRAIN
    assert main(argv) == 0
    run_dir = next(root.glob("train-*"))
    before = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    assert main(argv) == 0
    after = {p.name: p.read_bytes() for p in run_dir.iterdir()}
    assert before == after


def test_run_root_env_override(tmp_path, monkeypatch):
    data = _gen(tmp_path)
    root = tmp_path / "env_runs"
    monkeypatch.setenv("TAFUSION_RUN_ROOT", str(root))
    assert main(["train", "--data", str(data)] + FAST_TRAIN) == 0
    assert list(root.glob("train-*"))


def test_config_file_and_flag_precedence(tmp_path):
    data = _gen(tmp_path)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs = 2\nmodel.d_model = 16   # comment\n"
                   "model.n_heads = 2\nmodel.d_ff = 32\nctm.d_emb = 8\n"
                   "model.dropout = 0.0\ntrain.lr = 1e-3\n")
    root = tmp_path / "runs"
    assert main(["train", "--data", str(data), "--run-root", str(root),
                 "--config", str(cfg), "--epochs", "1"]) == 0
    resolved = next(root.glob("train-*")) / "resolved.cfg"
    text = resolved.read_text()
    assert "train.epochs = 1" in text          # flag beats file
    assert "model.d_model = 16" in text        # file beats default


def test_unknown_config_keys_listed(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.d_model = 16\nmodel.bogus = 1\ntrain.nope = 2\n")
    with pytest.raises(UsageError, match="model.bogus, train.nope"):
        parse_config_file(cfg, {"model.d_model": ("--d-model", int, 512, "")})


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope")] + FAST_TRAIN) == 1


def test_eval_checkpoint(tmp_path, capsys):
    data = _gen(tmp_path)
    root = tmp_path / "runs"
    main(["train", "--data", str(data), "--run-root", str(root)] + FAST_TRAIN)
    ckpt = next(root.glob("train-*")) / "best.ckpt"
    capsys.readouterr()
    assert main(["eval", "--data", str(data), "--checkpoint", str(ckpt),
                 "--split", "test"]) == 0
    out = capsys.readouterr().out
    assert "accuracy:" in out and "confusion" in out


def test_ablate_matrix_and_csvs(tmp_path, capsys):
    data = _gen(tmp_path)
    out = tmp_path / "matrix"
    code = main(["ablate", "--data", str(data), "--out", str(out),
                 "--fusions", "msa,concat", "--posencs", "tarope", "--ctm", "off",
                 "--seeds", "0"] + FAST_TRAIN)
    assert code == 0
    results = (out / "results.csv").read_text().splitlines()
    assert results[0] == "fusion,posenc,ctm,seed,best_acc,final_acc,params,status"
    assert len(results) == 3
    assert (out / "summary.csv").exists()
    assert all(line.endswith("ok") for line in results[1:])


def test_ablate_empty_matrix_is_usage_error(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "matrix"
    assert main(["ablate", "--data", str(data), "--out", str(out),
                 "--fusions", ",", "--posencs", "tarope"] + FAST_TRAIN) == 1
    assert not out.exists()


def test_ablate_cell_failure_recorded_and_continues(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "matrix"
    code = main(["ablate", "--data", str(data), "--out", str(out),
                 "--fusions", "msa", "--posencs", "learnable,tarope", "--ctm", "off",
                 "--seeds", "0", "--max-len", "4"] + FAST_TRAIN)
    assert code == 0
    lines = (out / "results.csv").read_text().splitlines()[1:]
    statuses = {line.split(",")[1]: line.rsplit(",", 1)[-1] for line in lines}
    assert statuses["tarope"] == "ok"
    assert statuses["learnable"].startswith('"failed') or statuses["learnable"].startswith("failed")


def test_analyze_single_checkpoint_trajectories(tmp_path):
    data = _gen(tmp_path)
    root = tmp_path / "runs"
    main(["train", "--data", str(data), "--run-root", str(root)] + FAST_TRAIN)
    ckpt = next(root.glob("train-*")) / "best.ckpt"
    out = tmp_path / "fig"
    assert main(["analyze", "--data", str(data), "--checkpoint", str(ckpt),
                 "--out", str(out), "--limit", "3"]) == 0
    files = sorted(out.glob("traj_*.csv"))
    assert len(files) == 3
    assert files[0].read_text().splitlines()[0] == "t,audio_mag,video_mag"


def test_analyze_two_checkpoints_report(tmp_path):
    data = _gen(tmp_path)
    root = tmp_path / "runs"
    main(["train", "--data", str(data), "--run-root", str(root), "--seed", "0"] + FAST_TRAIN)
    main(["train", "--data", str(data), "--run-root", str(root), "--seed", "1"] + FAST_TRAIN)
    ckpts = sorted(root.glob("train-*/best.ckpt"))
    assert len(ckpts) == 2
    out = tmp_path / "fig2"
    assert main(["analyze", "--data", str(data), "--checkpoint", str(ckpts[0]),
                 "--checkpoint-b", str(ckpts[1]), "--out", str(out)]) == 0
    for artifact in ("hist_model_a.csv", "hist_model_b.csv", "summary.csv", "agreements.csv"):
        assert (out / artifact).exists()


def test_analyze_fails_fast_on_missing_dataset(tmp_path, capsys):
    # dataset check must precede checkpoint loading: bogus checkpoint never touched
    assert main(["analyze", "--data", str(tmp_path / "nope"),
                 "--checkpoint", str(tmp_path / "ghost.ckpt"),
                 "--out", str(tmp_path / "fig")]) == 1
    err = capsys.readouterr().err
    assert "dataset not found" in err
