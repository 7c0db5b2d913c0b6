"""Command-line front end.

Subcommands: ``gen-data``, ``train``, ``eval``, ``ablate``, ``analyze``.
Settings resolve as defaults < config file < flags; the fully resolved
configuration is echoed into the run directory.  Run directories are
addressed by a hash of the resolved configuration plus the seed, so distinct
configurations never collide.  Exit codes: 0 success, 1 usage error,
2 runtime failure.  ``TAFUSION_RUN_ROOT`` overrides the default run root.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from .analyze import dataset_agreement_report, write_trajectory_csv
from .ctm import CtmConfig
from .data import (Dataset, SyntheticSpec, generate_synthetic, load_dataset,
                   save_dataset)
from .encoder import EncoderConfig, FusionModel, count_parameters, load_checkpoint
from .training import TrainConfig, evaluate, train

RUN_ROOT_ENV = "TAFUSION_RUN_ROOT"

# config keys shared by train/ablate: key -> (flag, type, default, help)
TRAIN_KEYS = {
    "model.d_model":     ("--d-model", int, 512, "shared embedding width"),
    "model.n_heads":     ("--n-heads", int, 8, "attention heads"),
    "model.d_ff":        ("--d-ff", int, 0, "feed-forward width (0 = 4*d_model)"),
    "model.n_blocks":    ("--n-blocks", int, 2, "encoder blocks per tower"),
    "model.fusion":      ("--fusion", str, "msa", "concat|isa+isa|ica+ica|isa+ica|ica+isa|msa"),
    "model.posenc":      ("--posenc", str, "tarope", "sinusoidal|learnable|rope|tarope"),
    "model.dropout":     ("--dropout", float, 0.1, "dropout rate"),
    "model.max_len":     ("--max-len", int, 512, "additive positional table capacity"),
    "ctm.sigma":         ("--sigma", float, 0.5, "matching-loss Gaussian bandwidth (s)"),
    "ctm.tau":           ("--tau", float, 0.07, "matching-loss temperature"),
    "ctm.lambda_ctm":    ("--lambda-ctm", float, 0.5, "matching-loss weight (0 disables)"),
    "ctm.d_emb":         ("--d-emb", int, 128, "matching embedding width"),
    "train.epochs":      ("--epochs", int, 50, "training epochs"),
    "train.batch_size":  ("--batch-size", int, 4, "samples per step"),
    "train.lr":          ("--lr", float, 5e-5, "initial learning rate (linear decay to 0)"),
    "train.weight_decay": ("--weight-decay", float, 0.01, "decoupled weight decay"),
    "train.seed":        ("--seed", int, 0, "run seed"),
    "train.eval_every":  ("--eval-every", int, 1, "epochs between evaluations"),
}

GEN_KEYS = {
    "data.classes":      ("--classes", int, 6, "number of classes"),
    "data.n_train":      ("--n-train", int, 600, "training samples"),
    "data.n_test":       ("--n-test", int, 200, "test samples"),
    "data.eta_a":        ("--eta-a", float, 50.0, "audio frame rate (FPS)"),
    "data.eta_v":        ("--eta-v", float, 30.0, "video frame rate (FPS)"),
    "data.d_audio":      ("--d-audio", int, 1024, "audio feature channels"),
    "data.d_video":      ("--d-video", int, 35, "video feature channels"),
    "data.noise_std":    ("--noise-std", float, 0.05, "white-noise level"),
    "data.window":       ("--window", float, 0.35, "minimum distractor time gap (s)"),
    "data.duration_min": ("--duration-min", float, 1.2, "shortest clip (s)"),
    "data.duration_max": ("--duration-max", float, 2.0, "longest clip (s)"),
    "data.seed":         ("--seed", int, 0, "generator seed"),
}


class UsageError(Exception):
    """Bad flags, bad config keys, or missing inputs; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_config_file(path, allowed: dict) -> dict:
    """Read flat ``key = value`` lines (# comments allowed); validate keys."""
    text = Path(path).read_text()
    values = {}
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in allowed:
            unknown.append(key)
            continue
        typ = allowed[key][1]
        try:
            values[key] = typ(value.strip())
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    if unknown:
        raise UsageError(f"unknown config keys in {path}: {', '.join(sorted(unknown))}")
    return values


def _add_key_flags(parser: argparse.ArgumentParser, keys: dict) -> None:
    for key, (flag, typ, _default, help_text) in keys.items():
        parser.add_argument(flag, dest=key.replace(".", "__"), type=typ, default=None,
                            help=f"{help_text} [{key}]")


def resolve_settings(args, keys: dict) -> dict:
    """defaults <- config file <- explicit flags."""
    settings = {key: spec[2] for key, spec in keys.items()}
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config, keys))
    for key in keys:
        flag_value = getattr(args, key.replace(".", "__"), None)
        if flag_value is not None:
            settings[key] = flag_value
    return settings


def settings_hash(settings: dict, extra: dict | None = None) -> str:
    payload = dict(settings)
    if extra:
        payload.update(extra)
    payload.pop("train.seed", None)
    blob = "\n".join(f"{k} = {payload[k]}" for k in sorted(payload))
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def write_resolved(settings: dict, extra: dict, path: Path) -> None:
    payload = {**settings, **extra}
    path.write_text("".join(f"{k} = {payload[k]}\n" for k in sorted(payload)))


def run_root(args) -> Path:
    if getattr(args, "run_root", None):
        return Path(args.run_root)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


# ---------------------------------------------------------------------------
# subcommands


def _spec_from_settings(s: dict) -> SyntheticSpec:
    return SyntheticSpec(
        n_classes=s["data.classes"], n_train=s["data.n_train"], n_test=s["data.n_test"],
        duration_range=(s["data.duration_min"], s["data.duration_max"]),
        eta_a=s["data.eta_a"], eta_v=s["data.eta_v"],
        d_in_audio=s["data.d_audio"], d_in_video=s["data.d_video"],
        noise_std=s["data.noise_std"], coincidence_window=s["data.window"],
        seed=s["data.seed"])


def cmd_gen_data(args) -> int:
    settings = resolve_settings(args, GEN_KEYS)
    spec = _spec_from_settings(settings)          # validate before touching disk
    out = Path(args.out)
    dataset = generate_synthetic(spec)
    manifest = save_dataset(dataset, out)
    write_resolved(settings, {}, out / "gen.cfg")
    print(f"wrote {len(dataset)} samples to {manifest}")
    return 0


def _load_data(path, data_dir=None) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    return load_dataset(p, data_dir)


def _build_model_and_configs(settings: dict, dataset: Dataset, run_dir: str | None):
    first = dataset.samples[0]
    enc_cfg = EncoderConfig(
        d_model=settings["model.d_model"], n_heads=settings["model.n_heads"],
        d_ff=settings["model.d_ff"], n_blocks=settings["model.n_blocks"],
        fusion=settings["model.fusion"], posenc=settings["model.posenc"],
        n_classes=dataset.n_classes, d_in_audio=first.audio.dim,
        d_in_video=first.video.dim, dropout_rate=settings["model.dropout"],
        max_len=settings["model.max_len"])
    ctm_cfg = CtmConfig(sigma=settings["ctm.sigma"], tau=settings["ctm.tau"],
                        lambda_ctm=settings["ctm.lambda_ctm"], d_emb=settings["ctm.d_emb"])
    train_cfg = TrainConfig(
        epochs=settings["train.epochs"], batch_size=settings["train.batch_size"],
        lr_init=settings["train.lr"], weight_decay=settings["train.weight_decay"],
        seed=settings["train.seed"], eval_every=settings["train.eval_every"],
        run_dir=run_dir)
    model = FusionModel(enc_cfg, d_emb=ctm_cfg.d_emb, seed=train_cfg.seed)
    return model, ctm_cfg, train_cfg


def cmd_train(args) -> int:
    settings = resolve_settings(args, TRAIN_KEYS)
    dataset = _load_data(args.data, args.data_dir)
    tag = settings_hash(settings, {"data": str(args.data)})
    run_dir = run_root(args) / f"train-{tag}-s{settings['train.seed']}"
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(settings, {"data": str(args.data)}, run_dir / "resolved.cfg")
    model, ctm_cfg, train_cfg = _build_model_and_configs(settings, dataset, str(run_dir))
    run = train(model, dataset, train_cfg, ctm_cfg)
    print(f"run dir: {run_dir}")
    print(f"best accuracy {run.best_accuracy:.4f} (epoch {run.best_epoch}); "
          f"final accuracy {run.final_accuracy:.4f}")
    print(f"parameters (fusion + input projections): {count_parameters(model, 'table2'):,}")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_data(args.data, args.data_dir)
    model = load_checkpoint(args.checkpoint)
    samples = dataset.split(args.split)
    if not samples:
        raise UsageError(f"no samples in split {args.split!r}")
    accuracy, confusion = evaluate(model, samples, batch_size=args.batch_size)
    print(f"accuracy: {accuracy:.4f} over {len(samples)} samples")
    print("confusion (rows = true class):")
    for row in confusion:
        print("  " + " ".join(f"{int(x):4d}" for x in row))
    return 0


def _parse_list(raw: str, label: str) -> list[str]:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise UsageError(f"empty {label} list")
    return items


def cmd_ablate(args) -> int:
    settings = resolve_settings(args, TRAIN_KEYS)
    fusions = _parse_list(args.fusions, "fusion")
    posencs = _parse_list(args.posencs, "posenc")
    ctm_modes = _parse_list(args.ctm, "ctm")
    seeds = [int(s) for s in _parse_list(args.seeds, "seed")]
    for mode in ctm_modes:
        if mode not in ("on", "off"):
            raise UsageError(f"ctm mode must be on/off, got {mode!r}")

    dataset = _load_data(args.data, args.data_dir)
    tag = settings_hash(settings, {"data": str(args.data), "fusions": args.fusions,
                                   "posencs": args.posencs, "ctm": args.ctm,
                                   "seeds": args.seeds})
    out_dir = Path(args.out) if args.out else run_root(args) / f"ablate-{tag}"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(settings, {"data": str(args.data), "fusions": args.fusions,
                              "posencs": args.posencs, "ctm": args.ctm,
                              "seeds": args.seeds}, out_dir / "resolved.cfg")

    rows = []
    for fusion in fusions:
        for posenc in posencs:
            for mode in ctm_modes:
                for seed in seeds:
                    cell = dict(settings)
                    cell["model.fusion"] = fusion
                    cell["model.posenc"] = posenc
                    cell["train.seed"] = seed
                    if mode == "off":
                        cell["ctm.lambda_ctm"] = 0.0
                    cell_dir = out_dir / f"cell-{fusion.replace('+', '')}-{posenc}-ctm_{mode}-s{seed}"
                    try:
                        model, ctm_cfg, train_cfg = _build_model_and_configs(
                            cell, dataset, str(cell_dir))
                        run = train(model, dataset, train_cfg, ctm_cfg)
                        rows.append([fusion, posenc, mode, seed,
                                     f"{run.best_accuracy:.6f}", f"{run.final_accuracy:.6f}",
                                     count_parameters(model, "table2"), "ok"])
                    except Exception as exc:          # cell failures don't stop the matrix
                        rows.append([fusion, posenc, mode, seed, "", "", "", f"failed: {exc}"])
    with (out_dir / "results.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fusion", "posenc", "ctm", "seed", "best_acc", "final_acc",
                         "params", "status"])
        writer.writerows(rows)

    summary_rows = []
    for fusion in fusions:
        for posenc in posencs:
            for mode in ctm_modes:
                cell = [r for r in rows
                        if r[0] == fusion and r[1] == posenc and r[2] == mode and r[7] == "ok"]
                if cell:
                    mean_best = np.mean([float(r[4]) for r in cell])
                    mean_final = np.mean([float(r[5]) for r in cell])
                    summary_rows.append([fusion, posenc, mode, len(cell),
                                         f"{mean_best:.6f}", f"{mean_final:.6f}", cell[0][6]])
                else:
                    summary_rows.append([fusion, posenc, mode, 0, "", "", ""])
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fusion", "posenc", "ctm", "n_seeds", "mean_best_acc",
                         "mean_final_acc", "params"])
        writer.writerows(summary_rows)

    print(f"ablation matrix written to {out_dir}")
    for row in summary_rows:
        print("  " + " ".join(str(x) for x in row))
    return 0


def cmd_analyze(args) -> int:
    dataset = _load_data(args.data, args.data_dir)   # fail before touching checkpoints
    samples = dataset.split(args.split)
    if not samples:
        raise UsageError(f"no samples in split {args.split!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.checkpoint_b is None:
        model = load_checkpoint(args.checkpoint)
        limit = args.limit if args.limit > 0 else len(samples)
        for sample in samples[:limit]:
            write_trajectory_csv(out_dir / f"traj_{sample.sample_id}.csv", model,
                                 sample, tap=args.tap)
        print(f"wrote {min(limit, len(samples))} trajectory files to {out_dir}")
    else:
        dist_a, dist_b = dataset_agreement_report(
            args.checkpoint, args.checkpoint_b, dataset, out_dir,
            split=args.split, tap=args.tap)
        print(f"mean agreement: model_a={dist_a.mean:.4f} model_b={dist_b.mean:.4f}")
        print(f"report written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="tafusion",
                     description="Frame-rate-aligned multimodal fusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p_gen.add_argument("--out", required=True, help="output dataset directory")
    p_gen.add_argument("--config", help="key = value config file")
    _add_key_flags(p_gen, GEN_KEYS)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", required=True, help="dataset directory or manifest.tsv")
    common.add_argument("--data-dir", help="root for relative manifest paths")

    p_train = sub.add_parser("train", parents=[common], help="train one model")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument("--run-root", help=f"run directory root (or ${RUN_ROOT_ENV})")
    _add_key_flags(p_train, TRAIN_KEYS)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--batch-size", type=int, default=4)

    p_ablate = sub.add_parser("ablate", parents=[common],
                              help="run a fusion x posenc x ctm matrix")
    p_ablate.add_argument("--config", help="key = value config file")
    p_ablate.add_argument("--run-root", help=f"run directory root (or ${RUN_ROOT_ENV})")
    p_ablate.add_argument("--out", help="matrix output directory")
    p_ablate.add_argument("--fusions", default="msa", help="comma list of fusion variants")
    p_ablate.add_argument("--posencs", default="sinusoidal,learnable,rope,tarope")
    p_ablate.add_argument("--ctm", default="off,on", help="comma list from {on,off}")
    p_ablate.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    _add_key_flags(p_ablate, TRAIN_KEYS)

    p_an = sub.add_parser("analyze", parents=[common],
                          help="trajectory / agreement diagnostics")
    p_an.add_argument("--checkpoint", required=True)
    p_an.add_argument("--checkpoint-b", help="second checkpoint for paired agreement")
    p_an.add_argument("--split", default="test")
    p_an.add_argument("--tap", default="ctm", choices=("ctm", "shared"))
    p_an.add_argument("--out", required=True)
    p_an.add_argument("--limit", type=int, default=0, help="max trajectory files (0 = all)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
                   "ablate": cmd_ablate, "analyze": cmd_analyze}[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:                 # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
