"""Experiment runner and reporting.

`hard run <config>` executes a config-driven experiment over its seed list,
writing per-seed training logs (CSV), an aggregated summary (JSON), and
augmented-sample grids for HARD methods. `hard compare` aligns summaries
into a table; `hard render` draws augmented samples from a saved augmentor.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import augmentors as aug
from . import data as datasets
from . import distill as hd
from .diffcore import (
    Adam,
    Tensor,
    kl_divergence,
    make_rng,
    set_default_dtype,
    softmax_with_temperature,
)
from .models import Cnn, CosTeacher, FlattenStudent, Mlp, load_model, save_model

ERROR_PREFIX = "hard: error:"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONFINITE = 3

GRID_SEPARATOR = 1.0  # separator pixel value before quantization

TOY_METHODS = (
    "teacher_only", "student_only", "kd",
    "kd+static(mixup)", "kd+static(fixed-gaussian)",
    "hard(gaussian)",
)
EQUIVARIANCE_METHODS = (
    "teacher_only", "student_only", "kd",
    "kd+static(mixup)", "kd+static(fixed-gaussian)",
    "kd+static(random-affine)", "kd+static(oracle-shift)",
    "hard(affine)", "hard(mix)", "hard(affine∘mix)", "hard(affine-mix)",
)


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"field {field!r}: {message}")
        self.field = field


# ---- rendering ---------------------------------------------------------------


def render_grid(images, path):
    """Tile a batch into a ceil(sqrt(B)) square grid with 1-pixel separators.

    Values are clamped to [0, 1] and quantized with round-half-to-even, so a
    constant 0.5 image renders as pixel value 128.
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim != 4:
        raise ValueError(f"expected [B,C,H,W] images, got shape {arr.shape}")
    b, c, h, w = arr.shape
    if b < 1:
        raise ValueError("need at least one image")
    if c not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    arr = np.clip(arr, 0.0, 1.0)
    n = math.ceil(math.sqrt(b))
    canvas = np.full((n * h + n - 1, n * w + n - 1, c), GRID_SEPARATOR)
    for idx in range(n * n):
        r, col = divmod(idx, n)
        tile = arr[idx].transpose(1, 2, 0) if idx < b else np.zeros((h, w, c))
        canvas[r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = tile
    quantized = np.rint(canvas * 255.0).astype(np.uint8)
    if c == 1:
        Image.fromarray(quantized[..., 0], mode="L").save(path)
    else:
        Image.fromarray(quantized, mode="RGB").save(path)


# ---- config ------------------------------------------------------------------


def _require(mapping, field, caster, default=None, required=False):
    if field.split(".")[-1] not in mapping:
        if required:
            raise ConfigError(field, "missing required field")
        return default
    raw = mapping[field.split(".")[-1]]
    try:
        return caster(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(field, f"invalid value {raw!r} ({exc})")


def _check_known_keys(mapping, known, section):
    for key in mapping:
        if key not in known:
            where = f"{section}.{key}" if section else key
            raise ConfigError(where, "unknown field")


def load_config(path, seed_override=None, out_dir_override=None):
    """Parse and validate a YAML experiment config into a normalized dict."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"no such file: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")

    _check_known_keys(raw, {"schema_version", "experiment", "method", "seeds",
                            "out_dir", "dtype", "dataset", "distill", "teacher"}, "")
    version = _require(raw, "schema_version", int, required=True)
    if version != 1:
        raise ConfigError("schema_version", f"unsupported version {version}")
    experiment = _require(raw, "experiment", str, required=True)
    if experiment not in ("toy", "equivariance"):
        raise ConfigError("experiment", f"unknown experiment kind {experiment!r}")
    method = _require(raw, "method", str, required=True)
    allowed = TOY_METHODS if experiment == "toy" else EQUIVARIANCE_METHODS
    if method not in allowed:
        raise ConfigError("method", f"unknown method {method!r} for {experiment}")
    seeds = raw.get("seeds")
    if seed_override is not None:
        seeds = [seed_override]
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    out_dir = out_dir_override or _require(raw, "out_dir", str, required=True)
    dtype = _require(raw, "dtype", str, default="float64")
    if dtype not in ("float32", "float64"):
        raise ConfigError("dtype", f"must be float32 or float64, got {dtype!r}")

    dataset = dict(raw.get("dataset") or {})
    distill_over = dict(raw.get("distill") or {})
    teacher_over = dict(raw.get("teacher") or {})

    if experiment == "toy":
        _check_known_keys(dataset, {"n_train"}, "dataset")
        ds = {"n_train": _require(dataset, "dataset.n_train", int, default=256)}
        base_distill = {
            "iterations": 10_000, "batch_size": 64,
            "lambda_s": 1.0, "lambda_t": 0.5,
            "ell_min": 0.05, "ell_max": 0.3, "patience": 20,
            "temperature": 1.0, "distance": "mse",
            "student_lr": 3e-4, "augmentor_lr": 0.3,
            "weight_decay": 2e-9, "clean_data_fraction": 0.0,
            "grid_every": 1000,
        }
        teacher_cfg = {}
        if teacher_over:
            raise ConfigError("teacher", "the toy experiment has no teacher section")
    else:
        _check_known_keys(dataset, {"kind", "n_train", "n_test", "max_shift",
                                    "data_seed", "train_images", "train_labels",
                                    "test_images", "test_labels"}, "dataset")
        kind = _require(dataset, "dataset.kind", str, default="synth")
        if kind not in ("synth", "idx"):
            raise ConfigError("dataset.kind", f"must be synth or idx, got {kind!r}")
        ds = {
            "kind": kind,
            "n_train": _require(dataset, "dataset.n_train", int, default=10_000),
            "n_test": _require(dataset, "dataset.n_test", int, default=1000),
            "max_shift": _require(dataset, "dataset.max_shift", int, default=6),
            "data_seed": _require(dataset, "dataset.data_seed", int, default=1234),
        }
        if kind == "idx":
            root = Path(os.environ.get("HARD_DATA_DIR", "."))
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                rel = _require(dataset, f"dataset.{key}", str, required=True)
                full = root / rel
                if not full.exists():
                    raise ConfigError(f"dataset.{key}", f"no such file: {full}")
                ds[key] = str(full)
        base_distill = {
            "iterations": 4000, "batch_size": 64,
            "lambda_s": 1.0, "lambda_t": 1.0,
            "ell_min": 0.10, "ell_max": 0.60, "patience": 5,
            "temperature": 5.0, "distance": "kl",
            "student_lr": 3e-4, "augmentor_lr": 5e-2,
            "weight_decay": 2e-9, "clean_data_fraction": 0.5,
            "grid_every": 1000,
        }
        _check_known_keys(teacher_over, {"iterations", "lr", "batch_size",
                                         "checkpoint"}, "teacher")
        teacher_cfg = {
            "iterations": _require(teacher_over, "teacher.iterations", int, default=1500),
            "lr": _require(teacher_over, "teacher.lr", float, default=2e-3),
            "batch_size": _require(teacher_over, "teacher.batch_size", int, default=64),
            "checkpoint": teacher_over.get("checkpoint"),
        }

    _check_known_keys(distill_over, set(base_distill), "distill")
    for key, value in distill_over.items():
        caster = type(base_distill[key])
        base_distill[key] = _require(distill_over, f"distill.{key}", caster)

    return {
        "schema_version": 1,
        "experiment": experiment,
        "method": method,
        "seeds": list(seeds),
        "out_dir": out_dir,
        "dtype": dtype,
        "dataset": ds,
        "distill": base_distill,
        "teacher": teacher_cfg,
    }


def _distill_config(norm, seed, joint=False):
    d = norm["distill"]
    return hd.DistillConfig(
        iterations=d["iterations"], batch_size=d["batch_size"],
        lambda_s=d["lambda_s"], lambda_t=d["lambda_t"],
        ell_min=d["ell_min"], ell_max=d["ell_max"], patience=d["patience"],
        temperature=d["temperature"], distance=d["distance"],
        student_lr=d["student_lr"], augmentor_lr=d["augmentor_lr"],
        weight_decay=d["weight_decay"],
        clean_data_fraction=d["clean_data_fraction"],
        joint=joint, seed=seed,
    )


# ---- shared training helpers -------------------------------------------------


def one_hot(labels, classes=10):
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    return kl_divergence(Tensor(one_hot(labels)), softmax_with_temperature(logits, 1.0))


def train_classifier(model, images, labels, iterations, lr, batch_size, seed,
                     augment_fn=None):
    """Cross-entropy training used for the CNN teacher and student-only runs."""
    rng = make_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    stream = datasets.batch_stream(images, batch_size, make_rng(seed + 1), labels=labels)
    for _ in range(iterations):
        x, y = next(stream)
        xt = Tensor(x)
        if augment_fn is not None:
            xt = augment_fn(xt, rng)
        loss = cross_entropy(model(xt), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def accuracy(model, images, labels, batch=512):
    hits = 0
    for start in range(0, len(images), batch):
        logits = model(Tensor(images[start:start + batch]))
        hits += int((logits.data.argmax(axis=-1) == labels[start:start + batch]).sum())
    return hits / len(images)


# ---- toy experiment ----------------------------------------------------------


def _toy_mse(student, dataset):
    pred = student(Tensor(dataset.test_x)).data
    truth = np.cos(dataset.test_x)
    return float(((pred - truth) ** 2).mean())


def run_toy_seed(norm, seed):
    dataset = datasets.make_toy_dataset(seed=norm["dataset"].get("seed_base", 0) + seed,
                                        n_train=norm["dataset"]["n_train"])
    teacher = CosTeacher()
    if norm["method"] == "teacher_only":
        return {"mse": 0.0}, {"switches": 0, "log": hd.TrainLog()}
    student = Mlp((1, 64, 64, 1), rng=make_rng(7919 * seed + 1))
    cfg = _distill_config(norm, seed)
    stream = datasets.batch_stream(dataset.train_x, cfg.batch_size,
                                   make_rng(7919 * seed + 2))
    method = norm["method"]
    switches = 0
    if method == "hard(gaussian)":
        augmentor = aug.GaussianAugmentor(dim=1)
        student, pool, log = hd.train_hard(cfg, teacher, student, augmentor, stream)
        switches = len(pool)
    else:
        augment_fn = None
        if method == "kd+static(mixup)":
            augment_fn = hd.static_augmentation("mixup")
        elif method == "kd+static(fixed-gaussian)":
            augment_fn = hd.static_augmentation("fixed-gaussian", sigma=1.0)
        student, log = hd.distill_plain(cfg, teacher, student, stream,
                                        augment_fn=augment_fn)
    return {"mse": _toy_mse(student, dataset)}, {"switches": switches, "log": log}


# ---- equivariance experiment -------------------------------------------------


def _equivariance_data(norm, seed):
    ds = norm["dataset"]
    if ds["kind"] == "synth":
        train = datasets.synth_shapes(ds["n_train"], seed=ds["data_seed"] + 17 * seed)
        test = datasets.synth_shapes(ds["n_test"], seed=ds["data_seed"] + 17 * seed + 7)
    else:
        train = datasets.load_idx_dataset(ds["train_images"], ds["train_labels"])
        test = datasets.load_idx_dataset(ds["test_images"], ds["test_labels"], split="test")
        rng = np.random.default_rng(ds["data_seed"] + 17 * seed)
        sel = rng.permutation(len(train.images))[:ds["n_train"]]
        train = datasets.DigitDataset(train.images[sel], train.labels[sel])
        test = datasets.DigitDataset(test.images[:ds["n_test"]],
                                     test.labels[:ds["n_test"]], split="test")
    shifted = datasets.shift_dataset(
        test.images,
        datasets.ShiftSpec(max_shift=ds["max_shift"], seed=ds["data_seed"] + 17 * seed + 13),
    )
    return train, test, shifted


def _get_teacher(norm, seed, train):
    teacher_cfg = norm["teacher"]
    ckpt = teacher_cfg.get("checkpoint")
    path = Path(ckpt.format(seed=seed)) if ckpt else None
    teacher = Cnn(rng=make_rng(104729 * seed + 3))
    if path is not None and path.exists():
        load_model(teacher, path)
    else:
        train_classifier(teacher, train.images, train.labels,
                         teacher_cfg["iterations"], teacher_cfg["lr"],
                         teacher_cfg["batch_size"], seed=104729 * seed + 4)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_model(teacher, path)
    teacher.freeze()
    return teacher


def _build_augmentor(method, train, seed):
    _, _, h, w = train.images.shape
    if method == "hard(affine)":
        return aug.AffineAugmentor(), False
    if method == "hard(mix)":
        return aug.MixAugmentor(channels=1, height=h, width=w, patch=4,
                                embed=32, group=2, rng=make_rng(104729 * seed + 5)), True
    if method in ("hard(affine∘mix)", "hard(affine-mix)"):
        inner = aug.MixAugmentor(channels=1, height=h, width=w, patch=4,
                                 embed=32, group=2, rng=make_rng(104729 * seed + 5))
        return aug.ComposedAugmentor(inner, aug.AffineAugmentor()), True
    raise ValueError(f"unknown hard method {method!r}")


def run_equivariance_seed(norm, seed, out_dir):
    train, test, shifted = _equivariance_data(norm, seed)
    method = norm["method"]
    teacher = _get_teacher(norm, seed, train)
    if method == "teacher_only":
        return {
            "centered_accuracy": accuracy(teacher, test.images, test.labels),
            "shifted_accuracy": accuracy(teacher, shifted, test.labels),
        }, {"switches": 0, "log": hd.TrainLog()}

    student = FlattenStudent(Mlp((train.images.shape[2] * train.images.shape[3],
                                  256, 256, 10), rng=make_rng(7919 * seed + 1)))
    cfg = _distill_config(norm, seed, joint=method in (
        "hard(mix)", "hard(affine∘mix)", "hard(affine-mix)"))
    switches = 0
    if method == "student_only":
        train_classifier(student, train.images, train.labels, cfg.iterations,
                         cfg.student_lr, cfg.batch_size, seed=7919 * seed + 2)
        log = hd.TrainLog()
    elif method.startswith("hard("):
        augmentor, joint = _build_augmentor(method, train, seed)
        if joint:
            cfg = cfg.with_(lambda_t=0.0)
        stream = datasets.batch_stream(train.images, cfg.batch_size,
                                       make_rng(7919 * seed + 2))
        hook = _grid_hook(out_dir, seed, norm["distill"]["grid_every"])
        student, pool, log = hd.train_hard(cfg, teacher, student, augmentor,
                                           stream, sample_hook=hook)
        switches = len(pool)
        augmentor.save(Path(out_dir) / f"seed{seed}_augmentor.ckpt")
    else:
        augment_fn = None
        if method == "kd+static(mixup)":
            augment_fn = hd.static_augmentation("mixup")
        elif method == "kd+static(fixed-gaussian)":
            augment_fn = hd.static_augmentation("fixed-gaussian", sigma=0.3)
        elif method == "kd+static(random-affine)":
            augment_fn = hd.static_augmentation("random-affine")
        elif method == "kd+static(oracle-shift)":
            augment_fn = hd.static_augmentation(
                "oracle-shift", max_shift=norm["dataset"]["max_shift"])
        stream = datasets.batch_stream(train.images, cfg.batch_size,
                                       make_rng(7919 * seed + 2))
        student, log = hd.distill_plain(cfg, teacher, student, stream,
                                        augment_fn=augment_fn)
    return {
        "centered_accuracy": accuracy(student, test.images, test.labels),
        "shifted_accuracy": accuracy(student, shifted, test.labels),
    }, {"switches": switches, "log": log}


def _grid_hook(out_dir, seed, every):
    if every <= 0:
        return None

    def hook(iteration, batch):
        if iteration % every == 0:
            render_grid(batch[:16], Path(out_dir) / f"seed{seed}_iter{iteration:06d}_grid.png")

    return hook


# ---- run / summarize ---------------------------------------------------------


def _aggregate(per_seed):
    names = sorted(per_seed[0])
    out = {}
    for name in names:
        values = [m[name] for m in per_seed]
        mean = float(np.mean(values))
        sem = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
        out[name] = {"per_seed": values, "mean": mean, "sem": sem}
    return out


def run_experiment(config_path, seed_override=None, out_dir_override=None):
    """Execute every seed of a configured experiment; returns an exit code."""
    started = time.time()
    try:
        norm = load_config(config_path, seed_override, out_dir_override)
    except ConfigError as exc:
        print(f"{ERROR_PREFIX} config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    set_default_dtype(norm["dtype"])
    out_dir = Path(norm["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed = []
    switch_counts = []
    try:
        for seed in norm["seeds"]:
            if norm["experiment"] == "toy":
                metrics, extras = run_toy_seed(norm, seed)
            else:
                metrics, extras = run_equivariance_seed(norm, seed, out_dir)
            extras["log"].write_csv(out_dir / f"seed{seed}_trainlog.csv")
            per_seed.append(metrics)
            switch_counts.append(extras["switches"])
    except hd.NonFiniteLossError as exc:
        log_path = out_dir / "failure.txt"
        log_path.write_text(str(exc) + "\n")
        print(f"{ERROR_PREFIX} non-finite training: {exc} (log: {log_path})",
              file=sys.stderr)
        return EXIT_NONFINITE
    finally:
        set_default_dtype("float64")
    summary = {
        "schema_version": 1,
        "experiment": norm["experiment"],
        "method": norm["method"],
        "seeds": norm["seeds"],
        "metrics": _aggregate(per_seed),
        "switch_counts": switch_counts,
        "config": {k: norm[k] for k in ("dataset", "distill", "teacher", "dtype")},
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / "run_meta.json", "w") as f:
        json.dump({"wall_time_sec": time.time() - started}, f)
        f.write("\n")
    return EXIT_OK


# ---- compare -----------------------------------------------------------------


def _lower_is_better(metric):
    return any(tag in metric for tag in ("mse", "loss", "error"))


def compare_runs(summary_paths, csv_path="compare.csv"):
    """Align >= 2 result summaries into a mean +/- SEM table; best flagged '*'."""
    if len(summary_paths) < 2:
        raise ValueError("comparison needs at least 2 summaries")
    rows = []
    for path in summary_paths:
        with open(path) as f:
            summary = json.load(f)
        rows.append((summary["method"], summary["metrics"]))
    shared = set(rows[0][1])
    for _, metrics in rows[1:]:
        shared &= set(metrics)
    if not shared:
        raise ValueError("summaries have no metric names in common")
    shared = sorted(shared)
    best = {}
    for name in shared:
        values = [metrics[name]["mean"] for _, metrics in rows]
        best[name] = min(values) if _lower_is_better(name) else max(values)
    header = ["method"] + shared
    table_rows = []
    csv_lines = [",".join(header)]
    for method, metrics in rows:
        cells = [method]
        csv_cells = [method]
        for name in shared:
            m = metrics[name]
            flag = "*" if m["mean"] == best[name] else " "
            cells.append(f"{m['mean']:.4f} ± {m['sem']:.4f}{flag}")
            csv_cells.append(f"{m['mean']!r}±{m['sem']!r}{flag.strip()}")
        table_rows.append(cells)
        csv_lines.append(",".join(csv_cells))
    widths = [max(len(r[i]) for r in [header] + table_rows) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for cells in table_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    table = "\n".join(lines)
    if csv_path:
        with open(csv_path, "w") as f:
            f.write("\n".join(csv_lines) + "\n")
    return table


# ---- render command ----------------------------------------------------------


def render_from_checkpoint(checkpoint_path, dataset_spec, out_path, seed=0, count=16):
    augmentor = aug.load_augmentor(checkpoint_path)
    if dataset_spec == "synth":
        ds = datasets.synth_shapes(max(count, 10), seed=seed)
        images = ds.images[:count]
    else:
        images = datasets.load_idx_images(dataset_spec)[:count]
    rng = make_rng(seed)
    augmented = augmentor.augment(Tensor(images), rng)
    render_grid(augmented, out_path)


# ---- entry point -------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hard",
        description="Adversarially learned augmentations for knowledge distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a config-driven experiment")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int, default=None,
                       help="run a single seed instead of the config's list")
    run_p.add_argument("--out-dir", default=None)
    run_p.add_argument("--threads", type=int, default=1,
                       help="max seed workers (runs are independent; 1 = sequential)")

    cmp_p = sub.add_parser("compare", help="tabulate >= 2 result summaries")
    cmp_p.add_argument("summaries", nargs="+")
    cmp_p.add_argument("-o", "--csv", default="compare.csv")

    ren_p = sub.add_parser("render", help="render augmented samples from a checkpoint")
    ren_p.add_argument("checkpoint")
    ren_p.add_argument("dataset", help="'synth' or a path to an IDX image file")
    ren_p.add_argument("out")
    ren_p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, seed_override=args.seed,
                              out_dir_override=args.out_dir)
    if args.command == "compare":
        try:
            print(compare_runs(args.summaries, csv_path=args.csv))
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            print(f"{ERROR_PREFIX} compare: {exc}", file=sys.stderr)
            return 1
        return EXIT_OK
    if args.command == "render":
        try:
            render_from_checkpoint(args.checkpoint, args.dataset, args.out,
                                   seed=args.seed)
        except (OSError, ValueError) as exc:
            print(f"{ERROR_PREFIX} render: {exc}", file=sys.stderr)
            return 1
        return EXIT_OK
    return 1


if __name__ == "__main__":
    sys.exit(main())
