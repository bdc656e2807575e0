"""Config-driven experiment runner.

A single TOML file describes one experiment: the target architecture,
which images to attack, which methods to run, and optional pre-training.
Runs are deterministic given the master seed; each (image, method) run
derives its own seed from the master seed and run index, so parallel or
reordered execution cannot change results.
"""

from __future__ import annotations

import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack, catalog, dataio, metrics, pretrain as pretrain_mod
from .errors import ConfigError
from .network import (NetworkSpec, conv_layer, fc_layer, init_weights,
                      collect_gradients, label_from_fc_gradients)

VALID_METHODS = ("rgap", "dlg", "cosinetv", "hybrid")
DATASET_ENV = "GRADLEAK_DATA"


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.001
    classes: tuple = pretrain_mod.DEFAULT_CLASSES
    max_images: int | None = None


@dataclass
class ExperimentConfig:
    architecture: str | None = None
    conv_layers: list | None = None  # inline [k, out_ch, stride, pad] rows
    dataset: str | None = None
    images: tuple = (0,)
    methods: tuple = ("rgap",)
    seed: int = 0
    report_format: str = "csv"
    hybrid: attack.HybridHyperparams = field(
        default_factory=attack.HybridHyperparams.defaults)
    dlg_iterations: int = 300
    cosinetv_iterations: int = 4800
    cosinetv_tv_weight: float = 0.01
    pretrain: PretrainConfig | None = None

    def __post_init__(self):
        bad = [m for m in self.methods if m not in VALID_METHODS]
        if bad:
            raise ConfigError(
                f"unknown methods {bad}; valid: {', '.join(VALID_METHODS)}")
        if (self.architecture is None) == (self.conv_layers is None):
            raise ConfigError("give exactly one of architecture / conv_layers")

    def build_spec(self) -> NetworkSpec:
        if self.architecture is not None:
            return catalog.get(self.architecture)
        layers = []
        shape = catalog.INPUT_SHAPE
        in_ch = shape[0]
        from .network import conv_output_shape
        for k, out_ch, s, p in self.conv_layers:
            layer = conv_layer(int(k), in_ch, int(out_ch), stride=int(s),
                               padding=int(p))
            layers.append(layer)
            shape = conv_output_shape(layer, shape)
            in_ch = out_ch
        layers.append(fc_layer(int(np.prod(shape)), catalog.NUM_CLASSES))
        return NetworkSpec(tuple(layers), catalog.INPUT_SHAPE,
                           catalog.NUM_CLASSES)

    @property
    def name(self) -> str:
        return self.architecture or "inline"


def _hybrid_from_table(table) -> attack.HybridHyperparams:
    hp = attack.HybridHyperparams.defaults()
    per = dict(hp.per_layer)
    for key, entry in table.items():
        if key == "step":
            hp.step = float(entry)
            continue
        idx = key if key == "other" else int(key.removeprefix("layer")) - 1
        per[idx] = (int(entry.get("iterations", 0)),
                    float(entry.get("mu1", 0.0)),
                    float(entry.get("mu2", 0.0)),
                    float(entry.get("mu3", 0.0)))
    hp.per_layer = per
    return hp


def load_config(path) -> ExperimentConfig:
    """Parse a TOML experiment file; see the repo README for the schema."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    exp = raw.get("experiment", {})
    kwargs = dict(
        architecture=exp.get("architecture"),
        conv_layers=exp.get("conv_layers"),
        dataset=exp.get("dataset"),
        images=tuple(exp.get("images", [0])),
        methods=tuple(exp.get("methods", ["rgap"])),
        seed=int(exp.get("seed", 0)),
        report_format=exp.get("report_format", "csv"),
        dlg_iterations=int(exp.get("dlg_iterations", 300)),
        cosinetv_iterations=int(exp.get("cosinetv_iterations", 4800)),
        cosinetv_tv_weight=float(exp.get("cosinetv_tv_weight", 0.01)),
    )
    if "hybrid" in raw:
        kwargs["hybrid"] = _hybrid_from_table(raw["hybrid"])
    if "pretrain" in raw:
        p = raw["pretrain"]
        kwargs["pretrain"] = PretrainConfig(
            epochs=int(p.get("epochs", 30)),
            batch_size=int(p.get("batch_size", 64)),
            learning_rate=float(p.get("learning_rate", 0.001)),
            classes=tuple(p.get("classes", pretrain_mod.DEFAULT_CLASSES)),
            max_images=p.get("max_images"))
    return ExperimentConfig(**kwargs)


def resolve_dataset(path_str) -> Path:
    if path_str is None:
        raise ConfigError("no dataset path configured")
    path = Path(path_str)
    if not path.is_absolute():
        root = os.environ.get(DATASET_ENV)
        if root:
            path = Path(root) / path
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    return path


def _run_seed(master: int, run_index: int) -> int:
    return int(np.random.SeedSequence([master, run_index]).generate_state(1)[0])


def _run_method(method, spec, weights, observed, label, config, run_seed):
    if method == "rgap":
        return attack.rgap_reconstruct(spec, weights, observed, label,
                                       seed=run_seed)
    if method == "hybrid":
        return attack.hybrid_reconstruct(spec, weights, observed, label,
                                         config.hybrid, seed=run_seed)
    if method == "dlg":
        return attack.dlg_reconstruct(spec, weights, observed, label,
                                      iterations=config.dlg_iterations,
                                      seed=run_seed)
    return attack.cosinetv_reconstruct(
        spec, weights, observed, label,
        iterations=config.cosinetv_iterations, seed=run_seed,
        tv_weight=config.cosinetv_tv_weight)


def run_experiment(config: ExperimentConfig, outdir, records=None):
    """Execute all (image, method) runs; returns (rows, audits, had_error).

    `records` may inject Cifar10Records directly (tests); otherwise the
    configured dataset file is loaded.  Artifacts written to `outdir`:
    the report, per-run reconstruction images (P6 + float sidecar), a
    security audit JSON, and pre-training loss curves when applicable.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = config.build_spec()
    if records is None:
        records = dataio.load_cifar10_all(resolve_dataset(config.dataset))
    targets = [(i, records[i]) for i in config.images]

    weights = init_weights(spec, seed=config.seed)
    if config.pretrain is not None:
        pool = records[:config.pretrain.max_images] \
            if config.pretrain.max_images else records
        weights, curves = pretrain_mod.pretrain(
            spec, pool, epochs=config.pretrain.epochs,
            batch_size=config.pretrain.batch_size,
            lr=config.pretrain.learning_rate,
            classes=config.pretrain.classes, seed=config.seed,
            exclude_indices=config.images, weights=weights)
        with open(outdir / "pretrain_curves.json", "w") as fh:
            json.dump({"train_loss": curves.train_loss,
                       "test_loss": curves.test_loss}, fh, indent=2)

    probe = targets[0][1].flat() if targets else np.zeros(int(np.prod(spec.input_shape)))
    audit = metrics.security_metric(spec, weights, probe,
                                    targets[0][1].label if targets else 0,
                                    seed=config.seed)
    audits = {config.name: audit}
    with open(outdir / "audit.json", "w") as fh:
        json.dump({
            "architecture": config.name,
            "c_exact": audit.c_exact,
            "c_rounded": audit.c_rounded,
            "c_truncated": audit.c_truncated,
            "rank_deficiencies": audit.deficiencies,
            "seed": config.seed,
        }, fh, indent=2)

    rows = []
    had_error = False
    run_index = 0
    for image_index, record in targets:
        truth = record.flat()
        observed = collect_gradients(spec, weights, truth, record.label)
        try:
            label = label_from_fc_gradients(observed.grad_w[-1])
        except Exception:
            label = record.label
        for method in config.methods:
            run_seed = _run_seed(config.seed, run_index)
            run_index += 1
            row = {"architecture": config.name, "method": method,
                   "image_index": image_index, "label": label,
                   "seed": run_seed}
            try:
                report = _run_method(method, spec, weights, observed, label,
                                     config, run_seed)
                m = metrics.mse(report.image, truth)
                row.update(mse=f"{m:.6e}",
                           psnr_db=f"{metrics.psnr(mse_value=m):.2f}",
                           iterations=report.iterations_used,
                           wall_time_s=f"{report.wall_time:.2f}",
                           status="ok")
                stem = f"{config.name}_{method}_img{image_index}"
                dataio.write_image(report.image, outdir / f"{stem}.ppm")
                dataio.write_image_float(report.image, outdir / f"{stem}.npy")
            except Exception as exc:  # keep the batch going
                had_error = True
                row.update(status="error", error=str(exc))
            rows.append(row)

    ext = "csv" if config.report_format == "csv" else "json"
    dataio.write_report(rows, audits, outdir / f"report.{ext}",
                        format=config.report_format)
    return rows, audits, had_error
