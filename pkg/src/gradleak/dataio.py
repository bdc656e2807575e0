"""CIFAR-10 binary ingestion, image output, and report persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels
IMAGE_SHAPE = (3, 32, 32)
REPORT_SCHEMA_VERSION = 1


@dataclass
class Cifar10Record:
    label: int
    pixels: np.ndarray  # (3, 32, 32) floats in [0, 1]

    def flat(self) -> np.ndarray:
        return self.pixels.ravel()

    def to_bytes(self) -> bytes:
        quantized = np.round(self.pixels * 255.0).astype(np.uint8)
        return bytes([self.label]) + quantized.tobytes()


def cifar10_record_count(path) -> int:
    size = Path(path).stat().st_size
    if size % RECORD_BYTES != 0:
        raise ShapeError(f"{path}: length {size} is not a multiple of {RECORD_BYTES}")
    return size // RECORD_BYTES


def load_cifar10_batch(path, index: int) -> Cifar10Record:
    """One record from a CIFAR-10 binary batch file, pixels scaled to [0,1]."""
    count = cifar10_record_count(path)
    if not 0 <= index < count:
        raise IndexError(f"record {index} out of range (file has {count})")
    with open(path, "rb") as fh:
        fh.seek(index * RECORD_BYTES)
        raw = fh.read(RECORD_BYTES)
    label = raw[0]
    pixels = np.frombuffer(raw[1:], dtype=np.uint8).astype(float) / 255.0
    return Cifar10Record(label=int(label), pixels=pixels.reshape(IMAGE_SHAPE))


def load_cifar10_all(path):
    return [load_cifar10_batch(path, i) for i in range(cifar10_record_count(path))]


def write_image(image: np.ndarray, path) -> None:
    """8-bit binary PPM (P6); pixels are clamped to [0,1] before quantizing."""
    img = np.asarray(image, float)
    if img.ndim == 1:
        img = img.reshape(IMAGE_SHAPE)
    if img.ndim != 3:
        raise ShapeError("write_image expects a (C, H, W) image")
    c, h, w = img.shape
    if c not in (1, 3):
        raise ShapeError(f"unsupported channel count {c}")
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if c == 1:
        quantized = np.repeat(quantized, 3, axis=0)
    payload = quantized.transpose(1, 2, 0).tobytes()  # interleave RGB
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload)


def write_image_float(image: np.ndarray, path) -> None:
    """Lossless float sidecar for exact round-trips."""
    np.save(path, np.asarray(image, float))


def read_image_float(path) -> np.ndarray:
    return np.load(path)


def report_rows(reports, audits):
    """One flat row per (architecture, method, image) run."""
    rows = []
    for entry in reports:
        audit = audits.get(entry.get("architecture")) if isinstance(audits, dict) else None
        row = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "architecture": entry.get("architecture", ""),
            "method": entry.get("method", ""),
            "image_index": entry.get("image_index", ""),
            "label": entry.get("label", ""),
            "mse": entry.get("mse", ""),
            "psnr_db": entry.get("psnr_db", ""),
            "seed": entry.get("seed", ""),
            "iterations": entry.get("iterations", ""),
            "wall_time_s": entry.get("wall_time_s", ""),
            "status": entry.get("status", "ok"),
            "error": entry.get("error", ""),
        }
        if audit is not None:
            row["c_metric"] = audit.c_exact
            row["rank_deficiencies"] = " ".join(str(v) for v in audit.deficiencies)
        else:
            row["c_metric"] = entry.get("c_metric", "")
            row["rank_deficiencies"] = entry.get("rank_deficiencies", "")
        rows.append(row)
    return rows


_CSV_FIELDS = ["schema_version", "architecture", "method", "image_index",
               "label", "mse", "psnr_db", "c_metric", "rank_deficiencies",
               "seed", "iterations", "wall_time_s", "status", "error"]


def write_report(reports, audits, path, format: str = "csv") -> None:
    """Persist run rows; `reports` is a list of flat dicts, `audits` maps
    architecture name to SecurityAudit."""
    rows = report_rows(reports, audits)
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    elif format == "json":
        with open(path, "w") as fh:
            json.dump({"schema_version": REPORT_SCHEMA_VERSION, "runs": rows},
                      fh, indent=2)
    else:
        raise ConfigError(f"unknown report format {format!r}")
