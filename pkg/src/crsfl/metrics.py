"""Round metrics, overall transmission (OT) and CSV output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelSpec, logits

MIB = float(2 ** 20)

CSV_COLUMNS = (
    "round", "train_loss", "eval_accuracy", "eval_ce_loss",
    "download_bytes", "upload_bytes", "ot_cum", "acc_per_ot",
)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    eval_accuracy: float | None
    eval_ce_loss: float | None
    download_bytes_total: int
    upload_bytes_total: int
    m: int


def overall_transmission(history) -> float:
    """(total download bytes + total upload bytes) / m over the whole run."""
    if not history:
        return 0.0
    ms = {h.m for h in history}
    if len(ms) != 1:
        raise ValueError(f"inconsistent client counts {sorted(ms)}")
    total = sum(h.download_bytes_total + h.upload_bytes_total for h in history)
    return total / ms.pop()


def accuracy_per_ot(final_accuracy, ot) -> float:
    """Accuracy per MiB transmitted per client."""
    if not ot > 0:
        raise ValueError("OT must be positive")
    return final_accuracy / (ot / MIB)


def evaluate(spec: ModelSpec, w, ds):
    """Top-1 accuracy (ties to the lowest class) and mean cross-entropy."""
    z = logits(spec, w, ds.features)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(ds.n)
    acc = float(np.mean(np.argmax(z, axis=1) == ds.labels))
    return acc, float(-logp[rows, ds.labels].mean())


def final_accuracy(history):
    for h in reversed(history):
        if h.eval_accuracy is not None:
            return h.eval_accuracy
    return None


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def emit_csv(history, path):
    path = Path(path)
    rows = []
    down = up = 0
    for h in history:
        down += h.download_bytes_total
        up += h.upload_bytes_total
        ot_cum = (down + up) / h.m
        acc_ot = None
        if h.eval_accuracy is not None and ot_cum > 0:
            acc_ot = accuracy_per_ot(h.eval_accuracy, ot_cum)
        rows.append([h.round, h.train_loss, h.eval_accuracy, h.eval_ce_loss,
                     h.download_bytes_total, h.upload_bytes_total, ot_cum, acc_ot])
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_csv(path, m):
    """Parse a file written by :func:`emit_csv` back into metrics."""
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            def opt(s):
                return float(s) if s else None
            out.append(RoundMetrics(
                round=int(row[0]), train_loss=float(row[1]),
                eval_accuracy=opt(row[2]), eval_ce_loss=opt(row[3]),
                download_bytes_total=int(row[4]), upload_bytes_total=int(row[5]), m=m,
            ))
    return out


def summarize(history):
    """Final accuracy, OT and Accuracy/OT (per MiB) of a finished run."""
    acc = final_accuracy(history)
    ot = overall_transmission(history)
    acc_ot = accuracy_per_ot(acc, ot) if acc is not None and ot > 0 else math.nan
    return acc, ot, acc_ot
