"""CSV/summary emission for training runs.

All files are written atomically (temp file + rename) and, timestamps in
the summary aside, identical inputs reproduce identical bytes.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

EPOCH_HEADER = "epoch,train_loss,valid_loss,accuracy,time"
TOP_LOSSES_HEADER = "actual,predicted,loss,probability,path"
LR_FINDER_HEADER = "lr,loss,smoothed_loss"


@dataclass
class ReportBundle:
    """Paths of the files a run emitted (None where not produced)."""

    epoch_csv: str = None
    confusion_csv: str = None
    top_losses_csv: str = None
    lr_finder_csv: str = None
    summary_txt: str = None


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".report-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_duration(seconds):
    """Render wall time as H:MM:SS (the classic epoch-table time column)."""
    total = int(round(seconds))
    h, rem = divmod(total, 3600)
    m, s = divmod(rem, 60)
    return f"{h}:{m:02d}:{s:02d}"


def write_epoch_csv(records, path):
    lines = [EPOCH_HEADER]
    for r in records:
        lines.append(f"{r.epoch},{r.train_loss:.6f},{r.valid_loss:.6f},"
                     f"{r.accuracy:.6f},{format_duration(r.wall_seconds)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_confusion_csv(cm, path):
    lines = ["actual\\predicted," + ",".join(cm.class_names)]
    for name, row in zip(cm.class_names, cm.counts):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_top_losses_csv(entries, path):
    lines = [TOP_LOSSES_HEADER]
    for e in entries:
        lines.append(f"{e.actual},{e.predicted},{e.loss:.6f},"
                     f"{e.probability:.6f},{e.path}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_lr_finder_csv(result, path):
    lines = [LR_FINDER_HEADER]
    for lr, loss, smoothed in result.rows():
        lines.append(f"{lr:.17g},{loss:.10g},{smoothed:.10g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_lr_finder_dat(result, path):
    """Gnuplot-friendly whitespace columns: lr, loss, smoothed."""
    lines = ["# lr loss smoothed_loss"]
    for lr, loss, smoothed in result.rows():
        lines.append(f"{lr:.17g} {loss:.10g} {smoothed:.10g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_loss_curve_dat(records, path):
    """Gnuplot-friendly loss curves: epoch, train loss, valid loss."""
    lines = ["# epoch train_loss valid_loss accuracy"]
    for i, r in enumerate(records):
        lines.append(f"{i} {r.train_loss:.10g} {r.valid_loss:.10g} {r.accuracy:.10g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_summary(path, *, records=None, cm=None, config_echo=None,
                  checkpoints=(), timestamp=True):
    lines = ["leaffine run summary"]
    if timestamp:
        lines.append("generated: " + time.strftime("%Y-%m-%d %H:%M:%S"))
    if records:
        last = records[-1]
        lines.append(f"final_accuracy: {last.accuracy:.6f}")
        lines.append(f"final_valid_loss: {last.valid_loss:.6f}")
        lines.append(f"epochs_recorded: {len(records)}")
    if cm is not None:
        lines.append(f"confusion_trace: {cm.trace}")
        lines.append(f"confusion_total: {cm.total}")
        lines.append(f"confusion_accuracy: {cm.accuracy:.6f}")
    for ck in checkpoints:
        lines.append(f"checkpoint: {ck}")
    if config_echo:
        lines.append("config:")
        for line in config_echo.splitlines():
            lines.append("  " + line)
    atomic_write_text(path, "\n".join(lines) + "\n")


def emit_report(records, cm, toplosses, lrfinder, out_dir, *,
                config_echo=None, checkpoints=(), timestamp=True, plots=False):
    """Write every available artifact into ``out_dir``.

    Pass None for pieces a run did not produce. Bytes are reproducible
    for identical inputs; the timestamp is confined to the summary.
    """
    os.makedirs(out_dir, exist_ok=True)
    bundle = ReportBundle()
    if records:
        bundle.epoch_csv = os.path.join(out_dir, "epochs.csv")
        write_epoch_csv(records, bundle.epoch_csv)
        if plots:
            write_loss_curve_dat(records, os.path.join(out_dir, "loss_curve.dat"))
    if cm is not None:
        bundle.confusion_csv = os.path.join(out_dir, "confusion_matrix.csv")
        write_confusion_csv(cm, bundle.confusion_csv)
    if toplosses:
        bundle.top_losses_csv = os.path.join(out_dir, "top_losses.csv")
        write_top_losses_csv(toplosses, bundle.top_losses_csv)
    if lrfinder is not None:
        bundle.lr_finder_csv = os.path.join(out_dir, "lr_finder.csv")
        write_lr_finder_csv(lrfinder, bundle.lr_finder_csv)
        if plots:
            write_lr_finder_dat(lrfinder, os.path.join(out_dir, "lr_finder.dat"))
    bundle.summary_txt = os.path.join(out_dir, "summary.txt")
    write_summary(bundle.summary_txt, records=records, cm=cm,
                  config_echo=config_echo, checkpoints=checkpoints,
                  timestamp=timestamp)
    return bundle
