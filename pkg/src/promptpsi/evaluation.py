"""NMSE grids for the prompted model against the fixed baseline, plus matching accuracy.

Each cell averages ``draws`` independent channel-noise draws per test sample so
the reported NMSE carries little Monte-Carlo noise. Cells are evaluated in grid
order with per-cell RNG substreams, so a report is a pure function of the
models, data and seed.
"""
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .codec import NMSE_FLOOR_DB, baseline_latent_for_cr, nmse_ratios, noise_sigma
from .irs import CHANNEL_TYPES
from .prompts import Prompt, TaskDescriptor, binomial_ci, match_indices
from .seeding import rng as seeded

REPORT_SCHEMA = "promptpsi-eval-report"
REPORT_VERSION = 1
CSV_COLUMNS = ["task_cr", "task_snr_db", "task_channel", "model", "nmse_db", "n", "excluded"]
FORMATS = ("csv", "json")

FIG4A = [TaskDescriptor(c, 15.0, "NLoS") for c in (0.125, 0.25, 0.5)]
FIG4B = [TaskDescriptor(0.25, s, ch) for s in (10.0, 15.0) for ch in ("LoS", "NLoS")]


class MissingData(LookupError):
    """A grid cell has no test data."""

    def __init__(self, tasks):
        self.tasks = list(tasks)
        super().__init__("no test data for: " + ", ".join(t.label() for t in self.tasks))


class SplitOverlap(ValueError):
    """Evaluation indices intersect the indices a model was trained on."""


@dataclass
class TestSet:
    psi: np.ndarray
    indices: np.ndarray  # positions in the source dataset file


@dataclass
class CellResult:
    task: TaskDescriptor
    model: str
    nmse_db: float
    n: int
    excluded: int


@dataclass
class EvalReport:
    cells: list
    config_digest: str
    seed: int
    matching: dict = field(default_factory=dict)
    absent: list = field(default_factory=list)

    def cell(self, task, model):
        for c in self.cells:
            if c.task == task and c.model == model:
                return c
        raise KeyError((task, model))

    def nmse(self, task, model):
        return self.cell(task, model).nmse_db


def grid_by_name(name, full_grid):
    if name == "full":
        return list(full_grid)
    if name == "fig4a":
        return list(FIG4A)
    if name == "fig4b":
        return list(FIG4B)
    raise ValueError(f"unknown grid {name!r}; expected full, fig4a or fig4b")


def check_split_hygiene(train_indices, test_sets):
    """Refuse evaluation on any index a model saw during training.

    ``train_indices`` maps task label -> array of training indices for that
    task's dataset; ``test_sets`` maps task -> :class:`TestSet`.
    """
    for task, ts in test_sets.items():
        seen = train_indices.get(task.label())
        if seen is None:
            continue
        overlap = np.intersect1d(np.asarray(seen, dtype=np.int64), ts.indices)
        if overlap.size:
            raise SplitOverlap(f"{task.label()}: {overlap.size} evaluation samples were used for training")


def finite_db(ratios, where):
    valid = ratios[~np.isnan(ratios)]
    if valid.size == 0:
        raise ValueError(f"{where}: every sample has zero energy")
    mean = float(valid.mean())
    if mean <= 10 ** (NMSE_FLOOR_DB / 10):
        return NMSE_FLOOR_DB
    return 10.0 * math.log10(mean)


def _cell_ratios(latent, decode, psi, snr_db, rng, draws, chunk):
    """Per-sample NMSE ratios averaged over ``draws`` noise realizations."""
    sigma = noise_sigma(snr_db)
    draws = draws if sigma > 0 else 1
    total = np.zeros(len(psi))
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        rep = np.repeat(latent, k, axis=0)
        if sigma > 0:
            rep = rep + sigma * rng.standard_normal(rep.shape)
        rec = decode(rep).reshape(len(psi), k, *psi.shape[1:])
        for j in range(k):
            total += nmse_ratios(psi, rec[:, j])
        done += k
    return total / draws


def evaluate_model_cell(model, prompt, task, psi, rng, draws=200, chunk=20):
    value = prompt.value if isinstance(prompt, Prompt) else prompt
    with T.no_grad():
        latent = model.encode_t(psi, value, task.cr).latent.data
        cr_idx = model.cr_index(task.cr)
        ratios = _cell_ratios(latent, lambda z: model.decode_t(z, cr_idx).data,
                              psi, task.snr_db, rng, draws, chunk)
    return ratios


def evaluate_baseline_cell(model_b, task, psi, rng, draws=200, chunk=20):
    cfg = model_b.cfg
    with T.no_grad():
        latent = model_b.encode_t(psi, None, cfg.fixed_cr).latent.data
        framed = baseline_latent_for_cr(latent, task.cr, cfg.n_elements)
        ratios = _cell_ratios(framed, lambda z: model_b.decode_t(z, 0).data,
                              psi, task.snr_db, rng, draws, chunk)
    return ratios


def evaluate_grid(models, test_sets, grid, seed, config_digest, draws=200, allow_partial=False,
                  train_indices=None):
    """Evaluate every model on every grid cell.

    ``models`` maps a model id to ``(model, bank_or_None)``; a model without a
    bank is treated as a baseline and probed with the truncate/zero-pad
    convention. ``train_indices`` maps model id to the per-task training index
    record stored in its file; any overlap with the test indices is refused.
    """
    absent = [t for t in grid if t not in test_sets]
    if absent and not allow_partial:
        raise MissingData(absent)
    for mid, record in (train_indices or {}).items():
        check_split_hygiene(record, test_sets)
    cells = []
    for gi, task in enumerate(grid):
        if task in absent:
            continue
        ts = test_sets[task]
        for mid, (model, bank) in models.items():
            r = seeded(seed, "eval", mid, task.label())
            if bank is not None:
                ratios = evaluate_model_cell(model, bank.lookup(task), task, ts.psi, r, draws)
            else:
                ratios = evaluate_baseline_cell(model, task, ts.psi, r, draws)
            excluded = int(np.isnan(ratios).sum())
            db = finite_db(ratios, f"{mid} at {task.label()}")
            cells.append(CellResult(task, mid, db, len(ts.psi) - excluded, excluded))
    return EvalReport(cells, config_digest, int(seed), absent=[t.label() for t in absent])


# ---------------------------------------------------------------------------
# prompt matching


def matching_accuracy(model, bank, samples):
    """Accuracy of signal-only prompt selection.

    ``samples`` is a list of ``(psi_batch, true_task)``. Returns accuracy on
    channel type (the attribute observable in the PSI) and on the full
    descriptor (diagnostic), with Wilson 99% intervals.
    """
    hits_ch = hits_full = n = 0
    per_type = {c: [0, 0] for c in CHANNEL_TYPES}
    for psi, task in samples:
        idx = match_indices(bank, model.embed(psi))
        chosen = [bank.prompts[i].key_meta for i in idx]
        ok_ch = sum(c.channel_type == task.channel_type for c in chosen)
        hits_ch += ok_ch
        hits_full += sum(c == task for c in chosen)
        per_type[task.channel_type][0] += ok_ch
        per_type[task.channel_type][1] += len(chosen)
        n += len(chosen)
    if n == 0:
        raise ValueError("matching accuracy needs at least one sample")
    return {
        "channel_type": hits_ch / n,
        "channel_type_ci": list(binomial_ci(hits_ch, n)),
        "full": hits_full / n,
        "per_channel": {c: (k / m if m else None) for c, (k, m) in per_type.items()},
        "n": n,
    }


def class_mean_bank(model, bank, samples):
    """Copy of ``bank`` whose keys are the mean embedding of each key's channel type."""
    sums = {}
    for psi, task in samples:
        e = model.embed(psi)
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        s, k = sums.get(task.channel_type, (0.0, 0))
        sums[task.channel_type] = (s + e.sum(axis=0), k + len(e))
    out = bank.copy()
    for p in out:
        if p.key_meta.channel_type in sums:
            s, k = sums[p.key_meta.channel_type]
            p.key_vec.data = s / k
    return out


# ---------------------------------------------------------------------------
# export


def _fmt(x):
    return repr(float(x))


def report_to_json(report):
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "config_digest": report.config_digest,
        "seed": report.seed,
        "columns": CSV_COLUMNS,
        "cells": [{"task_cr": c.task.cr, "task_snr_db": c.task.snr_db,
                   "task_channel": c.task.channel_type, "model": c.model,
                   "nmse_db": c.nmse_db, "n": c.n, "excluded": c.excluded} for c in report.cells],
        "matching": report.matching,
        "absent": report.absent,
    }


def report_from_json(obj):
    if obj.get("schema") != REPORT_SCHEMA or obj.get("version") != REPORT_VERSION:
        raise ValueError("not a version-1 evaluation report")
    cells = [CellResult(TaskDescriptor(c["task_cr"], c["task_snr_db"], c["task_channel"]),
                        c["model"], float(c["nmse_db"]), int(c["n"]), int(c["excluded"]))
             for c in obj["cells"]]
    return EvalReport(cells, obj["config_digest"], int(obj["seed"]), obj.get("matching", {}),
                      obj.get("absent", []))


def export_report(report, path, fmt):
    """Write ``report`` as CSV or JSON.

    A CSV holds one row per (cell, model) under :data:`CSV_COLUMNS`; the run
    metadata (config digest, seed, matching accuracy) goes to a
    ``<path>.meta.json`` sidecar so the table stays a plain grid.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    for c in report.cells:
        if not math.isfinite(c.nmse_db):
            raise ValueError(f"non-finite NMSE for {c.model} at {c.task.label()}")
    try:
        if fmt == "json":
            with open(path, "w") as fh:
                json.dump(report_to_json(report), fh, indent=1, sort_keys=True)
                fh.write("\n")
            return
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for c in report.cells:
                w.writerow([_fmt(c.task.cr), _fmt(c.task.snr_db), c.task.channel_type, c.model,
                            _fmt(c.nmse_db), c.n, c.excluded])
        meta = report_to_json(report)
        del meta["cells"]
        with open(f"{path}.meta.json", "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"failed to write report {path}: {exc}") from exc


def read_report(path, fmt=None):
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        if fmt == "json":
            with open(path) as fh:
                return report_from_json(json.load(fh))
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            with open(f"{path}.meta.json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            meta = {"config_digest": "", "seed": 0}
    except OSError as exc:
        raise OSError(f"failed to read report {path}: {exc}") from exc
    cells = [CellResult(TaskDescriptor(float(r["task_cr"]), float(r["task_snr_db"]), r["task_channel"]),
                        r["model"], float(r["nmse_db"]), int(r["n"]), int(r["excluded"])) for r in rows]
    return EvalReport(cells, meta["config_digest"], int(meta["seed"]), meta.get("matching", {}),
                      meta.get("absent", []))


def index_digest(indices):
    return hashlib.sha256(np.ascontiguousarray(indices, dtype="<i8").tobytes()).hexdigest()


__all__ = ["CSV_COLUMNS", "CellResult", "EvalReport", "FIG4A", "FIG4B", "MissingData",
           "SplitOverlap", "TestSet", "check_split_hygiene", "class_mean_bank", "evaluate_grid",
           "export_report", "finite_db", "grid_by_name", "index_digest", "matching_accuracy",
           "read_report", "report_from_json", "report_to_json"]
