"""End-to-end pipeline steps behind the command line.

Artifact layout under the run home::

    data/manifest.json          dataset digests plus the effective config
    data/<task>.psid            one PSID1 dataset per grid task
    data/adapt_<task>.psid      support/query pool for the off-grid task
    models/prompt.psic          prompted codec + bank (after episodic refinement)
    models/baseline.psic        single-configuration reference codec
    models/adapted.psic         prompted codec + bank extended by adaptation
    checkpoints/*.psic          epoch-boundary training state
    logs/train.csv              per-epoch / per-evaluation training log
    logs/timing.json            wall-clock times (kept out of the other files)
    reports/                    evaluation and adaptation reports

Everything except ``logs/timing.json`` and checkpoints is a deterministic
function of the config and seed.
"""
import csv
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .codec import CodecModel, baseline_config
from .evaluation import (EvalReport, MissingData, TestSet, class_mean_bank, evaluate_grid,
                         evaluate_model_cell, export_report, finite_db, grid_by_name,
                         index_digest, matching_accuracy)
from .irs import Dataset, generate_dataset, read_dataset, split_indices, write_dataset
from .modelio import file_sha256, load_model, save_model
from .prompts import TaskDescriptor, init_bank
from .seeding import derive_seed
from .seeding import rng as seeded
from .training import (TaskSplit, adapt_prompt, initial_prompt, make_episodes, train_base,
                       train_baseline, train_prompts_episodic)

log = logging.getLogger(__name__)

HOME_ENV = "PSI_HOME"
DEFAULT_HOME = "psi_runs"
LOG_COLUMNS = ["epoch", "phase", "task", "split", "metric", "value"]


class UsageError(ValueError):
    """Bad request from the user (exit code 2)."""


class MissingInputs(FileNotFoundError):
    """Required artifacts are absent or stale (exit code 3)."""


def resolve_home(home=None):
    return os.path.abspath(home or os.environ.get(HOME_ENV) or DEFAULT_HOME)


@dataclass
class Paths:
    home: str

    def __post_init__(self):
        self.home = resolve_home(self.home)

    def sub(self, *parts):
        return os.path.join(self.home, *parts)

    @property
    def manifest(self):
        return self.sub("data", "manifest.json")

    def dataset(self, task):
        return self.sub("data", f"{task.label()}.psid")

    def adapt_dataset(self, task):
        return self.sub("data", f"adapt_{task.label()}.psid")

    def model(self, name):
        return self.sub("models", f"{name}.psic")

    def checkpoint(self, name):
        return self.sub("checkpoints", f"{name}.psic")

    def ensure(self, *dirs):
        for d in dirs:
            os.makedirs(self.sub(d), exist_ok=True)


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _record_time(paths, key, seconds):
    paths.ensure("logs")
    path = paths.sub("logs", "timing.json")
    t = _read_json(path) if os.path.exists(path) else {}
    t[key] = seconds
    _write_json(path, t)


def _stamp(cfg):
    return {"config_digest": cfg.digest(), "seed": cfg.seed, "config": cfg.to_dict()}


def _data_section(cfg):
    d = cfg.to_dict()
    return {"seed": d["seed"], "system": d["system"], "data": d["data"]}


# ---------------------------------------------------------------------------
# gen-data


def gen_data(cfg, paths, force=False, workers=1):
    """One dataset file per grid task plus ``manifest.json``; returns the manifest."""
    paths.ensure("data")
    tasks = cfg.grid.tasks
    targets = [paths.dataset(t) for t in tasks] + [paths.manifest]
    existing = [p for p in targets if os.path.exists(p)]
    if existing and not force:
        raise UsageError(f"{len(existing)} output files exist (e.g. {existing[0]}); pass --force to overwrite")
    digest = cfg.digest()
    files = []
    for t in tasks:
        seed = derive_seed(cfg.seed, "data", t.label())
        psi = generate_dataset(cfg.system, t.channel_type, cfg.data.samples_per_task, seed,
                               cfg.data.quantize_bits, workers)
        ds = Dataset(psi, t.channel_type, cfg.system.rician_k_db, cfg.system.paths,
                     cfg.data.quantize_bits, seed, digest)
        path = paths.dataset(t)
        write_dataset(path, ds)
        files.append({"task": list(t.as_tuple()), "file": os.path.basename(path),
                      "count": ds.count, "sha256": file_sha256(path)})
        log.info("wrote %s (%d samples)", path, ds.count)
    manifest = dict(_stamp(cfg), kind="manifest", files=files)
    _write_json(paths.manifest, manifest)
    return manifest


def _check_manifest(cfg, paths):
    if not os.path.exists(paths.manifest):
        raise MissingInputs(f"no dataset manifest at {paths.manifest}; run gen-data first")
    man = _read_json(paths.manifest)
    cur = _data_section(cfg)
    old = {"seed": man["seed"], "system": man["config"]["system"], "data": man["config"]["data"]}
    if cur != old:
        raise MissingInputs("datasets were generated with a different system/data config or seed; "
                            "rerun gen-data --force")
    return man


def load_splits(cfg, paths, tasks, allow_missing=False):
    """Per-task :class:`TaskSplit` from the dataset files; splits are seeded per task."""
    _check_manifest(cfg, paths)
    missing = [t for t in tasks if not os.path.exists(paths.dataset(t))]
    if missing and not allow_missing:
        raise MissingInputs("missing datasets for tasks: " + ", ".join(t.label() for t in missing))
    out = {}
    for t in tasks:
        if t in missing:
            continue
        ds = read_dataset(paths.dataset(t))
        tr, va, te = split_indices(ds.count, derive_seed(cfg.seed, "split", t.label()))
        out[t] = TaskSplit.from_indices(ds.psi, tr, va, te)
    return out


def _split_record(splits):
    meta = {t.label(): {"train": index_digest(s.train_idx), "val": index_digest(s.val_idx),
                        "test": index_digest(s.test_idx)} for t, s in splits.items()}
    arrays = {f"split/{t.label()}/train": s.train_idx.astype(np.float64) for t, s in splits.items()}
    return meta, arrays


def train_indices_from(arrays):
    return {k.split("/")[1]: v.astype(np.int64) for k, v in arrays.items()
            if k.startswith("split/") and k.endswith("/train")}


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})


# ---------------------------------------------------------------------------
# train / train-baseline


def train(cfg, paths, force=False, stop_after=None):
    """Joint base training then episodic prompt refinement; writes ``models/prompt.psic``."""
    tasks = cfg.grid.tasks
    splits = load_splits(cfg, paths, tasks)
    paths.ensure("models", "checkpoints", "logs")
    ckpt = paths.checkpoint("base")
    if force and os.path.exists(ckpt):
        os.remove(ckpt)
    model = CodecModel(cfg.codec, seeded(cfg.seed, "init", "prompt-model"))
    bank = init_bank(tasks, cfg.codec.d_p, seeded(cfg.seed, "init", "bank"))
    res = train_base(model, bank, splits, cfg.train, checkpoint=ckpt, stop_after=stop_after)
    _record_time(paths, "base_train_s", res.wall_time)
    if res.epochs_run < cfg.train.epochs and stop_after is not None and res.epochs_run >= stop_after:
        log.info("stopped after %d epochs; rerun to resume from %s", res.epochs_run, ckpt)
        return None
    t0 = time.perf_counter()
    episodes = make_episodes(splits, tasks, cfg.train.episodes, cfg.train, "episodic", "train")
    val_eps = make_episodes(splits, tasks, 2 * len(tasks), cfg.train, "episodic-val", "val")
    bank, info = train_prompts_episodic(model, bank, episodes, cfg.train, val_eps)
    _record_time(paths, "episodic_s", time.perf_counter() - t0)
    rows = list(res.history)
    rows += [{"epoch": h["episode"], "phase": "episodic", "task": "all", "split": "val",
              "metric": "query_nmse_db", "value": h["query_nmse_db"]} for h in info["history"]]
    _write_log(paths.sub("logs", "train.csv"), rows)
    split_meta, split_arrays = _split_record(splits)
    meta = dict(_stamp(cfg), splits=split_meta, best_epoch=res.best_epoch,
                epochs_run=res.epochs_run, episodic={"before": info["before"], "after": info["after"]})
    save_model(paths.model("prompt"), model, bank, meta, split_arrays)
    log.info("saved %s", paths.model("prompt"))
    return {"base": res, "episodic": info}


def train_baseline_cmd(cfg, paths, force=False, stop_after=None):
    task = cfg.grid.baseline_task
    ignored = [t for t in cfg.grid.tasks if t != task]
    if ignored:
        log.warning("train-baseline uses only %s; ignoring %d other grid task(s)", task.label(), len(ignored))
    splits = load_splits(cfg, paths, [task])
    paths.ensure("models", "checkpoints", "logs")
    ckpt = paths.checkpoint("baseline")
    if force and os.path.exists(ckpt):
        os.remove(ckpt)
    model_b = CodecModel(baseline_config(cfg.codec, task.cr), seeded(cfg.seed, "init", "baseline-model"))
    res = train_baseline(model_b, task, splits, cfg.train, checkpoint=ckpt, stop_after=stop_after)
    _record_time(paths, "baseline_train_s", res.wall_time)
    if res.epochs_run < cfg.train.epochs and stop_after is not None and res.epochs_run >= stop_after:
        return None
    _write_log(paths.sub("logs", "baseline.csv"), res.history)
    split_meta, split_arrays = _split_record(splits)
    meta = dict(_stamp(cfg), splits=split_meta, best_epoch=res.best_epoch, epochs_run=res.epochs_run,
                baseline_task=list(task.as_tuple()))
    save_model(paths.model("baseline"), model_b, None, meta, split_arrays)
    return {"baseline": res}


# ---------------------------------------------------------------------------
# adapt


def adapt(cfg, paths, task=None, support_size=None, force=False, draws=200):
    task = TaskDescriptor.parse(task) if isinstance(task, str) else (task or TaskDescriptor.parse(cfg.grid.adapt_task))
    k = cfg.train.support_size if support_size is None else int(support_size)
    if k < 1:
        raise UsageError(f"--support-size must be at least 1, got {k}")
    if not os.path.exists(paths.model("prompt")):
        raise MissingInputs(f"no trained model at {paths.model('prompt')}; run train first")
    model, bank, meta, _ = load_model(paths.model("prompt"))
    if task in bank:
        raise UsageError(f"task {task.label()} is on the grid; its prompt is available by lookup "
                         "(use eval) and needs no adaptation")
    if task.cr not in model.cfg.crs:
        raise UsageError(f"CR {task.cr} is not served by the model (CRs {list(model.cfg.crs)})")
    if k >= cfg.data.adapt_samples:
        raise UsageError(f"--support-size {k} leaves no query samples (pool of {cfg.data.adapt_samples})")
    paths.ensure("data", "models", "reports")
    dpath = paths.adapt_dataset(task)
    seed = derive_seed(cfg.seed, "adapt-data", task.label())
    if os.path.exists(dpath) and not force:
        ds = read_dataset(dpath)
        if ds.seed != seed or ds.count != cfg.data.adapt_samples:
            raise UsageError(f"{dpath} was generated with other settings; pass --force")
    else:
        psi = generate_dataset(cfg.system, task.channel_type, cfg.data.adapt_samples, seed,
                               cfg.data.quantize_bits)
        ds = Dataset(psi, task.channel_type, cfg.system.rician_k_db, cfg.system.paths,
                     cfg.data.quantize_bits, seed, cfg.digest())
        write_dataset(dpath, ds)
    support, query = ds.psi[:k], ds.psi[k:]
    init = initial_prompt(model, bank, support)
    new_bank, new, info = adapt_prompt(model, bank, support, task, cfg.train)
    pre = finite_db(evaluate_model_cell(model, init, task, query, seeded(cfg.seed, "adapt-eval"), draws), "pre")
    post = finite_db(evaluate_model_cell(model, new, task, query, seeded(cfg.seed, "adapt-eval"), draws), "post")
    _record_time(paths, "adapt_s", info["wall_time"])
    report = dict(_stamp(cfg), kind="adaptation", task=list(task.as_tuple()), support_size=k,
                  query_size=len(query), steps=cfg.train.adapt_steps,
                  init_task=list(info["init_task"].as_tuple()),
                  pre_nmse_db=pre, post_nmse_db=post, support_losses=info["losses"],
                  dataset_sha256=file_sha256(dpath))
    out_meta = dict(meta, config_digest=cfg.digest(), seed=cfg.seed, config=cfg.to_dict(),
                    adapted_task=list(task.as_tuple()))
    _, _, _, arrays = load_model(paths.model("prompt"))
    extra = {k2: v for k2, v in arrays.items() if k2.startswith("split/")}
    save_model(paths.model("adapted"), model, new_bank, out_meta, extra)
    _write_json(paths.sub("reports", "adapt.json"), report)
    log.info("adaptation %s: pre %.3f dB, post %.3f dB", task.label(), pre, post)
    return report


# ---------------------------------------------------------------------------
# eval


def _load_named(paths, name):
    path = name if name.endswith(".psic") or os.sep in name else paths.model(name)
    if not os.path.exists(path):
        raise MissingInputs(f"model file not found: {path}")
    return load_model(path)


def evaluate(cfg, paths, models=("prompt", "baseline"), grid="full", out=None, fmt="csv",
             allow_partial=False, draws=200):
    grid_tasks = grid_by_name(grid, cfg.grid.tasks)
    splits = load_splits(cfg, paths, grid_tasks, allow_missing=allow_partial)
    if not allow_partial and len(splits) < len(grid_tasks):
        missing = [t for t in grid_tasks if t not in splits]
        raise MissingData(missing)
    test_sets = {t: TestSet(s.test, s.test_idx) for t, s in splits.items()}
    loaded, train_idx, matching = {}, {}, {}
    for name in models:
        model, bank, meta, arrays = _load_named(paths, name)
        mid = os.path.splitext(os.path.basename(name))[0]
        loaded[mid] = (model, bank)
        train_idx[mid] = train_indices_from(arrays)
    report = evaluate_grid(loaded, test_sets, grid_tasks, cfg.seed, cfg.digest(), draws=draws,
                           allow_partial=allow_partial, train_indices=train_idx)
    samples = [(ts.psi, t) for t, ts in test_sets.items()]
    for mid, (model, bank) in loaded.items():
        if bank is None or not samples:
            continue
        matching[mid] = matching_accuracy(model, bank, samples)
        matching[f"{mid}@class-mean-keys"] = matching_accuracy(model, class_mean_bank(model, bank, samples), samples)
    report.matching = matching
    paths.ensure("reports")
    out = out or paths.sub("reports", f"report.{fmt}")
    export_report(report, out, fmt)
    log.info("wrote %s", out)
    return report, out


__all__ = ["DEFAULT_HOME", "EvalReport", "HOME_ENV", "MissingInputs", "Paths", "UsageError", "adapt",
           "evaluate", "gen_data", "load_splits", "resolve_home", "train", "train_baseline_cmd"]
