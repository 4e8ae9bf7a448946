"""Training phases: joint base training, episodic prompt refinement, few-shot adaptation.

All randomness comes from the seed tree: batch order, channel noise and episode
sampling are keyed by ``(seed, phase, epoch/episode, step)``, so every phase is
a pure function of its inputs and the seed, and a run resumed from an
epoch-boundary checkpoint continues on the exact same trajectory.
"""
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .codec import nmse_db, noise_sigma
from .modelio import model_arrays, param_hash, read_bundle, write_bundle
from .prompts import Prompt, match_indices
from .seeding import rng as seeded

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_base: float = 1e-3
    lr_prompt: float = 1e-3
    lr_adapt: float = 1e-2
    episodes: int = 240
    inner_lr: float = 1e-2
    adapt_steps: int = 20
    support_size: int = 32
    query_size: int = 32
    key_weight: float = 0.1
    key_margin: float = 0.2
    patience: int = 10
    val_samples: int = 0  # 0 = whole validation split
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "support_size", "query_size", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        for name in ("lr_base", "lr_prompt", "lr_adapt", "inner_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.adapt_steps < 0 or self.episodes < 0:
            raise ValueError("adapt_steps and episodes must be non-negative")


@dataclass
class TaskSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None
    test_idx: np.ndarray = None

    @classmethod
    def from_indices(cls, psi, train_idx, val_idx, test_idx):
        return cls(psi[train_idx], psi[val_idx], psi[test_idx], train_idx, val_idx, test_idx)


@dataclass
class Episode:
    task: object
    support: np.ndarray
    query: np.ndarray


@dataclass
class TrainResult:
    model: object
    bank: object
    history: list
    best_epoch: int
    best_score: float
    epochs_run: int
    wall_time: float


# ---------------------------------------------------------------------------
# losses


def key_loss(model, bank, psi, task_idx, margin):
    """Hinge pulling embeddings to their task key and away from other-channel keys.

    Tasks sharing the sample's channel type are not pushed apart: CR and SNR are
    not observable in the PSI, so those pairs cannot be separated by the signal.
    """
    tasks = bank.tasks
    own = tasks[task_idx].channel_type
    mask = np.array([t.channel_type != own for t in tasks], dtype=np.float64)
    if not mask.any():
        return None
    e = T.l2_normalize(model.embed_t(psi))
    b, d = e.shape
    keys = T.l2_normalize(T.concat([T.reshape(p.key_vec, (1, d)) for p in bank.prompts], axis=0))
    sims = T.matmul(e, T.transpose(keys))
    pos = T.take(sims, np.full((b, len(tasks)), task_idx))
    hinge = T.relu(T.add(T.sub(sims, pos), T.Tensor(np.full(sims.shape, margin))))
    masked = T.mul(hinge, T.Tensor(np.broadcast_to(mask, sims.shape).copy()))
    return T.scale(T.sum_(masked), 1.0 / (b * mask.sum()))


def _noise(rng, sigma, b, m):
    return sigma * rng.standard_normal((b, m)) if sigma > 0 else None


def _check_finite(loss, where):
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss during {where}")


def evaluate_nmse(model, data, prompt, task, rng, batch=500):
    """One-noise-draw NMSE (dB) of ``data`` through encode -> channel -> decode."""
    sigma = noise_sigma(task.snr_db)
    m = model.cfg.latent_len(task.cr)
    recs = []
    value = None if prompt is None else prompt.value
    with T.no_grad():
        for i in range(0, len(data), batch):
            x = data[i:i + batch]
            enc = model.encode_t(x, value, task.cr)
            noisy = enc.latent.data
            if sigma > 0:
                noisy = noisy + sigma * rng.standard_normal((len(x), m))
            recs.append(model.decode_t(noisy, model.cr_index(task.cr)).data)
    return nmse_db(data, np.concatenate(recs))


def _val_subset(split, cfg):
    return split.val if not cfg.val_samples else split.val[:cfg.val_samples]


# ---------------------------------------------------------------------------
# joint base training


def _batch_schedule(tasks, datasets, cfg, epoch, phase):
    r = seeded(cfg.seed, phase, "schedule", epoch)
    sched = []
    for ti, t in enumerate(tasks):
        n = len(datasets[t].train)
        perm = r.permutation(n)
        for i in range(0, n, cfg.batch_size):
            sched.append((ti, perm[i:i + cfg.batch_size]))
    order = r.permutation(len(sched))
    return [sched[i] for i in order]


def _snapshot(model, bank):
    return {k: v.copy() for k, v in model_arrays(model, bank).items()}


def _restore(model, bank, arrays):
    for n, t in model.params.items():
        t.data = arrays[f"param/{n}"].copy()
    if bank is not None:
        for i, p in enumerate(bank):
            p.key_vec.data = arrays[f"bank/{i}/key_vec"].copy()
            p.value.data = arrays[f"bank/{i}/value"].copy()


def _save_checkpoint(path, model, bank, opt, best, state):
    arrays = {f"cur/{k}": v for k, v in model_arrays(model, bank).items()}
    arrays.update({f"best/{k}": v for k, v in best.items()})
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"opt/m/{i}"] = m
        arrays[f"opt/v/{i}"] = v
    meta = dict(state)
    meta["opt_t"] = opt.t
    meta["kind"] = "checkpoint"
    meta["codec"] = model.cfg.to_dict()
    write_bundle(path, meta, arrays)


def _load_checkpoint(path, model, bank, opt):
    meta, arrays = read_bundle(path)
    cur = {k[4:]: v for k, v in arrays.items() if k.startswith("cur/")}
    best = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")}
    _restore(model, bank, cur)
    opt.load_state_dict({"t": meta["opt_t"],
                         "m": [arrays[f"opt/m/{i}"] for i in range(len(opt.params))],
                         "v": [arrays[f"opt/v/{i}"] for i in range(len(opt.params))]})
    return meta, best


def _fit(model, bank, tasks, datasets, cfg, phase, params, checkpoint=None, stop_after=None):
    """Shared epoch loop for the prompted model and the baseline."""
    missing = [t for t in tasks if t not in datasets]
    if missing:
        raise ValueError(f"missing datasets for tasks: {[t.label() for t in missing]}")
    opt = T.Adam(params, lr=cfg.lr_base)
    state = {"epoch": 0, "best_score": math.inf, "best_epoch": -1, "bad_epochs": 0,
             "history": [], "wall_time": 0.0}
    best = _snapshot(model, bank)
    if checkpoint and os.path.exists(checkpoint):
        meta, best = _load_checkpoint(checkpoint, model, bank, opt)
        state = {k: meta[k] for k in state}
        log.info("%s: resumed from %s at epoch %d", phase, checkpoint, state["epoch"])
    wall0 = time.perf_counter() - state["wall_time"]
    while state["epoch"] < cfg.epochs and state["bad_epochs"] < cfg.patience:
        epoch = state["epoch"]
        losses = []
        for step, (ti, idx) in enumerate(_batch_schedule(tasks, datasets, cfg, epoch, phase)):
            task = tasks[ti]
            x = datasets[task].train[idx]
            r = seeded(cfg.seed, phase, "noise", epoch, step)
            prompt = bank.lookup(task).value if model.cfg.prompted else None
            noise = _noise(r, noise_sigma(task.snr_db), len(x), model.cfg.latent_len(task.cr))
            rec_loss, _ = model.reconstruction_loss(x, prompt, task.cr, noise)
            loss = rec_loss
            if bank is not None and cfg.key_weight > 0:
                kl = key_loss(model, bank, x, bank.index(task), cfg.key_margin)
                if kl is not None:
                    loss = T.add(loss, T.scale(kl, cfg.key_weight))
            _check_finite(loss, f"{phase} epoch {epoch}")
            opt.step(T.grad(loss, params))
            losses.append(rec_loss.item())
        train_mse = float(np.mean(losses))
        state["history"].append({"epoch": epoch, "phase": phase, "task": "all", "split": "train",
                                 "metric": "mse", "value": train_mse})
        scores = []
        for ti, task in enumerate(tasks):
            r = seeded(cfg.seed, phase, "val", ti)
            prompt = bank.lookup(task) if model.cfg.prompted else None
            score = evaluate_nmse(model, _val_subset(datasets[task], cfg), prompt, task, r)
            scores.append(score)
            state["history"].append({"epoch": epoch, "phase": phase, "task": task.label(),
                                     "split": "val", "metric": "nmse_db", "value": score})
        mean_score = float(np.mean(scores))
        log.info("%s epoch %d: train mse %.5f, val nmse %.3f dB", phase, epoch, train_mse, mean_score)
        if mean_score < state["best_score"]:
            state.update(best_score=mean_score, best_epoch=epoch, bad_epochs=0)
            best = _snapshot(model, bank)
        else:
            state["bad_epochs"] += 1
        state["epoch"] = epoch + 1
        state["wall_time"] = time.perf_counter() - wall0
        if checkpoint:
            _save_checkpoint(checkpoint, model, bank, opt, best, state)
        if stop_after is not None and state["epoch"] >= stop_after:
            break
    _restore(model, bank, best)
    return TrainResult(model, bank, state["history"], state["best_epoch"], state["best_score"],
                       state["epoch"], state["wall_time"])


def train_base(model, bank, datasets, cfg, checkpoint=None, stop_after=None):
    """Joint training of encoder, decoder, prompts, keys and embedding head over the grid."""
    if not model.cfg.prompted:
        raise ValueError("train_base needs a prompted model; use train_baseline")
    tasks = bank.tasks
    params = model.encoder_params() + model.decoder_params() + model.embed_params() + bank.parameters()
    return _fit(model, bank, tasks, datasets, cfg, "base", params, checkpoint, stop_after)


def train_baseline(model_b, task, datasets, cfg, checkpoint=None, stop_after=None):
    """Single-configuration reference autoencoder (same optimizer and epoch budget)."""
    if model_b.cfg.prompted:
        raise ValueError("train_baseline needs a baseline model (fixed_cr set)")
    if task.cr != model_b.cfg.fixed_cr:
        raise ValueError(f"baseline is fixed to CR {model_b.cfg.fixed_cr}, task has {task.cr}")
    params = model_b.encoder_params() + model_b.decoder_params()
    return _fit(model_b, None, [task], datasets, cfg, "baseline", params, checkpoint, stop_after)


# ---------------------------------------------------------------------------
# episodic prompt refinement


def make_episodes(datasets, tasks, n, cfg, phase="episodic", pool="train"):
    """``n`` episodes cycling over ``tasks``; support and query are disjoint."""
    eps = []
    for e in range(n):
        task = tasks[e % len(tasks)]
        data = getattr(datasets[task], pool)
        r = seeded(cfg.seed, phase, "episode", e)
        k = min(cfg.support_size + cfg.query_size, len(data))
        idx = r.choice(len(data), size=k, replace=False)
        ns = min(cfg.support_size, k - 1)
        eps.append(Episode(task, data[idx[:ns]], data[idx[ns:]]))
    return eps


def _prompt_loss(model, value, x, task, r):
    noise = _noise(r, noise_sigma(task.snr_db), len(x), model.cfg.latent_len(task.cr))
    loss, _ = model.reconstruction_loss(x, value, task.cr, noise)
    return loss


def query_nmse(model, bank, episodes, seed, phase):
    vals = []
    for e, ep in enumerate(episodes):
        r = seeded(seed, phase, "query-eval", e)
        vals.append(evaluate_nmse(model, ep.query, bank.lookup(ep.task), ep.task, r))
    return float(np.mean(vals))


def train_prompts_episodic(model, bank, episodes, cfg, val_episodes=None, eval_every=None):
    """First-order episodic refinement of prompt keys and values; network frozen.

    Per episode: one plain gradient step on the support loss gives an adapted
    value, the query-loss gradient at that value (first order) updates the
    stored value with Adam. Keys follow the contrastive objective. The bank with
    the best mean query NMSE on ``val_episodes`` (initial bank included) is
    returned, so refinement never makes the held-out score worse.
    """
    bank = bank.copy()
    if not episodes:
        return bank, {"before": None, "after": None, "history": []}
    frozen = (param_hash(model, "enc."), param_hash(model, "dec."), param_hash(model, "embed"))
    params = bank.parameters()
    opt = T.Adam(params, lr=cfg.lr_prompt)
    val_episodes = val_episodes if val_episodes is not None else episodes
    before = query_nmse(model, bank, val_episodes, cfg.seed, "episodic-val")
    best_score, best = before, [p.data.copy() for p in params]
    history = [{"episode": 0, "query_nmse_db": before}]
    eval_every = eval_every or max(1, len(bank))
    for e, ep in enumerate(episodes):
        r = seeded(cfg.seed, "episodic", "noise", e)
        ti = bank.index(ep.task)
        prompt = bank.prompts[ti]
        (g_s,) = T.grad(_prompt_loss(model, prompt.value, ep.support, ep.task, r), [prompt.value])
        adapted = T.Tensor(prompt.value.data - cfg.inner_lr * g_s, requires_grad=True)
        q_loss = _prompt_loss(model, adapted, ep.query, ep.task, r)
        _check_finite(q_loss, f"episode {e}")
        (g_q,) = T.grad(q_loss, [adapted])
        grads = [np.zeros(p.shape) for p in params]
        grads[2 * ti + 1] = g_q
        kl = key_loss(model, bank, ep.support, ti, cfg.key_margin)
        if kl is not None:
            gk = T.grad(T.scale(kl, cfg.key_weight), params)
            grads = [a + b for a, b in zip(grads, gk)]
        opt.step(grads)
        if (e + 1) % eval_every == 0 or e + 1 == len(episodes):
            score = query_nmse(model, bank, val_episodes, cfg.seed, "episodic-val")
            history.append({"episode": e + 1, "query_nmse_db": score})
            if score < best_score:
                best_score, best = score, [p.data.copy() for p in params]
    for p, a in zip(params, best):
        p.data = a
    after = (param_hash(model, "enc."), param_hash(model, "dec."), param_hash(model, "embed"))
    if after != frozen:
        raise AssertionError("episodic prompt training modified frozen network parameters")
    return bank, {"before": before, "after": best_score, "history": history}


# ---------------------------------------------------------------------------
# few-shot adaptation


def nearest_prompt_index(model, bank, support):
    emb = model.embed(support).mean(axis=0)
    return int(match_indices(bank, emb)[0])


def adapt_prompt(model, bank, support, task, cfg):
    """Tune a new prompt for an off-grid ``task`` on a small support set.

    Starts from the grid prompt whose key best matches the mean support
    embedding and takes ``cfg.adapt_steps`` Adam steps on the support
    reconstruction loss (value) plus a cosine pull of the key toward the support
    embedding. Returns ``(extended_bank, new_prompt, info)``; ``bank`` is not
    modified and the network weights are never touched.
    """
    support = np.asarray(support, dtype=np.float64)
    if support.ndim != 3 or len(support) == 0:
        raise ValueError("adaptation needs a non-empty support set")
    if task in bank:
        raise ValueError(f"task {task.label()} is on the grid; use bank.lookup instead")
    model.cr_index(task.cr)
    frozen = (param_hash(model, "enc."), param_hash(model, "dec."))
    init_idx = nearest_prompt_index(model, bank, support)
    src = bank.prompts[init_idx]
    new = Prompt(task, T.Tensor(src.key_vec.data.copy(), requires_grad=True),
                 T.Tensor(src.value.data.copy(), requires_grad=True))
    target = T.Tensor(T.l2_normalize(T.Tensor(model.embed(support).mean(axis=0)[None])).data)
    opt = T.Adam([new.key_vec, new.value], lr=cfg.lr_adapt)
    t0 = time.perf_counter()
    losses = []
    for s in range(cfg.adapt_steps):
        r = seeded(cfg.seed, "adapt", task.label(), s)
        loss = _prompt_loss(model, new.value, support, task, r)
        _check_finite(loss, f"adaptation step {s}")
        k = T.reshape(T.l2_normalize(T.reshape(new.key_vec, (1, bank.d_p))), (bank.d_p, 1))
        pull = T.scale(T.sum_(T.matmul(target, k)), -cfg.key_weight)
        opt.step(T.grad(T.add(loss, pull), [new.key_vec, new.value]))
        losses.append(loss.item())
    wall = time.perf_counter() - t0
    if (param_hash(model, "enc."), param_hash(model, "dec.")) != frozen:
        raise AssertionError("adaptation modified frozen network parameters")
    info = {"init_task": src.key_meta, "init_index": init_idx, "losses": losses, "wall_time": wall}
    return bank.extended(new), new, info


def initial_prompt(model, bank, support):
    """The unadapted nearest grid prompt ``adapt_prompt`` would start from."""
    return bank.prompts[nearest_prompt_index(model, bank, support)]


__all__ = ["Episode", "NumericError", "TaskSplit", "TrainConfig",
           "TrainResult", "adapt_prompt", "evaluate_nmse", "initial_prompt", "key_loss",
           "make_episodes", "nearest_prompt_index", "query_nmse", "train_base",
           "train_baseline", "train_prompts_episodic"]
