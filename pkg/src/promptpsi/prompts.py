"""Prompt bank: learnable conditioning vectors keyed by task metadata.

Every prompt carries two keys. ``key_meta`` is the exact task tuple used when
the deployment condition is known; ``key_vec`` is a learned vector compared by
cosine similarity against an embedding of the PSI itself when it is not.
"""
import json
import math
from dataclasses import dataclass

import numpy as np

from .irs import CHANNEL_TYPES, parse_channel_type
from .tensor import Tensor

BANK_JSON_VERSION = 1


class PromptNotFound(KeyError):
    """The requested task descriptor is not in the bank."""


@dataclass(frozen=True, order=True)
class TaskDescriptor:
    cr: float
    snr_db: float
    channel_type: str

    def __post_init__(self):
        if not 0.0 < self.cr <= 1.0:
            raise ValueError(f"compression ratio must be in (0, 1], got {self.cr}")
        object.__setattr__(self, "channel_type", parse_channel_type(self.channel_type))
        object.__setattr__(self, "cr", float(self.cr))
        object.__setattr__(self, "snr_db", float(self.snr_db))

    @classmethod
    def parse(cls, text):
        """Parse ``"cr,snr,channel"``, e.g. ``"0.25,12,NLoS"``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"task must be 'cr,snr_db,channel', got {text!r}")
        return cls(float(parts[0]), float(parts[1]), parts[2])

    def label(self):
        return f"cr{self.cr:g}_snr{self.snr_db:g}_{self.channel_type}"

    def as_tuple(self):
        return (self.cr, self.snr_db, self.channel_type)


def task_grid(crs, snrs, channels):
    return [TaskDescriptor(c, s, ch) for c in crs for s in snrs for ch in channels]


@dataclass
class Prompt:
    key_meta: TaskDescriptor
    key_vec: Tensor
    value: Tensor

    def copy(self):
        return Prompt(self.key_meta,
                      Tensor(self.key_vec.data.copy(), requires_grad=True),
                      Tensor(self.value.data.copy(), requires_grad=True))


class PromptBank:
    def __init__(self, prompts, d_p):
        if not prompts:
            raise ValueError("prompt bank must not be empty")
        metas = [p.key_meta for p in prompts]
        if len(set(metas)) != len(metas):
            raise ValueError("duplicate task descriptors in prompt bank")
        for p in prompts:
            if p.key_vec.shape != (d_p,) or p.value.shape != (d_p,):
                raise ValueError(f"prompt {p.key_meta.label()} does not have dimension {d_p}")
        self.prompts = list(prompts)
        self.d_p = d_p
        self._index = {m: i for i, m in enumerate(metas)}

    def __len__(self):
        return len(self.prompts)

    def __iter__(self):
        return iter(self.prompts)

    @property
    def tasks(self):
        return [p.key_meta for p in self.prompts]

    def index(self, meta):
        try:
            return self._index[meta]
        except KeyError:
            raise PromptNotFound(meta) from None

    def lookup(self, meta):
        """Exact metadata retrieval; raises :class:`PromptNotFound` off-grid."""
        return self.prompts[self.index(meta)]

    def __contains__(self, meta):
        return meta in self._index

    def parameters(self):
        out = []
        for p in self.prompts:
            out.extend([p.key_vec, p.value])
        return out

    def key_matrix(self):
        return np.stack([p.key_vec.data for p in self.prompts])

    def copy(self):
        return PromptBank([p.copy() for p in self.prompts], self.d_p)

    def extended(self, prompt):
        """New bank with ``prompt`` appended; ``self`` is left untouched."""
        return PromptBank([p.copy() for p in self.prompts] + [prompt], self.d_p)

    def to_json(self):
        return {
            "version": BANK_JSON_VERSION,
            "d_p": self.d_p,
            "prompts": [{"cr": p.key_meta.cr, "snr_db": p.key_meta.snr_db,
                         "channel_type": p.key_meta.channel_type,
                         "key_vec": p.key_vec.data.tolist(),
                         "value": p.value.data.tolist()} for p in self.prompts],
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("version") != BANK_JSON_VERSION:
            raise ValueError(f"unsupported prompt bank JSON version {obj.get('version')}")
        prompts = [Prompt(TaskDescriptor(p["cr"], p["snr_db"], p["channel_type"]),
                          Tensor(p["key_vec"], requires_grad=True),
                          Tensor(p["value"], requires_grad=True)) for p in obj["prompts"]]
        return cls(prompts, int(obj["d_p"]))

    def export_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def init_bank(tasks, d_p, rng, std=0.02):
    """One prompt per task, key and value drawn i.i.d. ``N(0, std^2)``."""
    tasks = list(tasks)
    if len(set(tasks)) != len(tasks):
        raise ValueError("duplicate task descriptors")
    prompts = []
    for t in tasks:
        key = rng.normal(0.0, std, d_p)
        value = rng.normal(0.0, std, d_p)
        prompts.append(Prompt(t, Tensor(key, requires_grad=True), Tensor(value, requires_grad=True)))
    return PromptBank(prompts, d_p)


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def match_indices(bank, embeddings):
    """Bank index of the best-matching key for each row of ``embeddings``.

    Ties resolve to the lowest bank index.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot match an all-zero embedding")
    keys = bank.key_matrix()
    knorm = np.linalg.norm(keys, axis=1)
    knorm[knorm == 0] = np.inf
    sims = (e / norms[:, None]) @ (keys / knorm[:, None]).T
    return np.argmax(sims, axis=1)


def match(bank, embedding):
    return bank.prompts[int(match_indices(bank, embedding)[0])]


def psi_patch_features(psi, patch):
    """Per-patch mean of value and of |wrapped neighbor differences|.

    ``psi`` is ``(B, H, W)`` normalized phases. Returns ``(B, 3 * n_patches)``:
    patch means of the phase, of the horizontal and of the vertical absolute
    wrapped differences (each measured in turns, so in [0, 0.5]).
    """
    psi = np.asarray(psi, dtype=np.float64)
    b, h, w = psi.shape
    dh = np.zeros_like(psi)
    dv = np.zeros_like(psi)
    dh[:, :, :-1] = np.abs(np.mod(np.diff(psi, axis=2) + 0.5, 1.0) - 0.5)
    dv[:, :-1, :] = np.abs(np.mod(np.diff(psi, axis=1) + 0.5, 1.0) - 0.5)

    def pool(x):
        return x.reshape(b, h // patch, patch, w // patch, patch).mean(axis=(2, 4)).reshape(b, -1)

    return np.concatenate([pool(psi), pool(dh), pool(dv)], axis=1)


def feature_dim(rows, cols, patch):
    return 3 * (rows // patch) * (cols // patch)


def binomial_ci(k, n, z=2.576):
    """Wilson score interval for a binomial proportion (default 99%)."""
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (centre - half, centre + half)


__all__ = ["CHANNEL_TYPES", "Prompt", "PromptBank", "PromptNotFound", "TaskDescriptor",
           "binomial_ci", "cosine", "feature_dim", "init_bank", "match", "match_indices",
           "psi_patch_features", "task_grid"]
