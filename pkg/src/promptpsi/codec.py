"""Prompt-conditioned asymmetric autoencoder for normalized PSI matrices.

Encoder: ``P x P`` patches -> linear embedding -> [prompt token; patch tokens]
-> one pre-norm attention block (FiLM on the first layer norm) -> flattened
patch features -> MLP -> max-length pre-latent ``z``. A gate head on the
pooled features and the prompt scores every pre-latent position; the ``m``
highest gates are kept (ascending index order), scaled by their gate and
power-normalized.

Decoder: ``[noisy latent, zero padding, CR embedding] -> 256 -> H*W`` with a
sigmoid output. It is conditioned on the CR only.

The baseline is the same network with the prompt token and FiLM removed and
the latent length fixed to one CR.
"""
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .prompts import feature_dim, psi_patch_features

NMSE_FLOOR_DB = -100.0


@dataclass(frozen=True)
class CodecConfig:
    rows: int = 16
    cols: int = 16
    patch: int = 4
    d_model: int = 64
    d_p: int = 64
    crs: tuple = (0.125, 0.25, 0.5)
    ff_mult: int = 4
    latent_hidden: int = 512
    dec_hidden: int = 256
    cr_embed_dim: int = 8
    use_prompt_token: bool = True
    use_film: bool = True
    rate_mode: str = "pool"  # "pool" or "gate"
    straight_through: bool = True
    fixed_cr: float = None  # set for the single-configuration baseline

    def __post_init__(self):
        object.__setattr__(self, "crs", tuple(float(c) for c in self.crs))
        if self.rows % self.patch or self.cols % self.patch:
            raise ValueError(f"patch {self.patch} must divide the {self.rows}x{self.cols} surface")
        if self.rate_mode not in ("gate", "pool"):
            raise ValueError(f"rate_mode must be 'gate' or 'pool', got {self.rate_mode!r}")
        if self.fixed_cr is not None and float(self.fixed_cr) not in self.crs:
            raise ValueError(f"fixed_cr {self.fixed_cr} not in crs {self.crs}")
        for c in self.crs:
            self.latent_len(c)

    @property
    def n_elements(self):
        return self.rows * self.cols

    @property
    def n_tokens(self):
        return (self.rows // self.patch) * (self.cols // self.patch)

    @property
    def latent_max(self):
        return max(self.latent_len(c) for c in self.crs)

    @property
    def prompted(self):
        return self.fixed_cr is None

    def latent_len(self, cr):
        m = int(round(float(cr) * self.n_elements))
        if m < 1:
            raise ValueError(f"compression ratio {cr} gives an empty latent")
        return m

    def to_dict(self):
        d = asdict(self)
        d["crs"] = list(self.crs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["crs"] = tuple(d["crs"])
        return cls(**d)


def baseline_config(cfg, cr=0.25):
    return replace(cfg, use_prompt_token=False, use_film=False, fixed_cr=float(cr))


@dataclass
class Encoded:
    """Differentiable pieces of one encoder pass."""

    latent: T.Tensor  # (B, m), power-normalized
    dropped: T.Tensor = None  # (B, L - m) straight-through placeholder, forward zero
    gates: np.ndarray = None
    kept: np.ndarray = field(default=None, repr=False)


class CodecModel:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.params = {}
        c = cfg
        d, dp, L = c.d_model, c.d_p, c.latent_max
        pp = c.patch * c.patch
        self._dense("enc.patch", pp, d, rng)
        self._param("enc.pos", rng.normal(0, 0.02, (c.n_tokens, d)))
        if c.use_prompt_token:
            self._dense("enc.prompt_tok", dp, d, rng)
            self._param("enc.prompt_pos", rng.normal(0, 0.02, (d,)))
        if c.use_film:
            self._dense("enc.film", dp, 2 * d, rng, std_scale=0.5)
        for ln in ("enc.ln1", "enc.ln2", "enc.lnf"):
            self._param(ln + ".g", np.ones(d))
            self._param(ln + ".b", np.zeros(d))
        for name in ("q", "k", "v", "o"):
            self._dense(f"enc.attn.{name}", d, d, rng)
        self._dense("enc.ff1", d, c.ff_mult * d, rng)
        self._dense("enc.ff2", c.ff_mult * d, d, rng)
        self._dense("enc.lat1", c.n_tokens * d, c.latent_hidden, rng)
        self._dense("enc.lat2", c.latent_hidden, L, rng)
        gate_in = d + (dp if c.prompted else 0)
        self._dense("enc.gate", gate_in, L, rng, std_scale=0.01)
        # decreasing bias: the initial ranking is index order
        self.params["enc.gate.b"].data[:] = np.linspace(2.0, -2.0, L)
        n_cr = len(c.crs) if c.prompted else 1
        self._param("dec.cr_embed", rng.normal(0, 1.0, (n_cr, c.cr_embed_dim)))
        self._dense("dec.fc1", L + c.cr_embed_dim, c.dec_hidden, rng)
        self._dense("dec.fc2", c.dec_hidden, c.n_elements, rng)
        self._dense("embed", feature_dim(c.rows, c.cols, c.patch), dp, rng)

    # -- parameters -------------------------------------------------------

    def _param(self, name, value):
        self.params[name] = T.Tensor(value, requires_grad=True, name=name)

    def _dense(self, name, n_in, n_out, rng, std_scale=1.0):
        self._param(name + ".W", rng.normal(0.0, std_scale / math.sqrt(n_in), (n_in, n_out)))
        self._param(name + ".b", np.zeros(n_out))

    def group(self, prefix):
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def encoder_params(self):
        return self.group("enc.")

    def decoder_params(self):
        return self.group("dec.")

    def embed_params(self):
        return self.group("embed")

    def count(self, prefix):
        return int(sum(t.size for t in self.group(prefix)))

    def _lin(self, x, name):
        p = self.params
        return T.bias_add(T.matmul(x, p[name + ".W"]), p[name + ".b"])

    def _ln(self, x, name):
        return T.layer_norm(x, self.params[name + ".g"], self.params[name + ".b"])

    def cr_index(self, cr):
        cr = float(cr)
        if self.cfg.prompted:
            if cr not in self.cfg.crs:
                raise ValueError(f"CR {cr} is not in the model grid {self.cfg.crs}")
            return self.cfg.crs.index(cr)
        if cr != self.cfg.fixed_cr:
            raise ValueError(f"baseline model only supports CR {self.cfg.fixed_cr}, got {cr}")
        return 0

    # -- encoder ----------------------------------------------------------

    def patchify(self, psi):
        c = self.cfg
        x = T.as_tensor(psi)
        b = x.shape[0]
        nh, nw, p = c.rows // c.patch, c.cols // c.patch, c.patch
        x = T.reshape(x, (b, nh, p, nw, p))
        x = T.permute(x, (0, 1, 3, 2, 4))
        return T.reshape(x, (b, nh * nw, p * p))

    def _prompt_batch(self, prompt, b):
        prompt = T.as_tensor(prompt)
        if prompt.ndim == 1:
            return T.expand(prompt, 0, b)
        if prompt.shape[0] != b:
            raise T.ShapeError(f"encode: prompt batch {prompt.shape} vs input batch {b}")
        return prompt

    def features(self, psi, prompt=None):
        """Token features after the attention block: (pooled (B, d), patch tokens (B, N, d))."""
        c = self.cfg
        x = self.patchify(psi)
        b = x.shape[0]
        tok = self._lin(x, "enc.patch")
        tok = T.add(tok, T.expand(self.params["enc.pos"], 0, b))
        if c.prompted:
            pv = self._prompt_batch(prompt, b)
        if c.use_prompt_token:
            pt = T.bias_add(self._lin(pv, "enc.prompt_tok"), self.params["enc.prompt_pos"])
            tok = T.concat([T.reshape(pt, (b, 1, c.d_model)), tok], axis=1)
        h = self._ln(tok, "enc.ln1")
        if c.use_film:
            film = self._lin(pv, "enc.film")
            gamma = T.expand(T.slice_(film, 1, 0, c.d_model), 1, h.shape[1])
            beta = T.expand(T.slice_(film, 1, c.d_model, 2 * c.d_model), 1, h.shape[1])
            h = T.add(T.add(h, T.mul(h, gamma)), beta)
        q = self._lin(h, "enc.attn.q")
        k = self._lin(h, "enc.attn.k")
        v = self._lin(h, "enc.attn.v")
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(c.d_model)))
        tok = T.add(tok, self._lin(T.matmul(att, v), "enc.attn.o"))
        ff = self._lin(T.gelu(self._lin(self._ln(tok, "enc.ln2"), "enc.ff1")), "enc.ff2")
        tok = self._ln(T.add(tok, ff), "enc.lnf")
        pooled = T.mean(tok, axis=1)
        n0 = 1 if c.use_prompt_token else 0
        patches = T.slice_(tok, 1, n0, n0 + c.n_tokens) if n0 else tok
        return pooled, patches, (pv if c.prompted else None)

    def encode_t(self, psi, prompt, cr, train=False):
        c = self.cfg
        self.cr_index(cr)
        m = c.latent_len(cr)
        L = c.latent_max
        pooled, patches, pv = self.features(psi, prompt)
        b = pooled.shape[0]
        flat = T.reshape(patches, (b, c.n_tokens * c.d_model))
        z = self._lin(T.gelu(self._lin(flat, "enc.lat1")), "enc.lat2")
        if c.rate_mode == "pool":
            return Encoded(T.power_normalize(T.matmul(z, T.Tensor(_pool_matrix(L, m)))))
        gate_in = T.concat([pooled, pv], axis=1) if c.prompted else pooled
        gates = T.sigmoid(self._lin(gate_in, "enc.gate"))
        order = np.argsort(-gates.data, axis=1, kind="stable")
        kept = np.sort(order[:, :m], axis=1)
        latent = T.power_normalize(T.take(T.mul(z, gates), kept))
        dropped = None
        if m < L and train and c.straight_through:
            # the pre-latent is detached here so the surrogate only reaches the gates
            rest = np.sort(order[:, m:], axis=1)
            dropped = T.straight_through_zero(T.take(T.mul(T.Tensor(z.data), gates), rest))
        return Encoded(latent, dropped, gates.data, kept)

    def encode(self, psi, prompt, cr):
        """Power-normalized latent codes, ``(B, round(cr * H * W))``."""
        psi = _batch(psi, self.cfg)
        with T.no_grad():
            return self.encode_t(psi, _value(prompt), cr).latent.data

    # -- decoder ----------------------------------------------------------

    def decode_t(self, noisy, cr_idx, dropped=None):
        c = self.cfg
        noisy = T.as_tensor(noisy)
        b, m = noisy.shape
        L = c.latent_max
        if m > L:
            raise T.ShapeError(f"decode: latent length {m} exceeds maximum {L}")
        parts = [noisy]
        if m < L:
            parts.append(dropped if dropped is not None else T.Tensor(np.zeros((b, L - m))))
        emb = T.reshape(T.slice_(self.params["dec.cr_embed"], 0, cr_idx, cr_idx + 1),
                        (c.cr_embed_dim,))
        parts.append(T.expand(emb, 0, b))
        h = T.gelu(self._lin(T.concat(parts, axis=1), "dec.fc1"))
        out = T.sigmoid(self._lin(h, "dec.fc2"))
        return T.reshape(out, (b, c.rows, c.cols))

    def decode(self, noisy, cr):
        noisy = np.atleast_2d(np.asarray(noisy, dtype=np.float64))
        m = self.cfg.latent_len(cr)
        if noisy.shape[1] != m:
            raise ValueError(f"latent length {noisy.shape[1]} inconsistent with CR {cr} (expected {m})")
        with T.no_grad():
            return self.decode_t(noisy, self.cr_index(cr)).data

    # -- prompt matching head ---------------------------------------------

    def embed_t(self, psi):
        f = psi_patch_features(_batch(psi, self.cfg), self.cfg.patch)
        return self._lin(T.Tensor(f), "embed")

    def embed(self, psi):
        with T.no_grad():
            return self.embed_t(psi).data

    # -- training helpers -------------------------------------------------

    def reconstruction_loss(self, psi, prompt, cr, noise):
        """MSE of encode -> (+ fixed noise) -> decode; ``noise`` is ``(B, m)`` or None."""
        psi = _batch(psi, self.cfg)
        enc = self.encode_t(psi, prompt, cr, train=True)
        noisy = enc.latent if noise is None else T.add(enc.latent, T.Tensor(noise))
        rec = self.decode_t(noisy, self.cr_index(cr), enc.dropped)
        return T.mse_loss(rec, T.Tensor(psi)), rec

    def copy(self):
        other = CodecModel.__new__(CodecModel)
        other.cfg = self.cfg
        other.params = {n: T.Tensor(t.data.copy(), requires_grad=True, name=n)
                        for n, t in self.params.items()}
        return other

    def load_arrays(self, arrays):
        for n, t in self.params.items():
            if arrays[n].shape != t.shape:
                raise ValueError(f"parameter {n}: shape {arrays[n].shape} != {t.shape}")
            t.data = np.array(arrays[n], dtype=np.float64)


def _pool_matrix(n, m):
    """Adaptive average pooling of length ``n`` into ``m`` bins, as an (n, m) matrix."""
    P = np.zeros((n, m))
    for j in range(m):
        a = (j * n) // m
        b = -((-(j + 1) * n) // m)
        P[a:b, j] = 1.0 / (b - a)
    return P


def _batch(psi, cfg):
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 2:
        psi = psi[None]
    if psi.shape[1:] != (cfg.rows, cfg.cols):
        raise T.ShapeError(f"PSI shape {psi.shape[1:]} != model surface {(cfg.rows, cfg.cols)}")
    return psi


def _value(prompt):
    if prompt is None:
        return None
    return prompt.value if hasattr(prompt, "value") else T.as_tensor(prompt)


def control_channel(latent, snr_db, rng):
    """Add i.i.d. Gaussian noise of variance ``10**(-snr_db/10)`` per dimension.

    ``snr_db=math.inf`` disables the noise.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return latent.copy()
    sigma = math.sqrt(10.0 ** (-snr_db / 10.0))
    return latent + sigma * rng.standard_normal(latent.shape)


def noise_sigma(snr_db):
    return 0.0 if math.isinf(snr_db) else math.sqrt(10.0 ** (-snr_db / 10.0))


def baseline_latent_for_cr(latent, cr_target, n_elements):
    """Map a fixed-length baseline latent onto another CR's channel frame.

    Lower CR: only the first ``m`` entries fit the frame (the rest are dropped).
    Higher CR: the baseline cannot emit more, so the frame is zero-padded.
    """
    latent = np.atleast_2d(latent)
    m = int(round(cr_target * n_elements))
    b, m0 = latent.shape
    if m <= m0:
        return latent[:, :m].copy()
    return np.concatenate([latent, np.zeros((b, m - m0))], axis=1)


def transmit(model, psi, prompt, cr, snr_db, rng):
    """Full encode -> control channel -> decode for a prompted model."""
    latent = model.encode(psi, prompt, cr)
    return model.decode(control_channel(latent, snr_db, rng), cr)


def baseline_transmit(model_b, psi, cr, snr_db, rng):
    """Baseline at any CR via the truncate / zero-pad convention."""
    cfg = model_b.cfg
    latent = model_b.encode(psi, None, cfg.fixed_cr)
    framed = baseline_latent_for_cr(latent, cr, cfg.n_elements)
    noisy = control_channel(framed, snr_db, rng)
    with T.no_grad():
        return model_b.decode_t(noisy, 0).data


def nmse_ratios(psi, psi_hat):
    """Per-sample ``||psi - psi_hat||^2 / ||psi||^2``; zero-energy samples give NaN."""
    psi = np.asarray(psi, dtype=np.float64)
    psi_hat = np.asarray(psi_hat, dtype=np.float64)
    if psi.shape != psi_hat.shape:
        raise ValueError(f"nmse: shape mismatch {psi.shape} vs {psi_hat.shape}")
    if psi.ndim == 2:
        psi, psi_hat = psi[None], psi_hat[None]
    num = ((psi - psi_hat) ** 2).sum(axis=(1, 2))
    den = (psi ** 2).sum(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, np.nan)


def nmse_db(psi, psi_hat, return_excluded=False):
    """Mean of per-sample ratios, then ``10 log10``; floored at -100 dB."""
    r = nmse_ratios(psi, psi_hat)
    valid = ~np.isnan(r)
    excluded = int((~valid).sum())
    if not valid.any():
        val = float("nan")
    else:
        mean = float(r[valid].mean())
        val = NMSE_FLOOR_DB if mean <= 10 ** (NMSE_FLOOR_DB / 10) else 10.0 * math.log10(mean)
    return (val, excluded) if return_excluded else val


def mean_predictor_nmse_db(psi):
    """NMSE of predicting the dataset mean matrix for every sample."""
    psi = np.asarray(psi, dtype=np.float64)
    return nmse_db(psi, np.broadcast_to(psi.mean(axis=0), psi.shape))
