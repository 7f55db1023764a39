"""x0-prediction denoisers.

``AnalyticDenoiser`` returns the exact posterior mean E[tau0 | tau_k] under an
isotropic Gaussian-mixture prior. ``MlpDenoiser`` is a small fully connected
network over the flattened (tau_k, f_k, PE(k), conditioning) vector, trained
with manual backprop on the squared x0 error.

Both expose the same interface::

    predict(tau_k, feat, k, cond) -> x0            # tau_k (B, H, 3), feat (B, H, C)
    vjp(tau_k, feat, k, cond, cot) -> (g_tau, g_feat)
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import DiffusionSchedule, forward_noise
from .errors import (DimensionMismatch, DivergedTraining, EmptyDataset, IoError, MissingFile,
                     NumericalUnderflow)

log = logging.getLogger(__name__)

PE_DIM = 32
PE_MAX_PERIOD = 1e4
PE_UNIT = 0.01          # points are encoded in centimeters


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------

def positional_encoding(x, dim: int = PE_DIM, max_period: float = PE_MAX_PERIOD) -> np.ndarray:
    """Sinusoidal encoding of every scalar in ``x``: (...,) -> (..., dim).

    Angular frequencies run geometrically from 1 down to 1/max_period.
    """
    x = np.asarray(x, dtype=float)
    half = dim // 2
    freqs = max_period ** (-np.arange(half) / max(half - 1, 1))
    ang = x[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def encode_conditioning(goal, contact, context=None, dim: int = PE_DIM,
                        unit: float = PE_UNIT) -> np.ndarray:
    """Conditioning vector: PE of the goal and contact points (meters / unit)
    followed by an optional opaque context vector."""
    g = positional_encoding(np.asarray(goal, dtype=float).reshape(3) / unit, dim).ravel()
    c = positional_encoding(np.asarray(contact, dtype=float).reshape(3) / unit, dim).ravel()
    parts = [g, c]
    if context is not None:
        parts.append(np.asarray(context, dtype=float).ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# analytic oracle
# ---------------------------------------------------------------------------

@dataclass
class GmmPrior:
    weights: np.ndarray      # (J,)
    means: np.ndarray        # (J, H, 3)
    variances: np.ndarray    # (J,) isotropic

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float).reshape(-1)
        if self.means.ndim == 2:
            self.means = self.means[None]
        J = self.weights.size
        if self.means.shape[0] != J or self.variances.size != J:
            raise DimensionMismatch("weights, means and variances disagree on component count")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("weights must lie on the simplex")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @classmethod
    def single(cls, mean, variance: float) -> "GmmPrior":
        return cls(np.ones(1), np.asarray(mean, dtype=float)[None], np.array([variance]))

    @property
    def horizon(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng) -> np.ndarray:
        j = rng.choice(self.weights.size, size=n, p=self.weights)
        z = rng.standard_normal((n,) + self.means.shape[1:])
        return self.means[j] + np.sqrt(self.variances[j])[:, None, None] * z


def _gmm_terms(prior: GmmPrior, tau_k, k: int, schedule: DiffusionSchedule):
    ab = schedule.alpha_bar_at(k)
    x = np.asarray(tau_k, dtype=float)
    flat = x.reshape(x.shape[:-2] + (-1,))
    D = flat.shape[-1]
    m = prior.means.reshape(prior.means.shape[0], -1)          # (J, D)
    var = ab * prior.variances + (1.0 - ab)                     # marginal variance per comp
    diff = flat[..., None, :] - np.sqrt(ab) * m                  # (..., J, D)
    logp = (np.log(np.maximum(prior.weights, 1e-300)) - 0.5 * D * np.log(2 * np.pi * var)
            - 0.5 * np.sum(diff * diff, axis=-1) / var)
    mx = np.max(logp, axis=-1, keepdims=True)
    if not np.all(np.isfinite(mx)):
        raise NumericalUnderflow("all mixture log-likelihoods are non-finite")
    w = np.exp(logp - mx)
    resp = w / np.sum(w, axis=-1, keepdims=True)
    a = np.sqrt(ab) * prior.variances / var                     # (J,)
    b = (1.0 - ab) / var
    post = a[:, None] * flat[..., None, :] + b[:, None] * m     # (..., J, D)
    return resp, post, a, diff, var, flat


def responsibilities(prior: GmmPrior, tau_k, k: int, schedule: DiffusionSchedule) -> np.ndarray:
    return _gmm_terms(prior, tau_k, k, schedule)[0]


def analytic_denoise(prior: GmmPrior, tau_k, k: int, schedule: DiffusionSchedule) -> np.ndarray:
    """Exact E[tau0 | tau_k] for the mixture prior under the forward marginal."""
    resp, post, *_ = _gmm_terms(prior, tau_k, k, schedule)
    x0 = np.sum(resp[..., None] * post, axis=-2)
    return x0.reshape(np.shape(tau_k))


def analytic_vjp(prior: GmmPrior, tau_k, k: int, schedule: DiffusionSchedule, cot) -> np.ndarray:
    """cot^T d E[tau0|tau_k] / d tau_k."""
    resp, post, a, diff, var, flat = _gmm_terms(prior, tau_k, k, schedule)
    c = np.asarray(cot, dtype=float).reshape(flat.shape)
    g = -diff / var[:, None]                                    # d log N_j / d tau
    gbar = np.sum(resp[..., None] * g, axis=-2, keepdims=True)
    cm = np.sum(c[..., None, :] * post, axis=-1)                # (..., J)
    out = np.sum(resp * a, axis=-1)[..., None] * c \
        + np.sum((resp * cm)[..., None] * (g - gbar), axis=-2)
    return out.reshape(np.shape(tau_k))


class AnalyticDenoiser:
    """Wraps a GmmPrior behind the denoiser interface (ignores features/conditioning)."""

    def __init__(self, prior: GmmPrior, schedule: DiffusionSchedule):
        self.prior = prior
        self.schedule = schedule

    @property
    def horizon(self) -> int:
        return self.prior.horizon

    def predict(self, tau_k, feat, k, cond=None):
        return analytic_denoise(self.prior, tau_k, k, self.schedule)

    def vjp(self, tau_k, feat, k, cond, cot):
        return analytic_vjp(self.prior, tau_k, k, self.schedule, cot), np.zeros(np.shape(feat))


# ---------------------------------------------------------------------------
# MLP denoiser
# ---------------------------------------------------------------------------

def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class DenoiserInput:
    tau_k: np.ndarray                 # (B, H, 3)
    feat: np.ndarray                  # (B, H, C)
    k: int | np.ndarray               # scalar or (B,)
    cond: np.ndarray                  # (D,) or (B, D)


@dataclass
class MlpDenoiser:
    """Fully connected x0 predictor, x0 = MLP(tau_k, f_k, PE(k), cond).

    With ``normalize`` the last layer predicts the clean trajectory in units of
    the training set's per-coordinate spread, x0 = mu + sd * MLP(...), so the
    network output is O(1) whatever the scene's coordinates are.
    """
    horizon: int
    cond_dim: int
    widths: list = field(default_factory=lambda: [256, 256])
    c_m: int = 1
    pe_dim: int = PE_DIM
    params: list = field(default_factory=list)   # [W0, b0, W1, b1, ...]
    normalize: bool = False
    data_mean: np.ndarray | None = None          # (3H,)
    data_std: np.ndarray | None = None           # (3H,)
    schedule: dict | None = None                 # make_schedule kwargs used in training
    cond_unit: float = PE_UNIT                   # length unit of the conditioning PE

    @property
    def in_dim(self) -> int:
        return 3 * self.horizon + self.c_m * self.horizon + self.pe_dim + self.cond_dim

    @property
    def out_dim(self) -> int:
        return 3 * self.horizon

    def layer_sizes(self):
        return [self.in_dim] + list(self.widths) + [self.out_dim]

    @classmethod
    def create(cls, horizon: int, cond_dim: int, widths=(256, 256), c_m: int = 1,
               pe_dim: int = PE_DIM, seed: int = 0, normalize: bool = False) -> "MlpDenoiser":
        d = cls(horizon, cond_dim, list(widths), c_m, pe_dim, normalize=normalize)
        rng = np.random.default_rng(seed)
        sizes = d.layer_sizes()
        for a, b in zip(sizes[:-1], sizes[1:]):
            d.params.append(rng.standard_normal((a, b)) / np.sqrt(a))
            d.params.append(np.zeros(b))
        return d

    def set_statistics(self, trajectories):
        T = np.asarray(trajectories, dtype=float).reshape(len(trajectories), -1)
        self.data_mean = T.mean(axis=0)
        self.data_std = np.maximum(T.std(axis=0), 1e-3)
        return self

    def _scale(self):
        """(offset, gain) applied to the raw network output; None when off."""
        if not self.normalize:
            return None
        if self.data_mean is None:
            raise DimensionMismatch("normalized network has no data statistics")
        return self.data_mean, self.data_std

    def _inputs(self, inp: DenoiserInput):
        tau = np.asarray(inp.tau_k, dtype=float)
        B = tau.shape[0]
        if tau.shape[1:] != (self.horizon, 3):
            raise DimensionMismatch(f"tau_k {tau.shape[1:]} vs horizon {self.horizon}")
        feat = np.asarray(inp.feat, dtype=float).reshape(B, -1)
        if feat.shape[1] != self.c_m * self.horizon:
            raise DimensionMismatch("feature channels do not match the network")
        pe = positional_encoding(np.broadcast_to(np.asarray(inp.k, dtype=float), (B,)), self.pe_dim)
        cond = np.broadcast_to(np.asarray(inp.cond, dtype=float), (B, self.cond_dim)) \
            if np.ndim(inp.cond) <= 1 else np.asarray(inp.cond, dtype=float)
        if cond.shape != (B, self.cond_dim):
            raise DimensionMismatch(f"conditioning {cond.shape} vs expected {(B, self.cond_dim)}")
        return np.concatenate([tau.reshape(B, -1), feat, pe, cond], axis=1)

    def flatten_input(self, inp: DenoiserInput) -> np.ndarray:
        return self._inputs(inp)

    def _forward(self, x):
        acts, pres = [x], []
        a = x
        n = len(self.params) // 2
        for li in range(n):
            z = a @ self.params[2 * li] + self.params[2 * li + 1]
            pres.append(z)
            a = silu(z) if li < n - 1 else z
            acts.append(a)
        return a, acts, pres

    def _backward(self, acts, pres, gout, want_params=True):
        """Backprop ``gout`` = dL/d(network output). Returns (param grads, dL/d(input))."""
        n = len(self.params) // 2
        grads = [None] * len(self.params)
        g = gout
        for li in reversed(range(n)):
            if li < n - 1:
                g = g * silu_grad(pres[li])
            if want_params:
                grads[2 * li] = acts[li].T @ g
                grads[2 * li + 1] = g.sum(axis=0)
            g = g @ self.params[2 * li].T
        return grads, g

    def forward(self, inp: DenoiserInput) -> np.ndarray:
        F, _, _ = self._forward(self._inputs(inp))
        sc = self._scale()
        out = F if sc is None else sc[0] + sc[1] * F
        return out.reshape(-1, self.horizon, 3)

    def predict(self, tau_k, feat, k, cond):
        tau_k = np.asarray(tau_k, dtype=float)
        return self.forward(DenoiserInput(tau_k, feat, k, cond))

    def vjp(self, tau_k, feat, k, cond, cot):
        """cot^T d x0 / d(tau_k, f_k)."""
        tau_k = np.asarray(tau_k, dtype=float)
        x = self._inputs(DenoiserInput(tau_k, feat, k, cond))
        _, acts, pres = self._forward(x)
        c = np.asarray(cot, dtype=float).reshape(x.shape[0], -1)
        sc = self._scale()
        _, gx = self._backward(acts, pres, c if sc is None else sc[1] * c, want_params=False)
        nt = 3 * self.horizon
        nf = self.c_m * self.horizon
        return gx[:, :nt].reshape(tau_k.shape), gx[:, nt:nt + nf].reshape(np.shape(feat))

    def loss_and_grads(self, inp: DenoiserInput, target, weighted: bool = False):
        """Mean over batch and coordinates of the squared x0 error, with exact gradients.

        ``weighted`` (normalized networks only) divides each coordinate's
        residual by its data spread, i.e. the same loss in network units.
        """
        F, acts, pres = self._forward(self._inputs(inp))
        sc = self._scale()
        out = F if sc is None else sc[0] + sc[1] * F
        r = out - np.asarray(target, dtype=float).reshape(out.shape)
        if sc is not None and weighted:
            r = r / sc[1]
            grads, _ = self._backward(acts, pres, 2.0 * r / r.size)
        else:
            g = 2.0 * r / r.size
            grads, _ = self._backward(acts, pres, g if sc is None else sc[1] * g)
        return float(np.mean(r * r)), grads

    def input_jacobian(self, inp: DenoiserInput) -> np.ndarray:
        """Dense d x0 / d tau_k for a single input, (3H, 3H). Test helper."""
        eye = np.eye(3 * self.horizon)
        rows = [self.vjp(inp.tau_k, inp.feat, inp.k, inp.cond, e.reshape(1, self.horizon, 3))[0]
                .ravel() for e in eye]
        return np.array(rows)

    # io ----------------------------------------------------------------------

    def header(self) -> dict:
        return {"format": "affordkit-mlp-1", "widths": list(self.widths), "pe_dim": self.pe_dim,
                "horizon": self.horizon, "c_m": self.c_m, "cond_dim": self.cond_dim,
                "activation": "silu", "layer_sizes": self.layer_sizes(),
                "normalize": self.normalize, "schedule": self.schedule,
                "cond_unit": self.cond_unit,
                "data_mean": None if self.data_mean is None else self.data_mean.tolist(),
                "data_std": None if self.data_std is None else self.data_std.tolist(),
                "param_order": "W0,b0,W1,b1,... row-major (in, out)"}

    def save(self, path):
        path = Path(path)
        body = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in self.params)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_bytes((json.dumps(self.header()) + "\n").encode() + body)
            os.replace(tmp, path)
        except OSError as e:
            raise IoError(f"cannot write {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "MlpDenoiser":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"model file not found: {path}")
        raw = path.read_bytes()
        nl = raw.index(b"\n")
        hdr = json.loads(raw[:nl].decode())
        d = cls(int(hdr["horizon"]), int(hdr["cond_dim"]), list(hdr["widths"]), int(hdr["c_m"]),
                int(hdr["pe_dim"]), normalize=bool(hdr.get("normalize", False)),
                schedule=hdr.get("schedule"), cond_unit=float(hdr.get("cond_unit", PE_UNIT)))
        if hdr.get("data_mean") is not None:
            d.data_mean = np.asarray(hdr["data_mean"], dtype=float)
            d.data_std = np.asarray(hdr["data_std"], dtype=float)
        body = np.frombuffer(raw[nl + 1:], dtype="<f4").astype(float)
        sizes = d.layer_sizes()
        off = 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            d.params.append(body[off:off + a * b].reshape(a, b))
            off += a * b
            d.params.append(body[off:off + b].copy())
            off += b
        if off != body.size:
            raise DimensionMismatch(f"model body has {body.size} floats, header implies {off}")
        return d


def mlp_forward(d: MlpDenoiser, inp: DenoiserInput) -> np.ndarray:
    return d.forward(inp)


def mlp_train(d: MlpDenoiser, dataset, schedule: DiffusionSchedule, epochs: int = 100,
              lr: float = 1e-3, seed: int = 0, batch_size: int = 64, momentum: float = 0.9,
              lr_schedule: str = "constant", weighted: bool | None = None):
    """SGD with momentum on the x0 loss.

    ``dataset`` is a list of ``(trajectory (H,3), conditioning (D,))`` pairs, or
    triples with a per-sample feature array (H, C) appended (defaults to +1,
    i.e. free space). One epoch = one shuffled pass in mini-batches. Returns the
    trained denoiser (updated in place) and the per-step loss curve.
    ``lr_schedule="cosine"`` anneals the step size to zero over the run.
    ``weighted`` (default: on for normalized networks) measures the loss in
    network units, see :meth:`MlpDenoiser.loss_and_grads`.
    """
    if weighted is None:
        weighted = d.normalize
    if len(dataset) == 0:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(seed)
    tau0 = np.stack([np.asarray(getattr(s[0], "waypoints", s[0]), dtype=float) for s in dataset])
    cond = np.stack([np.asarray(s[1], dtype=float) for s in dataset])
    feats = np.stack([np.asarray(s[2], dtype=float).reshape(d.horizon, d.c_m) if len(s) > 2
                      else np.ones((d.horizon, d.c_m)) for s in dataset])
    if tau0.shape[1] != d.horizon:
        raise DimensionMismatch(f"trajectories have H={tau0.shape[1]}, network expects {d.horizon}")
    if d.normalize and d.data_mean is None:
        d.set_statistics(tau0)
    if d.schedule is None:
        d.schedule = schedule.to_dict()
    vel = [np.zeros_like(p) for p in d.params]
    losses = []
    N = tau0.shape[0]
    n_steps = epochs * ((N + batch_size - 1) // batch_size)
    step = 0
    for ep in range(epochs):
        perm = rng.permutation(N)
        for s in range(0, N, batch_size):
            idx = perm[s:s + batch_size]
            k = rng.integers(1, schedule.K + 1, size=idx.size)
            tk, _ = forward_noise(tau0[idx], k, schedule, rng)
            loss, grads = d.loss_and_grads(DenoiserInput(tk, feats[idx], k, cond[idx]), tau0[idx],
                                           weighted)
            if not np.isfinite(loss):
                raise DivergedTraining(f"loss became {loss} at epoch {ep}")
            eta = lr if lr_schedule == "constant" else 0.5 * lr * (1 + np.cos(np.pi * step / n_steps))
            for p, v, g in zip(d.params, vel, grads):
                v *= momentum
                v -= eta * g
                p += v
            step += 1
            losses.append(loss)
    return d, np.array(losses)
