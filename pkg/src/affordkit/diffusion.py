"""DDPM schedule, forward corruption, x0-parameterized reverse steps,
reconstruction guidance and batched guided sampling.

Step indices are 1-based (k = 1..K) everywhere in the public API; the schedule
arrays are stored 0-based (entry k-1 belongs to step k), with alpha_bar_0 = 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import CostReport, GuidanceConfig, cost_total_batch, evaluate_terms
from .errors import BadScheduleParams, BadStepIndex, EmptyBatch, HorizonMismatch

log = logging.getLogger(__name__)

DEFAULT_K = 1000
DEFAULT_BETA = (1e-4, 0.02)
DEFAULT_H = 16


@dataclass(frozen=True)
class DiffusionSchedule:
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray
    kind: str = "linear"

    def _check(self, k):
        ka = np.asarray(k)
        if not np.issubdtype(ka.dtype, np.integer) and not np.all(ka == np.round(ka)):
            raise BadStepIndex(f"step index must be an integer, got {k}")
        if np.any(ka < 1) or np.any(ka > self.K):
            raise BadStepIndex(f"step index {k} outside 1..{self.K}")
        return ka.astype(int) - 1

    def alpha_bar_at(self, k):
        return self.alpha_bar[self._check(k)]

    def alpha_bar_prev(self, k):
        i = self._check(k)
        return np.where(i > 0, self.alpha_bar[np.maximum(i - 1, 0)], 1.0)

    def posterior_coefficients(self, k):
        """(coefficient of x0, coefficient of tau_k, variance) of q(tau_{k-1} | tau_k, x0)."""
        i = self._check(k)
        ab = self.alpha_bar[i]
        abp = self.alpha_bar_prev(k)
        # at k = 1 the ratio beta_1 / (1 - alpha_bar_1) is 1 analytically but not in floats
        c0 = np.where(i > 0, np.sqrt(abp) * self.beta[i] / (1.0 - ab), 1.0)
        ck = np.sqrt(self.alpha[i]) * (1.0 - abp) / (1.0 - ab)
        return c0, ck, self.sigma2[i]

    def to_dict(self) -> dict:
        return {"K": self.K, "kind": self.kind, "beta_start": float(self.beta[0]),
                "beta_end": float(self.beta[-1])}


def make_schedule(K: int = DEFAULT_K, beta_start: float = DEFAULT_BETA[0],
                  beta_end: float = DEFAULT_BETA[1], kind: str = "linear") -> DiffusionSchedule:
    """Linear betas, or the cosine alpha_bar curve with betas clipped to
    [beta_start, beta_end]."""
    if not (isinstance(K, (int, np.integer)) and K >= 1):
        raise BadScheduleParams(f"K must be a positive integer, got {K}")
    if not (0 < beta_start <= beta_end < 1):
        raise BadScheduleParams(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, K) if K > 1 else np.array([beta_start])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(K + 1) / K
        f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
        ab = f / f[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], beta_start, beta_end)
    else:
        raise BadScheduleParams(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abp = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = beta * (1.0 - abp) / (1.0 - alpha_bar)
    sigma2[0] = 0.0       # 1 - alpha_bar_0 = 0 exactly
    return DiffusionSchedule(int(K), beta, alpha, alpha_bar, sigma2, kind)


def forward_noise(tau0, k, schedule: DiffusionSchedule, rng, eps=None):
    """Closed-form sample of q(tau_k | tau_0). ``k`` may be a scalar or one index
    per leading batch element. Returns (tau_k, eps)."""
    tau0 = np.asarray(tau0, dtype=float)
    ab = np.asarray(schedule.alpha_bar_at(k), dtype=float)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (tau0.ndim - ab.ndim))
    if eps is None:
        eps = rng.standard_normal(tau0.shape)
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps, eps


def forward_step(tau_prev, k, schedule: DiffusionSchedule, rng):
    """One Markov step q(tau_k | tau_{k-1})."""
    i = schedule._check(k)
    tau_prev = np.asarray(tau_prev, dtype=float)
    return np.sqrt(schedule.alpha[i]) * tau_prev \
        + np.sqrt(schedule.beta[i]) * rng.standard_normal(tau_prev.shape)


def posterior_step(tau_k, x0_pred, k: int, schedule: DiffusionSchedule, rng=None, noise=None):
    """tau_{k-1} = mu(tau_k, x0_pred) + sqrt(Sigma_k) z, with z = 0 at k = 1."""
    c0, ck, var = schedule.posterior_coefficients(k)
    mu = c0 * np.asarray(x0_pred, dtype=float) + ck * np.asarray(tau_k, dtype=float)
    if k == 1:
        return mu
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    return mu + np.sqrt(var) * noise


def guide(x0_pred, grad, k: int, schedule: DiffusionSchedule, mode: str = "direct-on-x0"):
    """tau0 = x0_pred - Sigma_k * grad, start waypoint untouched.

    ``grad`` is the cost gradient w.r.t. x0 (direct-on-x0) or already chained
    through the denoiser to tau_k (through-denoiser); the update is the same.
    """
    if mode not in ("direct-on-x0", "through-denoiser"):
        raise ValueError(f"unknown guidance mode {mode!r}")
    var = schedule.sigma2[schedule._check(k)]
    out = np.array(x0_pred, dtype=float, copy=True)
    out[..., 1:, :] = out[..., 1:, :] - var * np.asarray(grad)[..., 1:, :]
    return out


@dataclass
class SampleBatch:
    trajectories: np.ndarray             # (N, H, 3)
    costs: list                          # CostReport per chain
    seeds: list                          # per-chain integer seeds
    terms: dict = field(default_factory=dict)   # raw unweighted terms for reporting

    def __len__(self):
        return len(self.costs)

    def totals(self) -> np.ndarray:
        return np.array([c.total for c in self.costs])

    def to_dict(self) -> dict:
        d = {"trajectories": self.trajectories.tolist(),
             "costs": [c.to_dict() for c in self.costs],
             "seeds": [int(s) for s in self.seeds]}
        if self.terms:
            d["terms"] = {k: [None if not np.isfinite(x) else float(x) for x in v]
                          for k, v in self.terms.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleBatch":
        tr = np.asarray(d["trajectories"], dtype=float)
        costs = [CostReport(float(c["total"]), float(c["goal"]), float(c["collide"]),
                            float(c["normal"]), np.zeros(tr.shape[1:])) for c in d["costs"]]
        terms = {k: np.array([np.nan if x is None else x for x in v], dtype=float)
                 for k, v in d.get("terms", {}).items()}
        return cls(tr, costs, list(d.get("seeds", [])), terms)


def chain_seeds(seed: int, n: int) -> list:
    """Independent per-chain seeds derived from one master seed."""
    return [int(np.random.SeedSequence([int(seed), b]).generate_state(1, dtype=np.uint64)[0])
            for b in range(n)]


def _features(volume, tau):
    if volume is None:
        return np.ones(tau.shape[:-1] + (1,))
    return volume.query(tau)[..., None]


def guided_sample(denoiser, conditioning, cfg: GuidanceConfig | None,
                  schedule: DiffusionSchedule, n_samples: int, seed: int,
                  g_steps: int = 1, mode: str = "direct-on-x0", volume=None,
                  chunk: int = 128) -> SampleBatch:
    """Reverse diffusion with reconstruction guidance.

    Each chain draws all of its noise from its own generator, so a chain's
    result depends only on (seed, chain index) and not on batching. Waypoint
    features come from ``volume`` (defaults to ``cfg.volume``; +1 when absent).
    With ``cfg`` None the guidance step is skipped; zero weights still run it
    (with an exactly zero gradient).
    """
    H = denoiser.horizon
    vol = volume if volume is not None else (cfg.volume if cfg is not None else None)
    guided = cfg is not None
    if cfg is not None:
        cfg.validate()
    seeds = chain_seeds(seed, n_samples)
    K = schedule.K
    out = np.zeros((n_samples, H, 3))
    for s in range(0, n_samples, chunk):
        idx = range(s, min(s + chunk, n_samples))
        noise = np.stack([np.random.default_rng(seeds[b]).standard_normal((K + 1, H, 3))
                          for b in idx])
        tau = noise[:, 0]
        for k in range(K, 0, -1):
            feat = _features(vol, tau)
            x0 = denoiser.predict(tau, feat, k, conditioning)
            if x0.shape[-2] != H:
                raise HorizonMismatch(f"denoiser returned H={x0.shape[-2]}, expected {H}")
            if guided:
                for _ in range(g_steps):
                    grad = cost_total_batch(x0, cfg)["gradient"]
                    if mode == "through-denoiser" and hasattr(denoiser, "vjp"):
                        g_tau, g_feat = denoiser.vjp(tau, feat, k, conditioning, grad)
                        if vol is not None:
                            g_tau = g_tau + g_feat[..., :1] * vol.query_gradient(tau)
                        grad = g_tau
                    x0 = guide(x0, grad, k, schedule, mode)
            tau = posterior_step(tau, x0, k, schedule, noise=noise[:, K - k + 1])
        out[s:s + len(idx)] = tau
    return _report(out, cfg, seeds)


def _report(trajs, cfg, seeds) -> SampleBatch:
    n, H = trajs.shape[:2]
    if cfg is None:
        costs = [CostReport(0.0, 0.0, 0.0, 0.0, np.zeros((H, 3))) for _ in range(n)]
        return SampleBatch(trajs, costs, seeds)
    rep = cost_total_batch(trajs, cfg)
    costs = [CostReport(float(rep["total"][i]), float(rep["goal"][i]), float(rep["collide"][i]),
                        float(rep["normal"][i]), rep["gradient"][i]) for i in range(n)]
    return SampleBatch(trajs, costs, seeds, evaluate_terms(trajs, cfg))


def sample_unguided(denoiser, conditioning, schedule, n_samples, seed, volume=None, chunk=128):
    return guided_sample(denoiser, conditioning, None, schedule, n_samples, seed,
                         volume=volume, chunk=chunk)


def rank_by_cost(batch) -> np.ndarray:
    """Indices ascending by total cost, stable on ties."""
    totals = batch.totals() if hasattr(batch, "totals") else np.asarray(batch, dtype=float)
    if len(totals) == 0:
        raise EmptyBatch("cannot rank an empty batch")
    return np.argsort(totals, kind="stable")
