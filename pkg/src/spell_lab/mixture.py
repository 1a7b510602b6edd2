"""Gaussian-mixture data distributions with closed-form noisy scores.

The mixture stands in for a pretrained denoiser: under the VP forward process a
component ``N(mu, Sigma)`` becomes ``N(alpha_t mu, alpha_t^2 Sigma + sigma_t^2 I)``,
so the score of ``p_t`` and the Tweedie denoiser are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .schedule import NoiseSchedule, alpha_sigma

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted Gaussian components, optionally labeled by class id.

    Arrays are ``weights (K,)``, ``means (K, d)``, ``covs (K, d, d)``; ``labels``
    is a tuple of length ``K`` whose entries may be ``None``.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    labels: tuple = field(default=())

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covs, dtype=float)
        k, d = mu.shape
        if cov.shape != (k, d, d):
            raise ValueError(f"covs must have shape {(k, d, d)}, got {cov.shape}")
        if w.shape != (k,):
            raise ValueError(f"expected {k} weights, got {w.shape[0]}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, sum={w.sum()!r}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        labels = tuple(self.labels) if len(self.labels) else (None,) * k
        if len(labels) != k:
            raise ValueError(f"expected {k} labels, got {len(labels)}")
        for name, value in (("weights", w), ("means", mu), ("covs", cov)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_noisy_cache", {})
        object.__setattr__(self, "_conditional_cache", {})

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @classmethod
    def isotropic(cls, weights, means, std, labels=()) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, d = means.shape
        std = np.broadcast_to(np.asarray(std, dtype=float), (k,))
        covs = np.stack([s * s * np.eye(d) for s in std])
        return cls(np.asarray(weights, dtype=float), means, covs, tuple(labels))

    def conditional(self, label) -> "GaussianMixture":
        """Renormalized sub-mixture of the components carrying ``label`` (memoized)."""
        if label in self._conditional_cache:
            return self._conditional_cache[label]
        idx = [i for i, lab in enumerate(self.labels) if lab == label and lab is not None]
        if not idx:
            raise KeyError(f"no mixture component carries label {label!r}")
        w = self.weights[idx]
        sub = GaussianMixture(w / w.sum(), self.means[idx], self.covs[idx],
                              tuple(self.labels[i] for i in idx))
        self._conditional_cache[label] = sub
        return sub

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` points; returns ``(points, component_ids)``."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        eps = rng.standard_normal((n, self.dim))
        pts = self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)
        return pts, comp

    def to_spec(self) -> dict:
        comps = []
        for i in range(self.n_components):
            entry = {"weight": float(self.weights[i]), "mean": self.means[i].tolist()}
            cov = self.covs[i]
            if np.array_equal(cov, np.diag(np.diag(cov))):
                entry["cov_diag"] = np.diag(cov).tolist()
            else:
                entry["cov"] = cov.reshape(-1).tolist()
            if self.labels[i] is not None:
                entry["label"] = self.labels[i]
            comps.append(entry)
        return {"dim": self.dim, "components": comps}

    @classmethod
    def from_spec(cls, spec: dict) -> "GaussianMixture":
        """Build from ``{"dim": d, "components": [{weight, mean, cov_diag | cov, label?}]}``.

        ``cov`` is a full row-major ``d*d`` list; ``std`` is accepted as an
        isotropic shorthand.
        """
        d = int(spec["dim"])
        weights, means, covs, labels = [], [], [], []
        for i, comp in enumerate(spec["components"]):
            mean = np.asarray(comp["mean"], dtype=float)
            if mean.shape != (d,):
                raise ValueError(f"component {i}: mean has shape {mean.shape}, expected ({d},)")
            if "cov" in comp:
                cov = np.asarray(comp["cov"], dtype=float).reshape(d, d)
            elif "cov_diag" in comp:
                cov = np.diag(np.asarray(comp["cov_diag"], dtype=float).reshape(d))
            elif "std" in comp:
                cov = float(comp["std"]) ** 2 * np.eye(d)
            else:
                raise ValueError(f"component {i}: one of cov, cov_diag, std is required")
            weights.append(float(comp["weight"]))
            means.append(mean)
            covs.append(cov)
            labels.append(comp.get("label"))
        return cls(np.array(weights), np.array(means), np.array(covs), tuple(labels))


@dataclass
class ScoreEvaluation:
    score: np.ndarray
    denoised: np.ndarray
    log_density: np.ndarray


def marginal_at(mix: GaussianMixture, schedule: NoiseSchedule, t: float) -> GaussianMixture:
    """Law of ``X_t`` when ``X_0`` follows ``mix``."""
    alpha, sigma = alpha_sigma(schedule, t)
    if t == 0:
        return mix
    covs = alpha * alpha * mix.covs + sigma * sigma * np.eye(mix.dim)[None]
    return GaussianMixture(mix.weights, alpha * mix.means, covs, mix.labels)


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"expected points of dimension {dim}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("score evaluated at a non-finite point")
    return x, single


def _components_at(mix: GaussianMixture, alpha: float, sigma: float):
    cache = mix._noisy_cache
    key = (alpha, sigma)
    if key in cache:
        return cache[key]
    covs = alpha * alpha * mix.covs + sigma * sigma * np.eye(mix.dim)[None]
    chol = np.linalg.cholesky(covs)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1)
    prec = np.linalg.inv(covs)
    prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
    with np.errstate(divide="ignore"):
        const = np.log(mix.weights) - 0.5 * (logdet + mix.dim * _LOG_2PI)
    if len(cache) > 4096:
        cache.clear()
    cache[key] = out = (alpha * mix.means, prec, const)
    return out


def _score_batch(mix: GaussianMixture, alpha: float, sigma: float, x: np.ndarray):
    means, prec, const = _components_at(mix, alpha, sigma)
    diff = means[None, :, :] - x[:, None, :]
    # broadcast-and-sum rather than matmul: each row's result is independent of batch size
    pdiff = (prec[None, :, :, :] * diff[:, :, None, :]).sum(-1)
    logp = const[None] - 0.5 * (diff * pdiff).sum(-1)
    top = logp.max(axis=1, keepdims=True)
    w = np.exp(logp - top)
    total = w.sum(axis=1)
    resp = w / total[:, None]
    score = (resp[:, :, None] * pdiff).sum(1)
    return score, top[:, 0] + np.log(total)


def score(mix: GaussianMixture, schedule: NoiseSchedule, t: float, x, label=None) -> ScoreEvaluation:
    """Exact score of ``p_t`` (or ``p_t(. | label)``) with its Tweedie denoiser.

    ``x`` may be a single point ``(d,)`` or a batch ``(B, d)``; outputs match.
    """
    x, single = _as_batch(x, mix.dim)
    if label is not None:
        mix = mix.conditional(label)
    alpha, sigma = alpha_sigma(schedule, t)
    s, logp = _score_batch(mix, alpha, sigma, x)
    denoised = (x + sigma * sigma * s) / alpha
    if single:
        return ScoreEvaluation(s[0], denoised[0], logp[0])
    return ScoreEvaluation(s, denoised, logp)


def cfg_score(mix: GaussianMixture, schedule: NoiseSchedule, t: float, x, label,
              gamma: float) -> ScoreEvaluation:
    """Classifier-free-guided score ``gamma * s(x|label) - (gamma - 1) * s(x)``.

    The denoised value is Tweedie applied to the combined score; ``log_density``
    is the conditional one (the guided field has no normalized density).
    """
    if gamma < 1:
        raise ValueError(f"guidance weight must be >= 1, got {gamma}")
    cond = score(mix, schedule, t, x, label=label)
    if gamma == 1:
        return cond
    uncond = score(mix, schedule, t, x)
    s = gamma * cond.score - (gamma - 1.0) * uncond.score
    alpha, sigma = alpha_sigma(schedule, t)
    xb = np.asarray(x, dtype=float)
    return ScoreEvaluation(s, (xb + sigma * sigma * s) / alpha, cond.log_density)


def log_density(mix: GaussianMixture, schedule: NoiseSchedule, t: float, x, label=None) -> np.ndarray:
    return score(mix, schedule, t, x, label=label).log_density


def guided_score(mix: GaussianMixture, schedule: NoiseSchedule, t: float, x,
                 label: Optional[object] = None, gamma: float = 1.0) -> ScoreEvaluation:
    """Dispatch used by the sampler: unconditional, conditional, or CFG."""
    if label is None:
        return score(mix, schedule, t, x)
    return cfg_score(mix, schedule, t, x, label, gamma)


def ring_means(n_modes: int, radius: float, phase: float = 0.0) -> np.ndarray:
    angles = phase + 2.0 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

