"""Repellency corrections applied to the expected final output ``x_hat``.

All pushes act on the denoised estimate: a point that is expected to land inside
a ball of radius ``r`` around a shield center is moved radially onto the ball's
boundary. Terms are exactly zero outside every ball, which is what makes the
correction sparse. ``to_score_space`` converts a denoised-space shift into the
equivalent additive score correction.

Also here: the soft DPS weight (Gaussian posterior approximation with identity
covariance, so ``||X - z||^2`` is non-central chi-square), the Gaussian-kernel
particle-guidance baseline, and the potential / Jacobian helpers used to check
that the radial push is a gradient field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .schedule import NoiseSchedule, alpha_sigma

MODES = ("static", "intra_batch", "mixed")
CORRECTION_SPACES = ("denoised", "score")


class ConvergenceError(ArithmeticError):
    """The chi-square mixture series did not reach its tail tolerance."""

    def __init__(self, tail_bound: float, terms: int):
        super().__init__(f"series truncated at {terms} terms with tail bound {tail_bound:.3e}")
        self.tail_bound = tail_bound
        self.terms = terms


@dataclass(frozen=True)
class Shield:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        if not self.radius > 0:
            raise ValueError(f"shield radius must be > 0, got {self.radius}")
        if not np.all(np.isfinite(center)):
            raise ValueError("shield center must be finite")
        object.__setattr__(self, "center", center)


@dataclass(frozen=True)
class ShieldSet:
    """Balls of a common radius around the rows of ``centers`` (shape ``(K, d)``)."""

    centers: np.ndarray
    radius: float

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        if centers.ndim == 1:
            centers = centers.reshape(0, 0) if centers.size == 0 else centers[None]
        if centers.ndim != 2:
            raise ValueError(f"centers must be a (K, d) array, got shape {centers.shape}")
        if not np.all(np.isfinite(centers)):
            raise ValueError("shield centers must be finite")
        if not self.radius >= 0:
            raise ValueError(f"radius must be non-negative, got {self.radius}")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @classmethod
    def empty(cls, dim: int, radius: float) -> "ShieldSet":
        return cls(np.zeros((0, dim)), radius)

    def __len__(self) -> int:
        return self.centers.shape[0]

    def __iter__(self) -> Iterator[Shield]:
        for c in self.centers:
            yield Shield(c, self.radius)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def extended(self, points) -> "ShieldSet":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if len(self) == 0:
            return ShieldSet(points.copy(), self.radius)
        return ShieldSet(np.vstack([self.centers, points]), self.radius)

    def is_disjoint(self) -> bool:
        """True when every pair of centers is more than ``2 r`` apart."""
        if len(self) < 2:
            return True
        diff = self.centers[:, None, :] - self.centers[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        np.fill_diagonal(dist, np.inf)
        return bool(dist.min() > 2.0 * self.radius)


@dataclass(frozen=True)
class SpellConfig:
    """Repellency settings.

    ``radius == 0`` disables repellency entirely, which lets a baseline run sit
    in the same sweep as SPELL runs.
    """

    radius: float
    overcompensation: float = 1.0
    mode: str = "static"
    correction_space: str = "denoised"
    degenerate_direction: Optional[tuple] = None

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if not self.overcompensation >= 0:
            raise ValueError(f"overcompensation must be >= 0, got {self.overcompensation}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.correction_space not in CORRECTION_SPACES:
            raise ValueError(
                f"correction_space must be one of {CORRECTION_SPACES}, got {self.correction_space!r}"
            )

    @property
    def enabled(self) -> bool:
        return self.radius > 0

    @property
    def uses_static(self) -> bool:
        return self.enabled and self.mode in ("static", "mixed")

    @property
    def uses_batch(self) -> bool:
        return self.enabled and self.mode in ("intra_batch", "mixed")

    def direction(self, dim: int) -> np.ndarray:
        if self.degenerate_direction is None:
            e = np.zeros(dim)
            e[0] = 1.0
            return e
        e = np.asarray(self.degenerate_direction, dtype=float)
        if e.shape != (dim,):
            raise ValueError(f"degenerate_direction must have shape ({dim},)")
        return e / np.linalg.norm(e)


@dataclass(frozen=True)
class DpsConfig:
    radius: float
    series_terms: int = 10_000
    tail_tol: float = 1e-10

    def __post_init__(self):
        if self.series_terms < 1:
            raise ValueError("series_terms must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")


def _unit_e1(dim: int) -> np.ndarray:
    e = np.zeros(dim)
    e[0] = 1.0
    return e


def _push_to_boundary(diff: np.ndarray, radius: float, direction: np.ndarray):
    """Vectorized ``relu(r / |diff| - 1) * diff`` over the last axis.

    Returns ``(terms, active, degenerate)``; a zero-length ``diff`` becomes
    ``r * direction``.
    """
    dist = np.sqrt((diff * diff).sum(-1))
    degenerate = dist == 0.0
    active = dist < radius
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(active & ~degenerate, radius / dist - 1.0, 0.0)
    terms = weight[..., None] * diff
    if degenerate.any():
        terms[degenerate] = radius * direction
    return terms, active, degenerate


def delta_single(x_hat, shield: Shield, direction=None) -> np.ndarray:
    """Smallest shift putting ``x_hat`` on or outside ``shield``'s boundary."""
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != shield.center.shape:
        raise ValueError("dimension mismatch between x_hat and shield center")
    direction = _unit_e1(x_hat.size) if direction is None else np.asarray(direction, float)
    terms, _, _ = _push_to_boundary(x_hat - shield.center, shield.radius, direction)
    return terms


class StaticDelta(NamedTuple):
    delta: np.ndarray
    active_ids: np.ndarray
    degenerate: bool

    @property
    def active_count(self) -> int:
        return int(self.active_ids.size)


def delta_static(x_hat, shields: ShieldSet, direction=None) -> StaticDelta:
    """Sum of per-shield pushes; the exact zero vector if no shield is hit."""
    x_hat = np.asarray(x_hat, dtype=float)
    if len(shields) == 0:
        return StaticDelta(np.zeros_like(x_hat), np.zeros(0, dtype=np.int64), False)
    if shields.dim != x_hat.size:
        raise ValueError("dimension mismatch between x_hat and shields")
    direction = _unit_e1(x_hat.size) if direction is None else np.asarray(direction, float)
    terms, active, degenerate = _push_to_boundary(
        x_hat[None, :] - shields.centers, shields.radius, direction
    )
    ids = np.flatnonzero(active)
    delta = terms[ids].sum(0) if ids.size else np.zeros_like(x_hat)
    return StaticDelta(delta, ids, bool(degenerate.any()))


def delta_static_batch(x_hats: np.ndarray, centers: np.ndarray, radius: float,
                       direction: np.ndarray, chunk: int = 2**22):
    """Row-wise ``delta_static`` for ``x_hats (B, d)`` against ``centers (K, d)``.

    Returns ``(delta (B, d), active (B, K) bool, degenerate (B,) bool)``.
    """
    b, d = x_hats.shape
    k = centers.shape[0]
    delta = np.zeros((b, d))
    active = np.zeros((b, k), dtype=bool)
    degenerate = np.zeros(b, dtype=bool)
    if k == 0 or radius <= 0:
        return delta, active, degenerate
    rows = max(1, chunk // max(1, k * d))
    for lo in range(0, b, rows):
        hi = min(b, lo + rows)
        diff = x_hats[lo:hi, None, :] - centers[None, :, :]
        terms, act, deg = _push_to_boundary(diff, radius, direction)
        hit = act.any(1)
        if hit.any():
            delta[lo:hi][hit] = terms[hit].sum(1)
        active[lo:hi] = act
        degenerate[lo:hi] = deg.any(1)
    return delta, active, degenerate


def delta_intra_batch(x_hats, radius: float, direction=None):
    """Pairwise pushes between batch members' expected outputs.

    Every member is corrected against the others' uncorrected ``x_hat``; the
    self term is excluded. Coincident pairs push the lower index along
    ``+direction`` and the higher along ``-direction``.

    Returns ``(delta (B, d), active (B, B) bool, degenerate (B,) bool)``.
    """
    x = np.atleast_2d(np.asarray(x_hats, dtype=float))
    b, d = x.shape
    if b < 2 or radius <= 0:
        return np.zeros((b, d)), np.zeros((b, b), dtype=bool), np.zeros(b, dtype=bool)
    direction = _unit_e1(d) if direction is None else np.asarray(direction, float)
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    eye = np.eye(b, dtype=bool)
    degenerate_pair = (dist == 0.0) & ~eye
    active = (dist < radius) & ~eye
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(active & ~degenerate_pair, radius / dist - 1.0, 0.0)
    terms = weight[..., None] * diff
    if degenerate_pair.any():
        i, k = np.nonzero(degenerate_pair)
        sign = np.where(i < k, 1.0, -1.0)
        terms[i, k] = radius * sign[:, None] * direction[None, :]
    delta = np.zeros((b, d))
    hit = active.any(1)
    if hit.any():
        delta[hit] = terms[hit].sum(1)
    return delta, active, degenerate_pair.any(1)


def combine(delta_static_term, delta_batch_term, config: SpellConfig) -> np.ndarray:
    """``lambda * (static + batch)`` with the branch the mode disables zeroed."""
    s = np.asarray(delta_static_term, dtype=float)
    b = np.asarray(delta_batch_term, dtype=float)
    total = np.zeros(np.broadcast(s, b).shape)
    if config.uses_static:
        total = total + s
    if config.uses_batch:
        total = total + b
    return config.overcompensation * total


def to_score_space(delta, schedule: NoiseSchedule, t: float) -> np.ndarray:
    """Score correction ``alpha_t / sigma_t^2 * delta`` (Tweedie-equivalent shift)."""
    alpha, sigma = alpha_sigma(schedule, max(t, schedule.t_min))
    return (alpha / (sigma * sigma)) * np.asarray(delta, dtype=float)


# --- soft DPS weighting ------------------------------------------------------


def _poisson_terms(mean: float, cfg: DpsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Indices ``j`` and log Poisson weights ``log c_j`` up to the tail tolerance."""
    if mean == 0.0:
        return np.zeros(1), np.zeros(1)
    j = np.arange(cfg.series_terms, dtype=float)
    # P(Poisson(mean) > J) = P(J + 1, mean), the regularized lower gamma
    tail = gammainc(j + 1.0, mean)
    ok = np.flatnonzero((tail < cfg.tail_tol) & (j >= mean))
    if ok.size == 0:
        raise ConvergenceError(float(tail[-1]), cfg.series_terms)
    n = int(ok[0]) + 1
    j = j[:n]
    return j, j * math.log(mean) - mean - gammaln(j + 1.0)


def noncentral_chi2_cdf(x: float, dim: int, lambda_nc: float, cfg: DpsConfig) -> float:
    """``F(x)`` for ``chi2_nc(dim, lambda_nc)`` as a Poisson mixture of central CDFs."""
    j, log_c = _poisson_terms(0.5 * lambda_nc, cfg)
    return float(np.sum(np.exp(log_c) * gammainc(0.5 * dim + j, 0.5 * x)))


def dps_terms(lambda_nc: float, radius: float, dim: int, cfg: DpsConfig) -> tuple[float, float, float]:
    """Return ``(F, 1 - F, dF/dlambda)`` at ``x = r^2``.

    ``F_{k+2}(x) - F_k(x) = -(x/2)^{k/2} e^{-x/2} / Gamma(k/2 + 1)`` is used for
    the bracketed differences, which keeps the far-shield regime free of
    cancellation; ``1 - F`` is summed from upper incomplete gammas for the
    near-center regime.
    """
    if lambda_nc < 0 or radius <= 0 or dim < 1:
        raise ValueError("need lambda_nc >= 0, radius > 0, dim >= 1")
    j, log_c = _poisson_terms(0.5 * lambda_nc, cfg)
    c = np.exp(log_c)
    y = 0.5 * radius * radius
    a = 0.5 * dim + j
    cdf = float(np.sum(c * gammainc(a, y)))
    sf = float(np.sum(c * gammaincc(a, y)))
    log_gap = a * math.log(y) - y - gammaln(a + 1.0)
    dcdf = float(-0.5 * np.sum(np.exp(log_c + log_gap)))
    return cdf, sf, dcdf


def dps_weight(lambda_nc: float, radius: float, dim: int, cfg: Optional[DpsConfig] = None) -> float:
    """Soft repellency weight ``omega = 2 / (F - 1) * dF/dlambda`` at ``r^2``.

    ``lambda_nc`` is the squared distance between the Gaussian mean and the
    shield center; ``omega`` multiplies ``(x_hat - z)`` to give
    ``grad log P(|X - z| > r)``.
    """
    cfg = cfg or DpsConfig(radius=radius)
    _, sf, dcdf = dps_terms(lambda_nc, radius, dim, cfg)
    return -2.0 * dcdf / sf


def dps_correction(x_hat, shields: ShieldSet, cfg: Optional[DpsConfig] = None) -> np.ndarray:
    x_hat = np.asarray(x_hat, dtype=float)
    out = np.zeros_like(x_hat)
    if len(shields) == 0:
        return out
    cfg = cfg or DpsConfig(radius=shields.radius)
    for z in shields.centers:
        diff = x_hat - z
        sq = float(diff @ diff)
        if sq == 0.0:
            continue
        out += dps_weight(sq, cfg.radius, x_hat.size, cfg) * diff
    return out


# --- particle guidance baseline ----------------------------------------------


def pg_correction(x_ts, bandwidth: float) -> np.ndarray:
    """Gradient of ``-sum_{i,j} exp(-|x_i - x_j|^2 / 2h^2)`` w.r.t. each ``x_i``.

    Evaluated on the current noisy states, not on denoised estimates.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    x = np.atleast_2d(np.asarray(x_ts, dtype=float))
    diff = x[:, None, :] - x[None, :, :]
    h2 = bandwidth * bandwidth
    k = np.exp(-(diff * diff).sum(-1) / (2.0 * h2))
    # both (i, j) and (j, i) terms of the double sum contribute
    return 2.0 * (k[..., None] * diff).sum(1) / h2


# --- potential view ----------------------------------------------------------


def repel_field(x, radius: float) -> np.ndarray:
    """``h(x) = relu(r / |x| - 1) x``."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x)
    if n == 0:
        return np.zeros_like(x)
    return max(radius / n - 1.0, 0.0) * x


def repel_potential(x, radius: float) -> float:
    """Potential ``H`` with ``grad H = h``: ``r|x| - |x|^2 / 2`` inside, ``r^2 / 2`` outside."""
    n = float(np.linalg.norm(x))
    if n < radius:
        return radius * n - 0.5 * n * n
    return 0.5 * radius * radius


def normalized_gradient_jacobian(grad, hess) -> np.ndarray:
    """Jacobian of ``x -> grad f / |grad f|`` given ``g = grad f`` and ``H = hess f``."""
    g = np.asarray(grad, dtype=float)
    h = np.asarray(hess, dtype=float)
    n = np.linalg.norm(g)
    return h / n - np.outer(g, g) @ h / n**3
