"""Diversity and fidelity metrics on raw coordinates.

Precision / recall / density / coverage use k-nearest-neighbor balls (self
excluded when computing a set's own radii). The Frechet distance compares the
Gaussian moments of two sets and is reported as ``frechet_raw`` because no
feature extractor is involved.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from .mixture import GaussianMixture


@dataclass
class SampleSet:
    points: np.ndarray
    tag: str = "generated"

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("sample set contains non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


PointsLike = Union[SampleSet, np.ndarray]


def _pts(x: PointsLike) -> np.ndarray:
    return x.points if isinstance(x, SampleSet) else SampleSet(x).points


def vendi_score(points: PointsLike, kernel_bandwidth: Optional[float] = None,
                center: bool = False) -> float:
    """Exponential of the entropy of the eigenvalues of ``K / n``.

    ``kernel_bandwidth=None`` selects the cosine kernel; otherwise a Gaussian
    kernel ``exp(-|x - y|^2 / (2 h^2))`` is used. ``center`` mean-shifts the
    points before the cosine kernel.
    """
    x = _pts(points)
    n = x.shape[0]
    if n < 1:
        raise ValueError("vendi score needs at least one point")
    if kernel_bandwidth is None:
        if center:
            x = x - x.mean(0)
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero-norm point under the cosine kernel")
        feats = x / norms[:, None]
        # K = F F^T, so the nonzero eigenvalues of K / n are squared singular values of F / sqrt(n)
        eig = np.linalg.svd(feats / math.sqrt(n), compute_uv=False) ** 2
    else:
        k = np.exp(-cdist(x, x, "sqeuclidean") / (2.0 * kernel_bandwidth ** 2))
        eig = np.linalg.eigvalsh(k / n)
    eig = eig[eig > 0]
    return float(math.exp(-np.sum(eig * np.log(eig))))


def knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    d = cdist(x, x)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _check_sizes(gen: np.ndarray, ref: np.ndarray, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if gen.shape[0] < k + 1 or ref.shape[0] < k + 1:
        raise ValueError(f"both sets need at least k + 1 = {k + 1} points")
    if gen.shape[1] != ref.shape[1]:
        raise ValueError("sample sets have different dimensions")


def precision_recall(gen: PointsLike, ref: PointsLike, k: int = 3) -> tuple[float, float]:
    g, r = _pts(gen), _pts(ref)
    _check_sizes(g, r, k)
    d = cdist(g, r)
    precision = float((d <= knn_radii(r, k)[None, :]).any(1).mean())
    recall = float((d <= knn_radii(g, k)[:, None]).any(0).mean())
    return precision, recall


def density_coverage(gen: PointsLike, ref: PointsLike, k: int = 3) -> tuple[float, float]:
    g, r = _pts(gen), _pts(ref)
    _check_sizes(g, r, k)
    d = cdist(g, r)
    inside = d <= knn_radii(r, k)[None, :]
    density = float(inside.sum() / (k * g.shape[0]))
    coverage = float(inside.any(0).mean())
    return density, coverage


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    if w.min() < -1e-8:
        raise ValueError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = 1e-10) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`` for Gaussian moments."""
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    cov1, cov2 = np.atleast_2d(cov1).astype(float), np.atleast_2d(cov2).astype(float)
    d = mu1.size
    if min(np.linalg.eigvalsh(0.5 * (cov1 + cov1.T)).min(),
           np.linalg.eigvalsh(0.5 * (cov2 + cov2.T)).min()) < eps:
        cov1 = cov1 + eps * np.eye(d)
        cov2 = cov2 + eps * np.eye(d)
    root1 = _psd_sqrt(cov1)
    # (S1 S2)^{1/2} has the same trace as (S1^{1/2} S2 S1^{1/2})^{1/2}, which is symmetric
    cross = _psd_sqrt(root1 @ cov2 @ root1)
    diff = mu1 - mu2
    return float(max(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross), 0.0))


def mixture_moments(mix: GaussianMixture) -> tuple[np.ndarray, np.ndarray]:
    w = mix.weights
    mean = w @ mix.means
    second = np.einsum("k,kij->ij", w, mix.covs) + np.einsum("k,ki,kj->ij", w, mix.means, mix.means)
    return mean, second - np.outer(mean, mean)


def _moments(x: Union[PointsLike, GaussianMixture]):
    if isinstance(x, GaussianMixture):
        return mixture_moments(x)
    pts = _pts(x)
    if pts.shape[0] < pts.shape[1] + 1:
        raise ValueError("need at least d + 1 points for a covariance estimate")
    return pts.mean(0), np.atleast_2d(np.cov(pts, rowvar=False))


def gaussian_frechet(gen, ref) -> float:
    """Frechet distance between moment-matched Gaussians.

    Either argument may be a point set or a ``GaussianMixture`` (exact moments).
    """
    mu1, c1 = _moments(gen)
    mu2, c2 = _moments(ref)
    return frechet_distance(mu1, c1, mu2, c2)


@dataclass
class MetricsReport:
    vendi: float
    precision: float
    recall: float
    density: float
    coverage: float
    frechet_raw: float
    k_neighbors: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(gen: PointsLike, ref: PointsLike, k: int = 3, vendi_bandwidth: Optional[float] = None,
             frechet_target=None) -> MetricsReport:
    """All metrics of ``gen`` against ``ref``; Frechet against ``frechet_target`` if given."""
    p, r = precision_recall(gen, ref, k)
    dens, cov = density_coverage(gen, ref, k)
    return MetricsReport(
        vendi=vendi_score(gen, vendi_bandwidth),
        precision=p,
        recall=r,
        density=dens,
        coverage=cov,
        frechet_raw=gaussian_frechet(gen, ref if frechet_target is None else frechet_target),
        k_neighbors=k,
    )


def average_reports(reports) -> MetricsReport:
    """Per-group averaging (e.g. one report per class label)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    ks = {r.k_neighbors for r in reports}
    if len(ks) != 1:
        raise ValueError("reports use different k")
    fields = ("vendi", "precision", "recall", "density", "coverage", "frechet_raw")
    avg = {f: float(np.mean([getattr(r, f) for r in reports])) for f in fields}
    return MetricsReport(k_neighbors=ks.pop(), **avg)
