"""Full-covariance Gaussian mixture models and Baum-Welch statistics.

The UBM is trained with EM from a k-means++ start. Per-utterance zero and
first order statistics are accumulated against a trained model; the stats
scaling used by the i-vector extractor is a separate, recorded step so the
factor stays auditable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, NumericalError
from .features import FeatureMatrix

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    """Weights, means and full covariances, with cached Cholesky factors."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    em_history: list[float] = field(default_factory=list, repr=False, compare=False)
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)
    _log_norm: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        m, d = self.means.shape
        if self.weights.shape != (m,) or self.covariances.shape != (m, d, d):
            raise DataError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DataError(f"GMM weights sum to {self.weights.sum()!r}, not 1")
        self.refresh_cache()

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def refresh_cache(self) -> None:
        """Recompute Cholesky factors and log-normalizers from the parameters."""
        m, d = self.means.shape
        chol = np.empty_like(self.covariances)
        log_norm = np.empty(m)
        for c in range(m):
            try:
                chol[c] = np.linalg.cholesky(self.covariances[c])
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"component {c} covariance is not SPD") from exc
            log_norm[c] = -0.5 * (d * LOG_2PI) - np.log(np.diag(chol[c])).sum()
        self._chol = chol
        self._log_norm = log_norm

    def component_log_likelihoods(self, x: np.ndarray) -> np.ndarray:
        """Per-frame, per-component Gaussian log-densities, shape (T, M)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DataError(f"frame dim {x.shape[1]} does not match model dim {self.dim}")
        out = np.empty((x.shape[0], self.num_components))
        for c in range(self.num_components):
            diff = (x - self.means[c]).T
            solved = scipy.linalg.solve_triangular(self._chol[c], diff, lower=True)
            out[:, c] = self._log_norm[c] - 0.5 * np.einsum("ij,ij->j", solved, solved)
        return out

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """Per-frame mixture log-density."""
        joint = self.component_log_likelihoods(x) + np.log(self.weights)[None, :]
        return _logsumexp(joint)

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        """Per-frame component responsibilities; rows sum to 1."""
        joint = self.component_log_likelihoods(x) + np.log(self.weights)[None, :]
        joint -= joint.max(axis=1, keepdims=True)
        post = np.exp(joint)
        return post / post.sum(axis=1, keepdims=True)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    amax = a.max(axis=1, keepdims=True)
    return (amax + np.log(np.exp(a - amax).sum(axis=1, keepdims=True))).ravel()


@dataclass
class SuffStats:
    """Zero/first order Baum-Welch statistics for one utterance."""

    zero_order: np.ndarray
    first_order: np.ndarray
    utterance_id: str = ""
    scale_applied: float = 1.0

    def __post_init__(self):
        self.zero_order = np.asarray(self.zero_order, dtype=np.float64)
        self.first_order = np.atleast_2d(np.asarray(self.first_order, dtype=np.float64))
        if self.zero_order.ndim != 1 or self.first_order.shape[0] != self.zero_order.shape[0]:
            raise DataError("stats shapes disagree: N is (M,), F must be (M, D)")
        if np.any(self.zero_order < 0):
            raise DataError("zero-order stats must be non-negative")

    @property
    def num_components(self) -> int:
        return self.zero_order.shape[0]

    @property
    def dim(self) -> int:
        return self.first_order.shape[1]

    @property
    def total_frames(self) -> float:
        """Frame count implied by the stats, undoing any recorded scaling."""
        return float(self.zero_order.sum() / self.scale_applied)


def _kmeans_plus_plus(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((m, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, m):
        total = closest.sum()
        if total <= 0:
            centers[c] = x[rng.integers(x.shape[0])]
            continue
        probs = closest / total
        centers[c] = x[rng.choice(x.shape[0], p=probs)]
        closest = np.minimum(closest, ((x - centers[c]) ** 2).sum(axis=1))
    return centers


def _kmeans(x: np.ndarray, m: int, rng: np.random.Generator,
            iters: int = 10) -> tuple[np.ndarray, np.ndarray]:
    centers = _kmeans_plus_plus(x, m, rng)
    assign = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(iters):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2) if m * x.shape[0] < 2 ** 24 \
            else _chunked_sqdist(x, centers)
        new_assign = dists.argmin(axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for c in range(m):
            sel = x[assign == c]
            if len(sel):
                centers[c] = sel.mean(axis=0)
    return centers, assign


def _chunked_sqdist(x: np.ndarray, centers: np.ndarray, chunk: int = 65536) -> np.ndarray:
    out = np.empty((x.shape[0], centers.shape[0]))
    c2 = (centers ** 2).sum(axis=1)
    for start in range(0, x.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = (x[sl] ** 2).sum(axis=1)[:, None] - 2 * x[sl] @ centers.T + c2
    return out


def _floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    if vals[0] >= floor:
        return (cov + cov.T) / 2
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def train_ubm(features, num_components: int, iters: int = 10, seed: int = 0,
              covariance_floor_scale: float = 1e-4,
              min_occupancy: float = 1e-3) -> GmmModel:
    """EM training of a full-covariance mixture from a k-means++ start.

    features may be a list of FeatureMatrix, a list of arrays, or one stacked
    (T, D) array. The per-iteration total log-likelihood is recorded on the
    returned model as em_history and is non-decreasing up to the effect of
    covariance flooring and component re-seeding.
    """
    x = _stack_frames(features)
    t, d = x.shape
    if num_components < 1:
        raise ConfigError("need at least one mixture component")
    if t < num_components:
        raise DataError(f"{t} frames cannot support {num_components} components")
    rng = np.random.default_rng(seed)
    floor = covariance_floor_scale * float(np.var(x, axis=0).mean())

    centers, assign = _kmeans(x, num_components, rng)
    weights = np.empty(num_components)
    means = centers.copy()
    covs = np.empty((num_components, d, d))
    global_cov = np.cov(x, rowvar=False, bias=True) + floor * np.eye(d)
    for c in range(num_components):
        sel = x[assign == c]
        weights[c] = max(len(sel), 1)
        if len(sel) > d:
            covs[c] = _floor_covariance(np.cov(sel, rowvar=False, bias=True), floor)
        else:
            covs[c] = global_cov
    weights /= weights.sum()
    model = GmmModel(weights, means, covs)

    history: list[float] = []
    for _ in range(iters):
        joint = model.component_log_likelihoods(x) + np.log(model.weights)[None, :]
        per_frame = _logsumexp(joint)
        history.append(float(per_frame.sum()))
        post = np.exp(joint - per_frame[:, None])
        counts = post.sum(axis=0)

        starved = counts < min_occupancy
        if starved.any():
            top = int(np.argmax(counts))
            for c in np.flatnonzero(starved):
                log.warning("re-seeding starved component %d from component %d", c, top)
                jitter = rng.normal(0.0, 1e-3, size=d) * np.sqrt(np.diag(model.covariances[top]))
                model.means[c] = model.means[top] + jitter
                model.covariances[c] = model.covariances[top].copy()
                counts[c] = counts[top] / 2.0
                counts[top] /= 2.0
            model.weights = counts / counts.sum()
            model.refresh_cache()
            continue

        new_means = (post.T @ x) / counts[:, None]
        new_covs = np.empty_like(model.covariances)
        for c in range(num_components):
            diff = x - new_means[c]
            new_covs[c] = _floor_covariance((diff.T * post[:, c]) @ diff / counts[c], floor)
        model = GmmModel(counts / t, new_means, new_covs)

    model.em_history = history
    return model


def _stack_frames(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.atleast_2d(np.asarray(features, dtype=np.float64))
    mats = []
    for item in features:
        mats.append(item.frames if isinstance(item, FeatureMatrix) else np.asarray(item))
    if not mats:
        raise DataError("no feature matrices supplied")
    return np.concatenate([np.atleast_2d(m) for m in mats], axis=0).astype(np.float64)


def accumulate_stats(ubm: GmmModel, feats: FeatureMatrix) -> SuffStats:
    """Unscaled zero/first order statistics of one utterance under the UBM."""
    if feats.dim != ubm.dim:
        raise DataError(f"feature dim {feats.dim} does not match UBM dim {ubm.dim}")
    post = ubm.posteriors(feats.frames)
    return SuffStats(zero_order=post.sum(axis=0), first_order=post.T @ feats.frames,
                     utterance_id=feats.id, scale_applied=1.0)


def scale_stats(stats: SuffStats, factor: float = 0.33) -> SuffStats:
    """Scale both stat orders by the given factor, recording it.

    Scaling twice is refused: the recorded factor exists exactly so that the
    same scaling is applied once in extractor training and once at test time.
    """
    if not 0.0 < factor <= 1.0:
        raise ConfigError(f"stats scale factor must be in (0, 1], got {factor}")
    if stats.scale_applied != 1.0:
        raise DataError(
            f"stats for '{stats.utterance_id}' already scaled by {stats.scale_applied}"
        )
    return replace(stats, zero_order=stats.zero_order * factor,
                   first_order=stats.first_order * factor, scale_applied=factor)
