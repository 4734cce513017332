"""Gaussian PLDA: EM training, domain interpolation, kernel scoring.

The model is w = m + V y + eps with y ~ N(0, I) and eps ~ N(0, Sigma), Sigma
full. Scoring uses the two-covariance form: with S_b = V V' and S_t = S_b +
Sigma, the verification score of centered vectors u1, u2 is

    s = 0.5 u1' Q u1 + 0.5 u2' Q u2 + u1' P u2 + c
    Q = S_t^-1 - (S_t - S_b S_t^-1 S_b)^-1
    P = S_t^-1 S_b (S_t - S_b S_t^-1 S_b)^-1

which equals the log-likelihood ratio of the same-speaker against the
different-speaker joint Gaussian up to one additive constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, NumericalError
from .ivector import Embedding
from .transforms import length_normalize

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PldaModel:
    """Mean, speaker subspace and full residual covariance."""

    m: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    domain_tag: str = "out"
    em_history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64).ravel()
        self.v = np.asarray(self.v, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        d = self.m.shape[0]
        if self.v.ndim != 2 or self.v.shape[0] != d:
            raise DataError(f"V must be ({d}, F), got {self.v.shape}")
        if self.v.shape[1] > d:
            raise DataError(f"speaker factors {self.v.shape[1]} exceed dimension {d}")
        if self.sigma.shape != (d, d):
            raise DataError(f"Sigma must be ({d}, {d}), got {self.sigma.shape}")
        for arr in (self.m, self.v, self.sigma):
            if not np.isfinite(arr).all():
                raise DataError("PLDA parameters contain non-finite values")
        try:
            np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("PLDA residual covariance is not SPD") from exc

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    @property
    def num_factors(self) -> int:
        return self.v.shape[1]


@dataclass
class ScoringKernel:
    """Precomputed quadratic scoring form of a PLDA model."""

    p: np.ndarray
    q: np.ndarray
    c: float
    sb: np.ndarray
    st: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.sb = np.asarray(self.sb, dtype=np.float64)
        self.st = np.asarray(self.st, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64).ravel()
        for name in ("p", "q"):
            mat = getattr(self, name)
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise NumericalError(f"kernel matrix {name.upper()} is not symmetric")


@dataclass
class Trial:
    """One verification trial; enrolment uses 1 or 3 segments."""

    model_id: str
    test_id: str
    label: str | None = None

    def __post_init__(self):
        if self.label not in (None, "target", "nontarget"):
            raise DataError(f"trial label must be target/nontarget, got {self.label!r}")


def _group_by_speaker(x: np.ndarray, labels) -> dict:
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return {k: np.asarray(v) for k, v in groups.items()}


def train_plda(embeddings, speaker_labels, num_factors: int = 200, iters: int = 10,
               seed: int = 0, domain_tag: str = "out") -> PldaModel:
    """EM estimation of the PLDA parameters.

    Speakers with one segment are allowed (the in-domain case treats every
    vector as its own speaker). V is initialized from the top principal
    directions of the data, Sigma from half the total covariance; m, V and
    Sigma are all updated each iteration. The per-iteration marginal
    log-likelihood is recorded in em_history and is non-decreasing.
    """
    from .transforms import _as_matrix

    x = _as_matrix(embeddings)
    n, d = x.shape
    if num_factors > d:
        raise ConfigError(f"speaker factors {num_factors} exceed dimension {d}")
    labels = list(speaker_labels)
    if len(labels) != n:
        raise DataError("speaker label count does not match embeddings")
    groups = _group_by_speaker(x, labels)

    m = x.mean(axis=0)
    total_cov = np.cov(x, rowvar=False, bias=True) + 1e-8 * np.eye(d)
    vals, vecs = np.linalg.eigh(total_cov)
    order = np.argsort(vals)[::-1][:num_factors]
    v = vecs[:, order] * np.sqrt(np.maximum(vals[order], 1e-8) / 2.0)
    rng = np.random.default_rng(seed)
    if num_factors > len(order):
        extra = rng.standard_normal((d, num_factors - len(order))) * 1e-3
        v = np.concatenate([v, extra], axis=1)
    sigma = total_cov / 2.0
    model = PldaModel(m, v, sigma, domain_tag=domain_tag)

    history: list[float] = []
    for _ in range(iters):
        history.append(marginal_log_likelihood(model, x, labels))
        model = _em_step(model, x, groups)
    model.em_history = history
    return model


def _em_step(model: PldaModel, x: np.ndarray, groups: dict) -> PldaModel:
    d, f = model.dim, model.num_factors
    sigma_chol = scipy.linalg.cho_factor(model.sigma, lower=True)
    vt_isig = scipy.linalg.cho_solve(sigma_chol, model.v).T  # (F, D)
    gram = vt_isig @ model.v  # (F, F)

    n_total = x.shape[0]
    sum_fy = np.zeros((d, f))
    sum_nyy = np.zeros((f, f))
    post_means = {}
    post_covs = {}
    by_count: dict = {}
    for spk, idx in groups.items():
        by_count.setdefault(len(idx), []).append(spk)

    for count, spks in by_count.items():
        prec = np.eye(f) + count * gram
        chol = scipy.linalg.cho_factor(prec, lower=True)
        cov = scipy.linalg.cho_solve(chol, np.eye(f))
        for spk in spks:
            idx = groups[spk]
            fsum = (x[idx] - model.m).sum(axis=0)
            y_hat = scipy.linalg.cho_solve(chol, vt_isig @ fsum)
            post_means[spk] = y_hat
            post_covs[spk] = cov
            sum_fy += np.outer(fsum, y_hat)
            sum_nyy += count * (cov + np.outer(y_hat, y_hat))

    v_new = np.linalg.solve(sum_nyy.T, sum_fy.T).T

    # m update with the new V (coordinate ascent on the same bound)
    resid_sum = np.zeros(d)
    for spk, idx in groups.items():
        resid_sum += x[idx].sum(axis=0) - len(idx) * (v_new @ post_means[spk])
    m_new = resid_sum / n_total

    sigma_new = np.zeros((d, d))
    for spk, idx in groups.items():
        centered = x[idx] - m_new
        vy = v_new @ post_means[spk]
        resid = centered - vy
        sigma_new += resid.T @ resid
        second = post_covs[spk]
        sigma_new += len(idx) * v_new @ second @ v_new.T
    sigma_new /= n_total
    sigma_new = (sigma_new + sigma_new.T) / 2 + 1e-10 * np.eye(d)
    return PldaModel(m_new, v_new, sigma_new, domain_tag=model.domain_tag)


def marginal_log_likelihood(model: PldaModel, x: np.ndarray, labels) -> float:
    """Exact marginal log-likelihood of the data under the model.

    Uses the decomposition into per-speaker mean (covariance S_b + Sigma/n)
    and within-speaker deviations (covariance Sigma).
    """
    groups = _group_by_speaker(x, labels)
    d = model.dim
    sb = model.v @ model.v.T
    sigma_chol = scipy.linalg.cho_factor(model.sigma, lower=True)
    logdet_sigma = 2.0 * np.log(np.diag(sigma_chol[0])).sum()

    total = 0.0
    by_count: dict = {}
    for spk, idx in groups.items():
        by_count.setdefault(len(idx), []).append(idx)
    for count, idx_list in by_count.items():
        # sqrt(n) * mean is the orthogonal-contrast mean variable, with
        # covariance Sigma + n * S_b; deviations are iid under Sigma.
        mean_cov = model.sigma + count * sb
        chol = scipy.linalg.cho_factor((mean_cov + mean_cov.T) / 2, lower=True)
        logdet_mean = 2.0 * np.log(np.diag(chol[0])).sum()
        for idx in idx_list:
            seg = x[idx] - model.m
            mu = seg.mean(axis=0)
            dev = seg - mu
            solved_mu = scipy.linalg.cho_solve(chol, mu)
            total += -0.5 * (d * LOG_2PI + logdet_mean + count * float(mu @ solved_mu))
            if count > 1:
                solved_dev = scipy.linalg.cho_solve(sigma_chol, dev.T)
                total += -0.5 * ((count - 1) * (d * LOG_2PI + logdet_sigma)
                                 + float(np.einsum("ij,ji->", dev, solved_dev)))
    return float(total)


def adapt_plda(in_model: PldaModel, out_model: PldaModel, alpha: float = 0.10,
               interpolate_mean: bool = False) -> PldaModel:
    """Affine interpolation of in/out-domain parameters.

    V and Sigma interpolate as alpha*in + (1-alpha)*out. The mean defaults to
    the out-domain mean since the out-domain data dominates; set
    interpolate_mean to blend it with the same weight.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if in_model.dim != out_model.dim or in_model.num_factors != out_model.num_factors:
        raise DataError(
            f"model shapes differ: ({in_model.dim}, {in_model.num_factors}) vs "
            f"({out_model.dim}, {out_model.num_factors})"
        )
    v = alpha * in_model.v + (1.0 - alpha) * out_model.v
    sigma = alpha * in_model.sigma + (1.0 - alpha) * out_model.sigma
    m = alpha * in_model.m + (1.0 - alpha) * out_model.m if interpolate_mean else out_model.m
    return PldaModel(m, v, sigma, domain_tag="adapted")


def build_kernel(model: PldaModel, c: float = 0.0, ridge: float = 1e-10) -> ScoringKernel:
    """Precompute P and Q from S_b = V V' and S_t = S_b + Sigma.

    The constant c defaults to 0; calibration absorbs any additive constant.
    """
    sb = model.v @ model.v.T
    st = sb + model.sigma
    st_inv = _spd_inverse(st, "S_t")
    inner = st - sb @ st_inv @ sb
    inner = (inner + inner.T) / 2
    try:
        inner_inv = _spd_inverse(inner, "S_t - S_b S_t^-1 S_b")
    except NumericalError:
        log.warning("near-singular scoring kernel; adding ridge %g", ridge)
        inner_inv = _spd_inverse(inner + ridge * np.eye(model.dim),
                                 "S_t - S_b S_t^-1 S_b (ridged)")
    q = st_inv - inner_inv
    p = st_inv @ sb @ inner_inv
    return ScoringKernel(p=(p + p.T) / 2, q=(q + q.T) / 2, c=c, sb=sb, st=st, m=model.m)


def _spd_inverse(mat: np.ndarray, what: str) -> np.ndarray:
    try:
        chol = scipy.linalg.cho_factor((mat + mat.T) / 2, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is numerically singular") from exc
    return scipy.linalg.cho_solve(chol, np.eye(mat.shape[0]))


def enroll(embeddings) -> Embedding:
    """Speaker model from 1 or 3 length-normalized segments.

    One segment enrols as-is; three are averaged and re-length-normalized.
    """
    embs = list(embeddings)
    if len(embs) not in (1, 3):
        raise DataError(f"enrolment needs 1 or 3 segments, got {len(embs)}")
    if len(embs) == 1:
        return embs[0]
    mean = np.mean([e.w for e in embs], axis=0)
    merged = replace(embs[0], w=mean)
    return length_normalize(merged)


def score_trial(enrol: Embedding, test: Embedding, kernel: ScoringKernel) -> float:
    """Verification score of one trial; symmetric in its two arguments."""
    d = kernel.p.shape[0]
    if enrol.dim != d or test.dim != d:
        raise DataError(
            f"dimension mismatch: enrol {enrol.dim}, test {test.dim}, kernel {d}"
        )
    u1 = enrol.w - kernel.m
    u2 = test.w - kernel.m
    return float(0.5 * u1 @ kernel.q @ u1 + 0.5 * u2 @ kernel.q @ u2
                 + u1 @ kernel.p @ u2 + kernel.c)


def score_matrix(kernel: ScoringKernel, enrol_rows: np.ndarray,
                 test_rows: np.ndarray) -> np.ndarray:
    """All-vs-all scores, shape (num_enrol, num_test)."""
    e = np.atleast_2d(enrol_rows) - kernel.m
    t = np.atleast_2d(test_rows) - kernel.m
    qe = 0.5 * np.einsum("id,de,ie->i", e, kernel.q, e)
    qt = 0.5 * np.einsum("id,de,ie->i", t, kernel.q, t)
    cross = e @ kernel.p @ t.T
    return qe[:, None] + qt[None, :] + cross + kernel.c
