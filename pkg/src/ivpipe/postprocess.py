"""Score post-processing: s-norm, duration QMF, fusion, calibration, metrics.

The detection cost is Cdet(theta) = p_tar*Cmiss*Pmiss + (1-p_tar)*Cfa*Pfa with
unit costs by default; min_cdet minimizes over all thresholds and act_cdet
evaluates calibrated log-likelihood-ratios at the Bayes threshold
log((1-p_tar)/p_tar).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SNORM_MODES = ("sum", "paper-minus")


@dataclass
class CohortStats:
    """Impostor-cohort score statistics for the two trial sides."""

    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    cohort_size: int

    def __post_init__(self):
        if self.cohort_size < 2:
            raise DataError(f"cohort must hold at least 2 impostors, got {self.cohort_size}")
        self.sigma1 = max(self.sigma1, 1e-12)
        self.sigma2 = max(self.sigma2, 1e-12)


@dataclass
class CalibrationMap:
    """Affine score-to-llr map llr = a*s + b."""

    a: float
    b: float
    p_tar: float

    def __post_init__(self):
        if self.a <= 0:
            raise DataError(f"calibration scale must be positive, got {self.a}")

    def apply(self, scores):
        return self.a * np.asarray(scores, dtype=np.float64) + self.b


@dataclass
class DetMetrics:
    """Detection metrics at a given target prior."""

    eer: float
    min_cdet: float
    act_cdet: float
    threshold_min: float
    p_tar: float

    def __post_init__(self):
        if not 0.0 <= self.eer <= 1.0:
            raise DataError(f"EER {self.eer} outside [0, 1]")
        if self.min_cdet > self.act_cdet + 1e-12:
            raise DataError("min_cdet exceeds act_cdet")


def cohort_stats(enrol_cohort_scores, test_cohort_scores) -> CohortStats:
    """Means and standard deviations of the two cohort score sets."""
    e = np.asarray(enrol_cohort_scores, dtype=np.float64)
    t = np.asarray(test_cohort_scores, dtype=np.float64)
    if e.size < 2 or t.size < 2:
        raise DataError(f"cohorts must hold at least 2 scores, got {e.size} and {t.size}")
    return CohortStats(mu1=float(e.mean()), sigma1=float(e.std()),
                       mu2=float(t.mean()), sigma2=float(t.std()),
                       cohort_size=min(e.size, t.size))


def snorm(raw: float, enrol_cohort_scores, test_cohort_scores,
          mode: str = "sum") -> float:
    """Symmetric score normalization against an impostor cohort.

    mode "sum" (default): 0.5*[(s-mu1)/sigma1 + (s-mu2)/sigma2].
    mode "paper-minus": (s-mu1)/sigma1 - (s-mu2)/sigma2, which cancels to zero
    whenever both cohort distributions coincide; kept for literal
    reproduction.
    """
    stats = cohort_stats(enrol_cohort_scores, test_cohort_scores)
    return snorm_from_stats(raw, stats, mode=mode)


def snorm_from_stats(raw: float, stats: CohortStats, mode: str = "sum") -> float:
    if mode not in SNORM_MODES:
        raise ConfigError(f"unknown s-norm mode '{mode}'")
    z1 = (raw - stats.mu1) / stats.sigma1
    z2 = (raw - stats.mu2) / stats.sigma2
    return 0.5 * (z1 + z2) if mode == "sum" else z1 - z2


def apply_qmf(score: float, test_speech_duration: float, coeff: float = -0.2) -> float:
    """Add the duration quality term coeff * sqrt(t) to a score."""
    if test_speech_duration <= 0:
        raise DataError(f"test speech duration must be positive, got {test_speech_duration}")
    return score + coeff * np.sqrt(test_speech_duration)


def fuse(scores_a, scores_b):
    """Per-trial sum of two score sets with identical trial coverage.

    Accepts mappings keyed by (model_id, test_id) or aligned sequences.
    """
    if isinstance(scores_a, dict) or isinstance(scores_b, dict):
        if set(scores_a) != set(scores_b):
            missing = set(scores_a) ^ set(scores_b)
            raise DataError(f"trial coverage differs between systems: {sorted(missing)[:5]}...")
        return {key: scores_a[key] + scores_b[key] for key in scores_a}
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"score lists differ in length: {a.shape} vs {b.shape}")
    return a + b


def _split_by_label(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    lab = np.asarray([_is_target(l) for l in labels], dtype=bool)
    if lab.shape[0] != scores.shape[0]:
        raise DataError("scores and labels differ in length")
    tar, non = scores[lab], scores[~lab]
    if tar.size == 0 or non.size == 0:
        raise DataError("need both target and nontarget trials")
    return tar, non


def _is_target(label) -> bool:
    if isinstance(label, str):
        if label not in ("target", "nontarget"):
            raise DataError(f"unknown trial label {label!r}")
        return label == "target"
    return bool(label)


def train_calibration(scores, labels, p_tar: float = 0.0001,
                      grad_tol: float = 1e-8, max_iter: int = 200) -> CalibrationMap:
    """Prior-weighted logistic regression to an affine llr map.

    Minimizes the p_tar-weighted cross-entropy of sigmoid(a*s + b + logit(p_tar))
    by Newton iterations until the gradient norm falls below grad_tol.
    Perfectly separable scores have no finite minimizer; the scale is then
    capped at 1e3 with a warning.
    """
    if not 0.0 < p_tar < 1.0:
        raise ConfigError(f"p_tar must lie in (0, 1), got {p_tar}")
    tar, non = _split_by_label(scores, labels)
    offset = np.log(p_tar / (1.0 - p_tar))
    w_tar = p_tar / tar.size
    w_non = (1.0 - p_tar) / non.size

    separable = tar.min() > non.max()
    if separable:
        log.warning("scores are perfectly separable; capping calibration scale at 1e3")

    def grad_hess(a: float, b: float):
        zt = a * tar + b + offset
        zn = a * non + b + offset
        st = _sigmoid(-zt)
        sn = _sigmoid(zn)
        ga = -w_tar * (st * tar).sum() + w_non * (sn * non).sum()
        gb = -w_tar * st.sum() + w_non * sn.sum()
        wt = st * (1.0 - st)
        wn = sn * (1.0 - sn)
        haa = w_tar * (wt * tar * tar).sum() + w_non * (wn * non * non).sum()
        hab = w_tar * (wt * tar).sum() + w_non * (wn * non).sum()
        hbb = w_tar * wt.sum() + w_non * wn.sum()
        return np.array([ga, gb]), np.array([[haa, hab], [hab, hbb]])

    def objective(a: float, b: float) -> float:
        zt = a * tar + b + offset
        zn = a * non + b + offset
        return float(w_tar * _softplus(-zt).sum() + w_non * _softplus(zn).sum())

    a, b = 1.0, 0.0
    if separable:
        a = 1e3
        for _ in range(max_iter):
            g, h = grad_hess(a, b)
            if abs(g[1]) < grad_tol:
                break
            step = g[1] / max(h[1, 1], 1e-300)
            b -= np.clip(step, -1e2, 1e2)
        return CalibrationMap(a=a, b=b, p_tar=p_tar)

    for _ in range(max_iter):
        g, h = grad_hess(a, b)
        if np.linalg.norm(g) < grad_tol:
            break
        try:
            step = np.linalg.solve(h + 1e-300 * np.eye(2), g)
        except np.linalg.LinAlgError:
            step = g
        # backtracking keeps the convex objective decreasing
        base = objective(a, b)
        scale = 1.0
        for _ in range(60):
            na, nb = a - scale * step[0], b - scale * step[1]
            if objective(na, nb) <= base:
                a, b = na, nb
                break
            scale /= 2.0
        if a > 1e3:
            log.warning("calibration scale exceeded 1e3; capping")
            a = 1e3
            break
    if a <= 0:
        log.warning("calibration produced non-positive scale %g; flooring at 1e-6", a)
        a = 1e-6
    return CalibrationMap(a=float(a), b=float(b), p_tar=p_tar)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    expx = np.exp(x[~pos])
    out[~pos] = expx / (1.0 + expx)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def error_rates(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Operating points over all decision thresholds.

    Returns (thresholds, p_miss, p_fa) where a trial is accepted when its
    score is >= threshold. The first threshold of -inf accepts everything.
    """
    tar, non = _split_by_label(scores, labels)
    cand = np.unique(np.concatenate([tar, non]))
    thresholds = np.concatenate([[-np.inf], cand, [np.inf]])
    # counts below threshold via searchsorted on sorted class scores
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    p_miss = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, p_miss, p_fa


def compute_metrics(scores, labels, p_tar: float = 0.0001, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> DetMetrics:
    """EER (ROC crossing with linear interpolation), min and actual Cdet.

    act_cdet reads the scores as calibrated llrs and thresholds them at the
    Bayes point log((1-p_tar)/p_tar) for unit costs.
    """
    if not 0.0 < p_tar < 1.0:
        raise ConfigError(f"p_tar must lie in (0, 1), got {p_tar}")
    thresholds, p_miss, p_fa = error_rates(scores, labels)

    cdet = p_tar * c_miss * p_miss + (1.0 - p_tar) * c_fa * p_fa
    best = int(np.argmin(cdet))
    min_cdet = float(cdet[best])

    bayes = np.log(((1.0 - p_tar) * c_fa) / (p_tar * c_miss))
    tar, non = _split_by_label(scores, labels)
    act_miss = float((tar < bayes).sum()) / tar.size
    act_fa = float((non >= bayes).sum()) / non.size
    act_cdet = float(p_tar * c_miss * act_miss + (1.0 - p_tar) * c_fa * act_fa)

    eer = _interpolated_eer(p_miss, p_fa)
    return DetMetrics(eer=eer, min_cdet=min_cdet, act_cdet=act_cdet,
                      threshold_min=float(thresholds[best]), p_tar=p_tar)


def _interpolated_eer(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    diff = p_miss - p_fa
    idx = int(np.argmax(diff >= 0))
    if diff[idx] == 0.0:
        return float(p_miss[idx])
    if idx == 0:
        return float(0.5 * (p_miss[0] + p_fa[0]))
    dm = p_miss[idx] - p_miss[idx - 1]
    df = p_fa[idx] - p_fa[idx - 1]
    t = (p_fa[idx - 1] - p_miss[idx - 1]) / (dm - df)
    return float(p_miss[idx - 1] + t * dm)


def det_points(scores, labels) -> np.ndarray:
    """(P_miss, P_fa) pairs across thresholds, for external plotting."""
    _, p_miss, p_fa = error_rates(scores, labels)
    return np.stack([p_miss, p_fa], axis=1)
