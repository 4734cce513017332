"""Total-variability subspace training and MAP i-vector extraction.

The generative model for one utterance's centered first-order statistics is
F_c ~ N(N_c T_c w, N_c Sigma_c) with w ~ N(0, I). EM alternates the Gaussian
posterior of w per utterance with a per-component row-block update of T. The
UBM covariances serve as Sigma.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, NoSpeechError, NumericalError
from .gmm import GmmModel, SuffStats

log = logging.getLogger(__name__)

PIPELINE_STAGES = ("raw", "centered", "nda", "short-comp", "ln-lda", "length-normed")


@dataclass
class Embedding:
    """A single i-vector with provenance tags.

    stage_tag tracks progress through the compensation chain and may only
    move forward (see PIPELINE_STAGES). Whitening shares the "centered" stage.
    """

    w: np.ndarray
    id: str = ""
    speaker_id: str | None = None
    language_id: str | None = None
    domain_tag: str | None = None
    speech_duration: float | None = None
    stage_tag: str = "raw"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).ravel()
        if not np.isfinite(self.w).all():
            raise DataError(f"embedding '{self.id}' has non-finite entries")
        if self.stage_tag not in PIPELINE_STAGES:
            raise DataError(f"unknown stage tag '{self.stage_tag}'")
        if self.domain_tag not in (None, "in", "out"):
            raise DataError(f"domain tag must be 'in' or 'out', got {self.domain_tag!r}")

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def stage_index(self) -> int:
        return PIPELINE_STAGES.index(self.stage_tag)


@dataclass
class TvModel:
    """Total-variability matrix of shape (M*D, R) bound to a UBM."""

    t: np.ndarray
    ubm_ref: str = ""
    stats_scale: float = 1.0
    num_components: int = 0
    dim: int = 0
    em_history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.ndim != 2:
            raise DataError("total-variability matrix must be 2-D")
        if not np.isfinite(self.t).all():
            raise DataError("total-variability matrix has non-finite entries")
        if self.num_components and self.dim:
            if self.num_components * self.dim != self.t.shape[0]:
                raise DataError("T row count does not equal M*D")

    @property
    def rank(self) -> int:
        return self.t.shape[1]

    def blocks(self) -> np.ndarray:
        """View of T as (M, D, R) row blocks."""
        return self.t.reshape(self.num_components, self.dim, self.rank)


def _validate_stats(stats: SuffStats, ubm: GmmModel, tv: TvModel | None = None) -> None:
    if stats.num_components != ubm.num_components or stats.dim != ubm.dim:
        raise DataError(
            f"stats for '{stats.utterance_id}' have shape ({stats.num_components}, "
            f"{stats.dim}), UBM wants ({ubm.num_components}, {ubm.dim})"
        )
    if tv is not None and stats.scale_applied != tv.stats_scale:
        raise ConfigError(
            f"stats scale {stats.scale_applied} for '{stats.utterance_id}' differs from "
            f"the scale {tv.stats_scale} the extractor was trained with"
        )


def _centered_first_order(stats: SuffStats, ubm: GmmModel) -> np.ndarray:
    """First-order stats centered by N_c * mean_c, shape (M, D)."""
    return stats.first_order - stats.zero_order[:, None] * ubm.means


def _precision_blocks(ubm: GmmModel) -> np.ndarray:
    """Inverse UBM covariances, shape (M, D, D)."""
    inv = np.empty_like(ubm.covariances)
    identity = np.eye(ubm.dim)
    for c in range(ubm.num_components):
        chol = np.linalg.cholesky(ubm.covariances[c])
        inv[c] = scipy.linalg.cho_solve((chol, True), identity)
    return inv


def train_tv(stats: list[SuffStats], ubm: GmmModel, rank: int, iters: int = 5,
             seed: int = 0) -> TvModel:
    """EM estimation of the total-variability matrix.

    All stats must share the UBM and carry the same recorded scale. With
    iters=0 the seeded random initialization is returned unchanged. The
    marginal log-likelihood of the centered stats (constant terms dropped) is
    recorded per iteration in em_history and is non-decreasing.
    """
    if not stats:
        raise DataError("no sufficient statistics supplied")
    m, d = ubm.num_components, ubm.dim
    if rank > m * d:
        raise ConfigError(f"rank {rank} exceeds supervector dimension {m * d}")
    scales = {s.scale_applied for s in stats}
    if len(scales) != 1:
        raise DataError(f"stats carry mixed scale factors: {sorted(scales)}")
    for s in stats:
        _validate_stats(s, ubm)

    rng = np.random.default_rng(seed)
    t_mat = rng.standard_normal((m * d, rank))
    model = TvModel(t_mat, ubm_ref="", stats_scale=scales.pop(),
                    num_components=m, dim=d)

    precisions = _precision_blocks(ubm)
    centered = np.stack([_centered_first_order(s, ubm) for s in stats])  # (U, M, D)
    counts = np.stack([s.zero_order for s in stats])  # (U, M)

    history: list[float] = []
    for _ in range(iters):
        blocks = model.blocks()  # (M, D, R)
        # G_c = T_c' Sigma_c^-1 T_c, precomputed per component: (M, R, R)
        sig_inv_t = np.einsum("mde,mer->mdr", precisions, blocks)
        gram = np.einsum("mdr,mds->mrs", blocks, sig_inv_t)
        b_all = np.einsum("umd,mdr->ur", centered, sig_inv_t)  # (U, R)

        objective = 0.0
        acc_a = np.zeros((m, rank, rank))
        acc_b = np.zeros((m, d, rank))
        for u in range(len(stats)):
            lmat = np.eye(rank) + np.tensordot(counts[u], gram, axes=(0, 0))
            try:
                chol = scipy.linalg.cho_factor(lmat, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise NumericalError("posterior precision is not SPD") from exc
            w = scipy.linalg.cho_solve(chol, b_all[u])
            logdet = 2.0 * np.log(np.diag(chol[0])).sum()
            objective += -0.5 * logdet + 0.5 * float(b_all[u] @ w)
            cov = scipy.linalg.cho_solve(chol, np.eye(rank))
            second_moment = cov + np.outer(w, w)
            acc_a += counts[u][:, None, None] * second_moment[None, :, :]
            acc_b += centered[u][:, :, None] * w[None, None, :]
        history.append(objective)

        new_blocks = np.empty_like(blocks)
        for c in range(m):
            try:
                new_blocks[c] = np.linalg.solve(acc_a[c], acc_b[c].T).T
            except np.linalg.LinAlgError:
                log.warning("singular M-step system for component %d; adding ridge", c)
                ridge = 1e-8 * np.trace(acc_a[c]) / rank * np.eye(rank)
                new_blocks[c] = np.linalg.solve(acc_a[c] + ridge, acc_b[c].T).T
        model = TvModel(new_blocks.reshape(m * d, rank), ubm_ref=model.ubm_ref,
                        stats_scale=model.stats_scale, num_components=m, dim=d)

    model.em_history = history
    return model


def extract_ivector(stats: SuffStats, tv: TvModel, ubm: GmmModel,
                    allow_empty: bool = False) -> Embedding:
    """MAP point estimate of the total-variability factor for one utterance.

    w = L^-1 T' Sigma^-1 F_centered with L = I + sum_c N_c T_c' Sigma_c^-1 T_c.
    Empty stats raise a no-speech error unless allow_empty is set, in which
    case the prior mean (zero vector) is returned.
    """
    _validate_stats(stats, ubm, tv)
    if stats.zero_order.sum() <= 0.0:
        if not allow_empty:
            raise NoSpeechError(f"no speech accumulated for '{stats.utterance_id}'")
        return Embedding(np.zeros(tv.rank), id=stats.utterance_id, stage_tag="raw")

    precisions = _precision_blocks(ubm)
    blocks = tv.blocks()
    centered = _centered_first_order(stats, ubm)
    sig_inv_t = np.einsum("mde,mer->mdr", precisions, blocks)
    lmat = np.eye(tv.rank) + np.einsum("m,mdr,mds->rs", stats.zero_order, blocks, sig_inv_t)
    b = np.einsum("md,mdr->r", centered, sig_inv_t)
    try:
        chol = scipy.linalg.cho_factor(lmat, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            f"posterior precision for '{stats.utterance_id}' is not SPD"
        ) from exc
    w = scipy.linalg.cho_solve(chol, b)
    return Embedding(w, id=stats.utterance_id, stage_tag="raw")
