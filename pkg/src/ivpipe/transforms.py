"""Embedding compensation chain.

Covers centering, ZCA whitening, nearest-neighbor discriminant analysis,
classical LDA, the duration-pair LDA + WCCN compensation, language-normalized
LDA and length normalization, plus composition of fitted transforms.

All eigen-projections share one solver with a fixed sign convention (largest
magnitude entry of each direction made positive) so fits are reproducible
bit-for-bit for a fixed input order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError, StageOrderError
from .ivector import Embedding, PIPELINE_STAGES

log = logging.getLogger(__name__)

TRANSFORM_KINDS = ("center", "whiten", "nda", "lda", "ln-lda", "wccn", "length-norm")


@dataclass
class LinearTransform:
    """One chain link: x -> A (x - b), or pure length normalization.

    a is None for identity-shaped links (center, length-norm); b is None when
    there is no offset. stage, when set, is the pipeline stage the output
    reaches; apply_chain enforces forward-only stage transitions.
    """

    kind: str
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    in_dim: int = 0
    out_dim: int = 0
    stage: str | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise DataError(f"unknown transform kind '{self.kind}'")
        if self.a is not None:
            self.a = np.asarray(self.a, dtype=np.float64)
            if not np.isfinite(self.a).all():
                raise DataError(f"{self.kind} transform matrix has non-finite entries")
            self.out_dim, self.in_dim = self.a.shape
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=np.float64).ravel()
            if self.in_dim == 0:
                self.in_dim = self.b.shape[0]
            if self.out_dim == 0:
                self.out_dim = self.b.shape[0]
        if self.a is not None and self.b is not None and self.b.shape[0] != self.in_dim:
            raise DataError(f"{self.kind}: offset dim {self.b.shape[0]} != in_dim {self.in_dim}")
        if self.out_dim > self.in_dim:
            raise DataError(f"{self.kind}: out_dim {self.out_dim} exceeds in_dim {self.in_dim}")
        if self.stage is not None and self.stage not in PIPELINE_STAGES:
            raise DataError(f"unknown stage '{self.stage}'")

    def apply(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64).ravel()
        if self.kind == "length-norm":
            norm = np.linalg.norm(w)
            if norm <= 0.0:
                raise DataError("cannot length-normalize a zero vector")
            return w / norm
        if self.in_dim and w.shape[0] != self.in_dim:
            raise DataError(f"{self.kind}: vector dim {w.shape[0]} != in_dim {self.in_dim}")
        if self.b is not None:
            w = w - self.b
        if self.a is not None:
            w = self.a @ w
        return w


@dataclass
class ScatterPair:
    """Within/between/total scatter matrices with symmetry and PSD checks."""

    sw: np.ndarray
    sb: np.ndarray
    st: np.ndarray | None = None

    def __post_init__(self):
        for name in ("sw", "sb", "st"):
            mat = getattr(self, name)
            if mat is None:
                continue
            mat = np.asarray(mat, dtype=np.float64)
            if not np.allclose(mat, mat.T, atol=1e-10):
                raise NumericalError(f"{name} scatter is not symmetric")
            if np.linalg.eigvalsh((mat + mat.T) / 2).min() < -1e-8:
                raise NumericalError(f"{name} scatter has eigenvalues below -1e-8")
            setattr(self, name, (mat + mat.T) / 2)


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    rows = [e.w if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
            for e in embeddings]
    if not rows:
        raise DataError("no embeddings supplied")
    return np.vstack(rows)


def _sign_normalize(rows: np.ndarray) -> np.ndarray:
    out = rows.copy()
    for i, row in enumerate(out):
        if row[np.argmax(np.abs(row))] < 0:
            out[i] = -row
    return out


def _floor_spd(mat: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals[0] >= floor:
        return (mat + mat.T) / 2
    log.warning("flooring scatter eigenvalues at %g (smallest was %g)", floor, vals[0])
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def discriminant_directions(sb: np.ndarray, sw: np.ndarray, out_dim: int,
                            floor: float = 1e-8) -> np.ndarray:
    """Top generalized eigenvectors of (sb, sw), eigenvalue-descending.

    Returns a (out_dim, D) projection; within-scatter eigenvalues are floored
    before the solve so degenerate problems stay well-posed.
    """
    d = sb.shape[0]
    if not 1 <= out_dim <= d:
        raise DataError(f"out_dim {out_dim} not in [1, {d}]")
    sw = _floor_spd(sw, floor)
    vals, vecs = scipy.linalg.eigh((sb + sb.T) / 2, sw)
    order = np.argsort(vals)[::-1][:out_dim]
    return _sign_normalize(vecs[:, order].T)


def fit_center(embeddings) -> LinearTransform:
    """Offset removal: x -> x - mean."""
    x = _as_matrix(embeddings)
    return LinearTransform(kind="center", b=x.mean(axis=0), stage="centered")


def fit_center_whiten(embeddings, ridge: float = 1e-6) -> LinearTransform:
    """ZCA whitening: maps the sample mean to 0 and sample covariance to I.

    A = C^(-1/2) with the symmetric inverse square root; a rank-deficient
    covariance is regularized with the given ridge and a warning.
    """
    x = _as_matrix(embeddings)
    n, d = x.shape
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False) if n > 1 else np.zeros((d, d))
    if n <= d:
        log.warning("whitening with %d samples in %d dims; adding ridge %g", n, d, ridge)
        cov = cov + ridge * np.eye(d)
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    if vals.min() < ridge:
        log.warning("rank-deficient covariance (min eigenvalue %g); ridge applied", vals.min())
        vals = vals + ridge
    a = (vecs / np.sqrt(vals)) @ vecs.T
    return LinearTransform(kind="whiten", a=a, b=mean, stage="centered")


def _class_indices(labels) -> dict:
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return {k: np.asarray(v) for k, v in groups.items()}


def nda_scatter(x: np.ndarray, labels, k: int = 10, alpha: float = 2.0) -> ScatterPair:
    """Nonparametric scatter matrices from k-nearest-neighbor local means.

    Within: each sample against the local mean of its k nearest same-class
    neighbours. Between: each sample against the local mean of its k nearest
    neighbours in every other class, weighted by the boundary-emphasis ratio
    min(d_own^a, d_other^a) / (d_own^a + d_other^a) with d the distance to the
    k-th neighbour.
    """
    groups = _class_indices(labels)
    if any(len(idx) < 2 for idx in groups.values()):
        raise DataError("NDA needs at least 2 samples per class")
    n, d = x.shape
    sq = np.maximum(
        (x ** 2).sum(axis=1)[:, None] - 2 * x @ x.T + (x ** 2).sum(axis=1)[None, :], 0.0
    )
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for cls, idx in groups.items():
        k_own = min(k, len(idx) - 1)
        if k_own < k:
            log.warning("class %r has %d samples; clamping k to %d", cls, len(idx), k_own)
        for i in idx:
            own = idx[idx != i]
            order = own[np.argsort(sq[i, own], kind="stable")]
            nearest = order[:k_own]
            d_own = np.sqrt(sq[i, order[k_own - 1]])
            diff_w = x[i] - x[nearest].mean(axis=0)
            sw += np.outer(diff_w, diff_w)
            for other_cls, other_idx in groups.items():
                if other_cls == cls:
                    continue
                k_oth = min(k, len(other_idx))
                other_order = other_idx[np.argsort(sq[i, other_idx], kind="stable")]
                other_nearest = other_order[:k_oth]
                d_oth = np.sqrt(sq[i, other_order[k_oth - 1]])
                weight_num = min(d_own ** alpha, d_oth ** alpha)
                weight_den = d_own ** alpha + d_oth ** alpha
                weight = weight_num / weight_den if weight_den > 0 else 0.5
                diff_b = x[i] - x[other_nearest].mean(axis=0)
                sb += weight * np.outer(diff_b, diff_b)
    return ScatterPair(sw=sw, sb=sb)


def fit_nda(embeddings, labels, k: int = 10, out_dim: int | None = None,
            alpha: float = 2.0, stage: str = "nda") -> LinearTransform:
    """Nearest-neighbor discriminant projection onto out_dim directions."""
    x = _as_matrix(embeddings)
    out_dim = out_dim if out_dim is not None else x.shape[1]
    pair = nda_scatter(x, labels, k=k, alpha=alpha)
    a = discriminant_directions(pair.sb, pair.sw, out_dim)
    return LinearTransform(kind="nda", a=a, stage=stage)


def lda_scatter(x: np.ndarray, labels, use_total_scatter: bool = False) -> ScatterPair:
    """Parametric scatter matrices.

    With use_total_scatter the within matrix is the uncentered total scatter
    minus the between matrix, matching the convention the language-normalized
    variant collapses to for a single language.
    """
    groups = _class_indices(labels)
    n, d = x.shape
    mean = x.mean(axis=0)
    sb = np.zeros((d, d))
    sw = np.zeros((d, d))
    for idx in groups.values():
        mu = x[idx].mean(axis=0)
        dev = mu - mean
        sb += len(idx) * np.outer(dev, dev)
        centered = x[idx] - mu
        sw += centered.T @ centered
    st = x.T @ x
    if use_total_scatter:
        sw = st - sb
    return ScatterPair(sw=sw, sb=sb, st=st)


def fit_lda(embeddings, labels, out_dim: int | None = None,
            use_total_scatter: bool = False, stage: str = "nda") -> LinearTransform:
    """Classical LDA projection; same eigen-solution contract as fit_nda."""
    x = _as_matrix(embeddings)
    out_dim = out_dim if out_dim is not None else x.shape[1]
    groups = _class_indices(labels)
    if all(len(idx) == 1 for idx in groups.values()):
        log.warning("every class is a singleton; within scatter is zero, solving regularized")
    pair = lda_scatter(x, labels, use_total_scatter=use_total_scatter)
    a = discriminant_directions(pair.sb, pair.sw, out_dim)
    return LinearTransform(kind="lda", a=a, stage=stage)


def fit_short_duration_comp(pairs, out_dim: int | None = None,
                            check_ids: bool = True) -> tuple[LinearTransform, LinearTransform]:
    """Duration compensation from (full, excerpt) embedding pairs.

    Each pair is one class. The LDA part keeps the out_dim directions of
    smallest within-pair (duration) variability relative to between; default
    out_dim removes 10 dimensions. The WCCN part is fit on the projected
    pairs: B with B B' = W^-1 for W the average within-pair covariance, which
    maps the within-pair covariance to the identity.
    """
    if not pairs:
        raise DataError("no duration pairs supplied")
    full_rows, excerpt_rows = [], []
    for full, excerpt in pairs:
        fid = full.id if isinstance(full, Embedding) else None
        eid = excerpt.id if isinstance(excerpt, Embedding) else None
        if check_ids and fid is not None and eid is not None and fid != eid:
            raise DataError(f"unpaired embeddings: '{fid}' vs '{eid}'")
        full_rows.append(full.w if isinstance(full, Embedding) else np.asarray(full))
        excerpt_rows.append(excerpt.w if isinstance(excerpt, Embedding) else np.asarray(excerpt))
    full_mat = np.vstack(full_rows)
    exc_mat = np.vstack(excerpt_rows)
    if full_mat.shape != exc_mat.shape:
        raise DataError("full and excerpt embeddings disagree in shape")
    n, d = full_mat.shape
    out_dim = out_dim if out_dim is not None else max(d - 10, 1)

    x = np.concatenate([full_mat, exc_mat], axis=0)
    labels = np.concatenate([np.arange(n), np.arange(n)])
    pair_scatter = lda_scatter(x, labels)
    if np.allclose(pair_scatter.sw, 0.0, atol=1e-14):
        log.warning("duration pairs are identical; within scatter is zero, "
                    "projection degenerates to a regularized identity-like map")
    a_lda = discriminant_directions(pair_scatter.sb, pair_scatter.sw, out_dim)
    lda_t = LinearTransform(kind="lda", a=a_lda, stage="short-comp")

    projected = x @ a_lda.T
    w_mat = np.zeros((out_dim, out_dim))
    for pid in range(n):
        members = projected[[pid, n + pid]]
        centered = members - members.mean(axis=0)
        w_mat += centered.T @ centered / members.shape[0]
    w_mat /= n
    b = wccn_from_within(w_mat)
    wccn_t = LinearTransform(kind="wccn", a=b, stage="short-comp")
    return lda_t, wccn_t


def wccn_from_within(within: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Map A with A W A' = I, computed from the Cholesky factor of W."""
    within = (within + within.T) / 2
    try:
        chol = np.linalg.cholesky(within)
    except np.linalg.LinAlgError:
        log.warning("within covariance singular; adding ridge %g for WCCN", ridge)
        scale = max(np.trace(within) / within.shape[0], 1.0)
        chol = np.linalg.cholesky(within + ridge * scale * np.eye(within.shape[0]))
    return scipy.linalg.solve_triangular(chol, np.eye(within.shape[0]), lower=True)


def ln_lda_scatter(x: np.ndarray, speaker_labels, language_labels) -> ScatterPair:
    """Language-normalized scatter matrices.

    Between: speaker means deviated from their language mean, weighted by the
    speaker's segment count within that language. Total: uncentered second
    moment. Within: total minus between.
    """
    n, d = x.shape
    speaker_labels = list(speaker_labels)
    language_labels = list(language_labels)
    if len(speaker_labels) != n or len(language_labels) != n:
        raise DataError("label lists must match the number of embeddings")
    st = x.T @ x
    sb = np.zeros((d, d))
    for lang in sorted(set(language_labels), key=str):
        lang_idx = np.asarray([i for i, l in enumerate(language_labels) if l == lang])
        lang_mean = x[lang_idx].mean(axis=0)
        speakers = sorted({speaker_labels[i] for i in lang_idx}, key=str)
        for spk in speakers:
            idx = np.asarray([i for i in lang_idx if speaker_labels[i] == spk])
            dev = x[idx].mean(axis=0) - lang_mean
            sb += len(idx) * np.outer(dev, dev)
    sw = st - sb
    return ScatterPair(sw=sw, sb=sb, st=st)


def fit_ln_lda(embeddings, speaker_labels, language_labels,
               out_dim: int = 300) -> LinearTransform:
    """Discriminant projection whose between scatter removes language offsets.

    Every speaker must appear under a single language label. With one
    language this reduces to LDA under the total-scatter convention.
    """
    x = _as_matrix(embeddings)
    spk_langs: dict = {}
    for spk, lang in zip(speaker_labels, language_labels):
        spk_langs.setdefault(spk, set()).add(lang)
    multi = {s for s, langs in spk_langs.items() if len(langs) > 1}
    if multi:
        raise DataError(f"speakers with multiple language labels: {sorted(map(str, multi))}")
    pair = ln_lda_scatter(x, speaker_labels, language_labels)
    a = discriminant_directions(pair.sb, pair.sw, out_dim)
    return LinearTransform(kind="ln-lda", a=a, stage="ln-lda")


def length_normalize(e: Embedding) -> Embedding:
    """Project onto the unit sphere; idempotent, zero vectors are an error."""
    norm = np.linalg.norm(e.w)
    if norm <= 0.0:
        raise DataError(f"embedding '{e.id}' has zero norm")
    return replace(e, w=e.w / norm, stage_tag="length-normed")


def make_length_norm() -> LinearTransform:
    return LinearTransform(kind="length-norm", stage="length-normed")


def apply_transform(t: LinearTransform, e: Embedding) -> Embedding:
    """Apply one chain link, advancing the stage tag when the link names one."""
    new_w = t.apply(e.w)
    stage = e.stage_tag
    if t.stage is not None:
        if PIPELINE_STAGES.index(t.stage) < e.stage_index():
            raise StageOrderError(
                f"transform '{t.kind}' targets stage '{t.stage}' but embedding "
                f"'{e.id}' is already at '{e.stage_tag}'"
            )
        stage = t.stage
    return replace(e, w=new_w, stage_tag=stage)


def apply_chain(chain, e: Embedding) -> Embedding:
    """Compose a transform sequence; an empty chain is the identity."""
    out = e
    for t in chain:
        out = apply_transform(t, out)
    return out
