"""Binary artifact formats, manifests and score/trial text files.

Every binary format starts with a 4-byte ASCII magic and a u32 version; all
integers and floats are little-endian. Model payloads are stored as raw f64
bytes so serialization round-trips bit-exactly. Writes go through a
temp-then-rename helper so readers never observe partial files.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureMatrix
from .gmm import GmmModel, SuffStats
from .ivector import Embedding, PIPELINE_STAGES, TvModel
from .plda import PldaModel, ScoringKernel, Trial
from .postprocess import CalibrationMap
from .sad import EnergyThresholdSource, MlpClassifierSource, SadModel
from .transforms import LinearTransform, TRANSFORM_KINDS

VERSION = 1

_ACTIVATIONS = ("relu", "sigmoid", "tanh")
_DOMAINS = ("out", "in", "adapted")


def atomic_write(path, data: bytes) -> None:
    """Write bytes to path via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header(magic: str, *fields) -> bytes:
    return magic.encode("ascii") + struct.pack("<I", VERSION) + b"".join(fields)


def _read_header(buf: bytes, magic: str) -> int:
    if buf[:4] != magic.encode("ascii"):
        raise DataError(f"bad magic {buf[:4]!r}, expected {magic}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported {magic} version {version}")
    return 8


def _pack_str(text: str | None) -> bytes:
    if text is None:
        return struct.pack("<I", 0xFFFFFFFF)
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str | None, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if n == 0xFFFFFFFF:
        return None, off
    return buf[off : off + n].decode("utf-8"), off + n


def _pack_f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _unpack_f64(buf: bytes, off: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
    return arr, off + 8 * count


# ---------------------------------------------------------------- features

def save_features(path, feats: FeatureMatrix) -> None:
    """IVFM: T, D, frame_shift, f32 rows, optional mask block."""
    t, d = feats.frames.shape
    flags = 1 if feats.speech_mask is not None else 0
    head = _header("IVFM", struct.pack("<IIdB", t, d, feats.frame_shift, flags))
    body = np.ascontiguousarray(feats.frames, dtype="<f4").tobytes()
    if feats.speech_mask is not None:
        body += feats.speech_mask.astype(np.uint8).tobytes()
    atomic_write(path, head + _pack_str(feats.id) + body)


def load_features(path) -> FeatureMatrix:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVFM")
    t, d, shift, flags = struct.unpack_from("<IIdB", buf, off)
    off += struct.calcsize("<IIdB")
    utt_id, off = _unpack_str(buf, off)
    frames = np.frombuffer(buf, dtype="<f4", count=t * d, offset=off).reshape(t, d)
    off += 4 * t * d
    mask = None
    if flags & 1:
        mask = np.frombuffer(buf, dtype=np.uint8, count=t, offset=off).astype(bool)
    return FeatureMatrix(frames.astype(np.float64), shift, speech_mask=mask, id=utt_id or "")


# ---------------------------------------------------------------- gmm / stats

def save_gmm(path, model: GmmModel) -> None:
    """IVGM: M, D, weights, means, covariances as f64."""
    m, d = model.means.shape
    head = _header("IVGM", struct.pack("<II", m, d))
    atomic_write(path, head + _pack_f64(model.weights) + _pack_f64(model.means)
                 + _pack_f64(model.covariances))


def load_gmm(path) -> GmmModel:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVGM")
    m, d = struct.unpack_from("<II", buf, off)
    off += 8
    weights, off = _unpack_f64(buf, off, (m,))
    means, off = _unpack_f64(buf, off, (m, d))
    covs, off = _unpack_f64(buf, off, (m, d, d))
    return GmmModel(weights, means, covs)


def save_stats(path, stats: SuffStats) -> None:
    """IVST: M, D, scale, N, F plus the utterance id."""
    m, d = stats.first_order.shape
    head = _header("IVST", struct.pack("<IId", m, d, stats.scale_applied))
    atomic_write(path, head + _pack_str(stats.utterance_id)
                 + _pack_f64(stats.zero_order) + _pack_f64(stats.first_order))


def load_stats(path) -> SuffStats:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVST")
    m, d, scale = struct.unpack_from("<IId", buf, off)
    off += struct.calcsize("<IId")
    utt_id, off = _unpack_str(buf, off)
    zero, off = _unpack_f64(buf, off, (m,))
    first, off = _unpack_f64(buf, off, (m, d))
    return SuffStats(zero, first, utterance_id=utt_id or "", scale_applied=scale)


# ---------------------------------------------------------------- tv / embeddings

def save_tv(path, model: TvModel) -> None:
    """IVTV: M, D, R, stats scale, T matrix."""
    head = _header("IVTV", struct.pack("<IIId", model.num_components, model.dim,
                                       model.rank, model.stats_scale))
    atomic_write(path, head + _pack_str(model.ubm_ref) + _pack_f64(model.t))


def load_tv(path) -> TvModel:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVTV")
    m, d, r, scale = struct.unpack_from("<IIId", buf, off)
    off += struct.calcsize("<IIId")
    ubm_ref, off = _unpack_str(buf, off)
    t, off = _unpack_f64(buf, off, (m * d, r))
    return TvModel(t, ubm_ref=ubm_ref or "", stats_scale=scale, num_components=m, dim=d)


def save_embedding(path, emb: Embedding) -> None:
    """IVEC: dimension, vector, provenance tags."""
    head = _header("IVEC", struct.pack("<I", emb.dim))
    duration = emb.speech_duration if emb.speech_duration is not None else float("nan")
    meta = (_pack_str(emb.id) + _pack_str(emb.speaker_id) + _pack_str(emb.language_id)
            + _pack_str(emb.domain_tag) + struct.pack("<dB", duration,
                                                      PIPELINE_STAGES.index(emb.stage_tag)))
    atomic_write(path, head + meta + _pack_f64(emb.w))


def load_embedding(path) -> Embedding:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVEC")
    (dim,) = struct.unpack_from("<I", buf, off)
    off += 4
    utt_id, off = _unpack_str(buf, off)
    speaker, off = _unpack_str(buf, off)
    language, off = _unpack_str(buf, off)
    domain, off = _unpack_str(buf, off)
    duration, stage_idx = struct.unpack_from("<dB", buf, off)
    off += struct.calcsize("<dB")
    w, off = _unpack_f64(buf, off, (dim,))
    return Embedding(w, id=utt_id or "", speaker_id=speaker, language_id=language,
                     domain_tag=domain,
                     speech_duration=None if np.isnan(duration) else duration,
                     stage_tag=PIPELINE_STAGES[stage_idx])


# ---------------------------------------------------------------- transforms

def save_transform(path, t: LinearTransform) -> None:
    """IVTR: kind, stage, dims, optional A and b."""
    kind_idx = TRANSFORM_KINDS.index(t.kind)
    stage_idx = PIPELINE_STAGES.index(t.stage) if t.stage is not None else 0xFF
    flags = (1 if t.a is not None else 0) | (2 if t.b is not None else 0)
    head = _header("IVTR", struct.pack("<BBIIB", kind_idx, stage_idx,
                                       t.in_dim, t.out_dim, flags))
    body = b""
    if t.a is not None:
        body += _pack_f64(t.a)
    if t.b is not None:
        body += _pack_f64(t.b)
    atomic_write(path, head + body)


def load_transform(path) -> LinearTransform:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVTR")
    kind_idx, stage_idx, in_dim, out_dim, flags = struct.unpack_from("<BBIIB", buf, off)
    off += struct.calcsize("<BBIIB")
    a = b = None
    if flags & 1:
        a, off = _unpack_f64(buf, off, (out_dim, in_dim))
    if flags & 2:
        b, off = _unpack_f64(buf, off, (in_dim,))
    return LinearTransform(kind=TRANSFORM_KINDS[kind_idx], a=a, b=b,
                           in_dim=in_dim, out_dim=out_dim,
                           stage=None if stage_idx == 0xFF else PIPELINE_STAGES[stage_idx])


def save_chain_manifest(path, transform_paths) -> None:
    text = "".join(f"{p}\n" for p in transform_paths)
    atomic_write(path, text.encode("utf-8"))


def load_chain(path) -> list[LinearTransform]:
    base = Path(path).parent
    chain = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        p = Path(line)
        chain.append(load_transform(p if p.is_absolute() else base / p))
    return chain


# ---------------------------------------------------------------- plda

def save_plda(path, model: PldaModel) -> None:
    """IVPL: D, F, m, V, Sigma, domain tag."""
    head = _header("IVPL", struct.pack("<IIB", model.dim, model.num_factors,
                                       _DOMAINS.index(model.domain_tag)))
    atomic_write(path, head + _pack_f64(model.m) + _pack_f64(model.v)
                 + _pack_f64(model.sigma))


def load_plda(path) -> PldaModel:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVPL")
    d, f, dom = struct.unpack_from("<IIB", buf, off)
    off += struct.calcsize("<IIB")
    m, off = _unpack_f64(buf, off, (d,))
    v, off = _unpack_f64(buf, off, (d, f))
    sigma, off = _unpack_f64(buf, off, (d, d))
    return PldaModel(m, v, sigma, domain_tag=_DOMAINS[dom])


def save_kernel(path, kernel: ScoringKernel) -> None:
    """IVKN: D, P, Q, c, S_b, S_t, m."""
    d = kernel.p.shape[0]
    head = _header("IVKN", struct.pack("<Id", d, kernel.c))
    atomic_write(path, head + _pack_f64(kernel.p) + _pack_f64(kernel.q)
                 + _pack_f64(kernel.sb) + _pack_f64(kernel.st) + _pack_f64(kernel.m))


def load_kernel(path) -> ScoringKernel:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVKN")
    d, c = struct.unpack_from("<Id", buf, off)
    off += struct.calcsize("<Id")
    p, off = _unpack_f64(buf, off, (d, d))
    q, off = _unpack_f64(buf, off, (d, d))
    sb, off = _unpack_f64(buf, off, (d, d))
    st, off = _unpack_f64(buf, off, (d, d))
    m, off = _unpack_f64(buf, off, (d,))
    return ScoringKernel(p=p, q=q, c=c, sb=sb, st=st, m=m)


# ---------------------------------------------------------------- sad model

def save_sad_model(path, model: SadModel) -> None:
    """IVSD: posterior source (energy or classifier), context, priors, HMM."""
    if isinstance(model.source, EnergyThresholdSource):
        thr = model.source.threshold
        src = struct.pack("<Bdd", 0, float("nan") if thr is None else thr,
                          model.source.temperature)
    else:
        layers = model.source.weights
        src = struct.pack("<BBI", 1, _ACTIVATIONS.index(model.source.activation), len(layers))
        for w, b in zip(layers, model.source.biases):
            src += struct.pack("<II", *w.shape) + _pack_f64(w) + _pack_f64(b)
    head = _header("IVSD", struct.pack("<I", model.context))
    atomic_write(path, head + _pack_f64(model.priors) + _pack_f64(model.transitions) + src)


def load_sad_model(path) -> SadModel:
    buf = Path(path).read_bytes()
    off = _read_header(buf, "IVSD")
    (context,) = struct.unpack_from("<I", buf, off)
    off += 4
    priors, off = _unpack_f64(buf, off, (2,))
    transitions, off = _unpack_f64(buf, off, (2, 2))
    (kind,) = struct.unpack_from("<B", buf, off)
    off += 1
    if kind == 0:
        thr, temp = struct.unpack_from("<dd", buf, off)
        source = EnergyThresholdSource(threshold=None if np.isnan(thr) else thr,
                                       temperature=temp)
    else:
        act_idx, n_layers = struct.unpack_from("<BI", buf, off)
        off += struct.calcsize("<BI")
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            w, off = _unpack_f64(buf, off, (rows, cols))
            b, off = _unpack_f64(buf, off, (cols,))
            weights.append(w)
            biases.append(b)
        source = MlpClassifierSource(weights, biases, _ACTIVATIONS[act_idx])
    return SadModel(source=source, transitions=transitions, priors=priors, context=context)


# ---------------------------------------------------------------- calibration

def save_calibration(path, cal: CalibrationMap) -> None:
    """IVCA text file: scale, offset, training prior."""
    text = f"IVCA {VERSION}\na {cal.a!r}\nb {cal.b!r}\np_tar {cal.p_tar!r}\n"
    atomic_write(path, text.encode("utf-8"))


def load_calibration(path) -> CalibrationMap:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("IVCA"):
        raise DataError(f"{path}: not a calibration file")
    values = {}
    for line in lines[1:]:
        if line.strip():
            key, val = line.split()
            values[key] = float(val)
    return CalibrationMap(a=values["a"], b=values["b"], p_tar=values["p_tar"])


# ---------------------------------------------------------------- manifests & scores

def save_manifest(path, entries: dict) -> None:
    """Utterance-id to path map, one tab-separated pair per line."""
    text = "".join(f"{k}\t{v}\n" for k, v in entries.items())
    atomic_write(path, text.encode("utf-8"))


def load_manifest(path) -> dict:
    entries: dict = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{ln}: expected 'id<TAB>path'")
        entries[parts[0]] = parts[1]
    return entries


def save_trials(path, trials: list[Trial], with_labels: bool = False) -> None:
    lines = []
    for t in trials:
        if with_labels:
            if t.label is None:
                raise DataError(f"trial {t.model_id} {t.test_id} has no label for the key file")
            lines.append(f"{t.model_id} {t.test_id} {t.label}\n")
        else:
            lines.append(f"{t.model_id} {t.test_id}\n")
    atomic_write(path, "".join(lines).encode("utf-8"))


def load_trials(path) -> list[Trial]:
    trials = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) == 2:
            trials.append(Trial(parts[0], parts[1]))
        elif len(parts) == 3:
            trials.append(Trial(parts[0], parts[1], label=parts[2]))
        else:
            raise DataError(f"{path}:{ln}: malformed trial line")
    return trials


def save_scores(path, scored: dict) -> None:
    """(model_id, test_id) -> score, written with 9 decimal places."""
    lines = [f"{m} {t} {s:.9f}\n" for (m, t), s in scored.items()]
    atomic_write(path, "".join(lines).encode("utf-8"))


def load_scores(path) -> dict:
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 'model test score'")
        out[(parts[0], parts[1])] = float(parts[2])
    return out
