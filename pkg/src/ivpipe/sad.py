"""Speech activity detection: frame posteriors smoothed by a 2-state HMM.

The posterior source is pluggable. The required implementation thresholds
frame log-energy; a small feed-forward classifier over stacked filterbank
frames (40 dims, 7 context frames per side by default) is also supported and
can be trained at desk scale with cross-entropy backprop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NoSpeechError
from .features import FeatureMatrix

log = logging.getLogger(__name__)

NONSPEECH, SPEECH = 0, 1


@dataclass(frozen=True)
class EnergyThresholdSource:
    """Sigmoid speech posterior from per-frame mean log filterbank energy.

    With threshold=None the threshold is set per utterance to the midpoint of
    the 5th and 95th energy percentiles.
    """

    threshold: float | None = None
    temperature: float = 1.0

    def posteriors(self, feats: FeatureMatrix, context: int) -> np.ndarray:
        energy = feats.frames.mean(axis=1)
        thr = self.threshold
        if thr is None:
            p5, p95 = np.percentile(energy, [5.0, 95.0])
            thr = 0.5 * (p5 + p95)
        p_speech = 1.0 / (1.0 + np.exp(-(energy - thr) / self.temperature))
        return np.stack([1.0 - p_speech, p_speech], axis=1)


@dataclass
class MlpClassifierSource:
    """Feed-forward speech/non-speech classifier on context-stacked frames."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigError("classifier needs matching, non-empty weight and bias lists")
        if self.weights[-1].shape[1] != 2:
            raise ConfigError("classifier output layer must have 2 units (speech, non-speech)")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def _activate(self, x: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(x, 0.0)
        if self.activation == "sigmoid":
            return 1.0 / (1.0 + np.exp(-x))
        if self.activation == "tanh":
            return np.tanh(x)
        raise ConfigError(f"unknown activation '{self.activation}'")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Softmax posteriors, x shaped (T, input_dim)."""
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = self._activate(h @ w + b)
        logits = h @ self.weights[-1] + self.biases[-1]
        logits = logits - logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        return expl / expl.sum(axis=1, keepdims=True)

    def posteriors(self, feats: FeatureMatrix, context: int) -> np.ndarray:
        stacked = stack_context(feats.frames, context)
        if stacked.shape[1] != self.input_dim:
            raise ConfigError(
                f"classifier expects input dim {self.input_dim}, "
                f"got {stacked.shape[1]} ({feats.dim} dims x {2 * context + 1} frames)"
            )
        return self.forward(stacked)


@dataclass
class SadModel:
    """Posterior source plus 2-state HMM transition matrix and class priors."""

    source: EnergyThresholdSource | MlpClassifierSource
    transitions: np.ndarray = field(
        default_factory=lambda: np.array([[0.99, 0.01], [0.01, 0.99]])
    )
    priors: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    context: int = 7

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.transitions.shape != (2, 2):
            raise ConfigError("SAD HMM needs a 2x2 transition matrix")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-10):
            raise ConfigError("SAD HMM transition rows must sum to 1")
        if np.any(self.transitions <= 0.0) or np.any(self.transitions >= 1.0):
            raise ConfigError("SAD HMM transition probabilities must lie in (0, 1)")
        if self.priors.shape != (2,) or np.any(self.priors <= 0):
            raise ConfigError("SAD priors must be two positive numbers")


def stack_context(frames: np.ndarray, context: int) -> np.ndarray:
    """Concatenate each frame with +/-context neighbours, edge-replicated."""
    if context == 0:
        return frames
    t = frames.shape[0]
    padded = np.concatenate(
        [np.repeat(frames[:1], context, axis=0), frames, np.repeat(frames[-1:], context, axis=0)]
    )
    return np.concatenate([padded[i : i + t] for i in range(2 * context + 1)], axis=1)


def sad_posteriors(feats: FeatureMatrix, model: SadModel) -> np.ndarray:
    """Per-frame (non-speech, speech) log-likelihoods.

    Posteriors from the model's source are converted to log-likelihoods by
    subtracting log class priors.
    """
    post = model.source.posteriors(feats, model.context)
    post = np.clip(post, 1e-12, 1.0 - 1e-12)
    return np.log(post) - np.log(model.priors)[None, :]


def viterbi_decode(loglikes: np.ndarray, transitions: np.ndarray) -> np.ndarray:
    """Most probable state path through the 2-state HMM; ties favour non-speech.

    Returns a boolean mask, True where the decoded state is speech. The start
    distribution is uniform.
    """
    loglikes = np.asarray(loglikes, dtype=np.float64)
    if loglikes.ndim != 2 or loglikes.shape[1] != 2:
        raise DataError(f"expected a T x 2 log-likelihood matrix, got {loglikes.shape}")
    t = loglikes.shape[0]
    log_trans = np.log(np.asarray(transitions, dtype=np.float64))
    t00, t01 = float(log_trans[0, 0]), float(log_trans[0, 1])
    t10, t11 = float(log_trans[1, 0]), float(log_trans[1, 1])
    emit = loglikes.tolist()
    s0, s1 = emit[0][0], emit[0][1]
    back = np.zeros((t, 2), dtype=np.int8)
    back_list = back.tolist()
    for i in range(1, t):
        # argmax over predecessor; state 0 (non-speech) wins ties
        from0, from1 = s0 + t00, s1 + t10
        if from1 > from0:
            new0, b0 = from1 + emit[i][0], 1
        else:
            new0, b0 = from0 + emit[i][0], 0
        from0, from1 = s0 + t01, s1 + t11
        if from1 > from0:
            new1, b1 = from1 + emit[i][1], 1
        else:
            new1, b1 = from0 + emit[i][1], 0
        back_list[i][0] = b0
        back_list[i][1] = b1
        s0, s1 = new0, new1
    state = SPEECH if s1 > s0 else NONSPEECH
    path = np.zeros(t, dtype=np.int64)
    path[-1] = state
    for i in range(t - 1, 0, -1):
        state = back_list[i][state]
        path[i - 1] = state
    return path.astype(bool)


def apply_mask(feats: FeatureMatrix, mask: np.ndarray) -> FeatureMatrix:
    """Keep only true-mask frames and update the speech duration."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (feats.num_frames,):
        raise DataError(
            f"mask length {mask.shape[0]} does not match frame count {feats.num_frames}"
        )
    if not mask.any():
        raise NoSpeechError(f"utterance '{feats.id}': mask drops every frame")
    return FeatureMatrix(feats.frames[mask], feats.frame_shift, id=feats.id)


def compute_speech_mask(feats: FeatureMatrix, model: SadModel) -> np.ndarray:
    """Posterior scoring followed by Viterbi smoothing."""
    return viterbi_decode(sad_posteriors(feats, model), model.transitions)


def train_mlp_sad(features: np.ndarray, labels: np.ndarray,
                  hidden_layers: tuple[int, ...] = (512,) * 6,
                  activation: str = "relu", learning_rate: float = 1e-3,
                  epochs: int = 20, batch_size: int = 256, seed: int = 0) -> MlpClassifierSource:
    """Train the classifier with cross-entropy backprop (Adam updates).

    features: (N, input_dim) stacked-context frames; labels: (N,) in {0, 1}.
    The default architecture is 6 hidden layers of 512 units; tests use much
    smaller stacks.
    """
    rng = np.random.default_rng(seed)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise DataError("features and labels must align (N, D) with (N,)")
    dims = [features.shape[1], *hidden_layers, 2]
    weights = [rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
               for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    model = MlpClassifierSource(weights, biases, activation)

    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            x, y = features[batch], labels[batch]
            acts = [x]
            h = x
            for w, b in zip(weights[:-1], biases[:-1]):
                h = model._activate(h @ w + b)
                acts.append(h)
            logits = h @ weights[-1] + biases[-1]
            logits -= logits.max(axis=1, keepdims=True)
            expl = np.exp(logits)
            probs = expl / expl.sum(axis=1, keepdims=True)
            grad = probs.copy()
            grad[np.arange(len(y)), y] -= 1.0
            grad /= len(y)

            step += 1
            g = grad
            for layer in range(len(weights) - 1, -1, -1):
                gw = acts[layer].T @ g
                gb = g.sum(axis=0)
                if layer > 0:
                    g = g @ weights[layer].T
                    if activation == "relu":
                        g = g * (acts[layer] > 0)
                    elif activation == "sigmoid":
                        g = g * acts[layer] * (1.0 - acts[layer])
                    else:
                        g = g * (1.0 - acts[layer] ** 2)
                for mom, vel, grd, param in ((m_w, v_w, gw, weights), (m_b, v_b, gb, biases)):
                    mom[layer] = beta1 * mom[layer] + (1 - beta1) * grd
                    vel[layer] = beta2 * vel[layer] + (1 - beta2) * grd ** 2
                    mhat = mom[layer] / (1 - beta1 ** step)
                    vhat = vel[layer] / (1 - beta2 ** step)
                    param[layer] = param[layer] - learning_rate * mhat / (np.sqrt(vhat) + eps)
    return MlpClassifierSource(weights, biases, activation)
