"""Knowledge-preserving watermark learning on a small tanh MLP.

Training happens in two phases. :func:`pretrain` fits the whole network
with class-weighted cross-entropy on clean features. :func:`kpwl_adapt`
then continues on watermarked features. The first layer (front end) and
the last layer (classifier) stay frozen, and the loss becomes::

    total = task + beta * kd + mu * l2sp

``kd`` is the symmetric KL divergence between a frozen teacher snapshot
and the student. ``l2sp`` is the squared distance of the trainable
parameters from their values at the start of adaptation. Every gradient
is written out by hand; :func:`gradient_check` compares them with central
finite differences.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, ParseError
from .evaluation import ScoreSet, Trial

CLASSES = ("bonafide", "spoof")
PROB_FLOOR = 1e-12
CKPT_MAGIC = "KPWLCKPT v1"


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Feature rows with integer labels (0 = bonafide, 1 = spoof)."""

    features: np.ndarray
    labels: np.ndarray
    utt_ids: tuple = ()

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise InvalidInputError("features and labels disagree in length")
        if np.any((y != 0) & (y != 1)):
            raise InvalidInputError("labels must be 0 (bonafide) or 1 (spoof)")
        ids = tuple(self.utt_ids) or tuple(f"s{i:06d}" for i in range(len(y)))
        if len(ids) != len(y):
            raise InvalidInputError("utt_ids disagree in length")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "utt_ids", ids)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]


def write_features(data: FeatureSet, path) -> None:
    with open(path, "w") as fh:
        for utt, label, row in zip(data.utt_ids, data.labels, data.features):
            vals = "\t".join(repr(float(v)) for v in row)
            fh.write(f"{utt}\t{CLASSES[label]}\t{vals}\n")


def read_features(path) -> FeatureSet:
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 3:
            raise ParseError("feature lines need utt_id, label and at least one value", lineno)
        if cols[1] not in CLASSES:
            raise ParseError(f"unknown label {cols[1]!r}", lineno)
        try:
            rows.append([float(v) for v in cols[2:]])
        except ValueError:
            raise ParseError("non-numeric feature value", lineno) from None
        if rows and len(rows[-1]) != len(rows[0]):
            raise ParseError("feature width changes between lines", lineno)
        ids.append(cols[0])
        labels.append(CLASSES.index(cols[1]))
    if not rows:
        raise ParseError("feature file is empty")
    return FeatureSet(np.array(rows), np.array(labels), tuple(ids))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class KpwlModel:
    """Stack of affine layers, tanh on hidden layers, log-softmax output."""

    weights: list
    biases: list
    frozen: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise InvalidInputError("weights and biases disagree in layer count")
        if not self.frozen:
            self.frozen = [False] * len(self.weights)
        if len(self.frozen) != len(self.weights):
            raise InvalidInputError("one freeze flag per layer is required")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError("layer shapes are inconsistent")
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise InvalidInputError("adjacent layers do not chain")
        if self.weights[-1].shape[1] != len(CLASSES):
            raise InvalidInputError("the output layer must have two units")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "KpwlModel":
        return KpwlModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.frozen))

    def trainable(self) -> list[int]:
        return [i for i, f in enumerate(self.frozen) if not f]

    def params(self):
        """Yield ``(layer, kind, array)`` for every parameter array."""
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield i, "W", w
            yield i, "b", b

    def layer_digest(self, layer: int) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weights[layer]).tobytes())
        h.update(np.ascontiguousarray(self.biases[layer]).tobytes())
        return h.hexdigest()

    def forward(self, x: np.ndarray):
        """Return hidden activations (input first) and output log-probabilities."""
        if x.shape[1] != self.input_width:
            raise InvalidInputError(f"expected {self.input_width} features, got {x.shape[1]}")
        acts = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        logits = h @ self.weights[-1] + self.biases[-1]
        return acts, log_softmax(logits)

    def log_proba(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[1]


def init_model(sizes: Sequence[int], seed: int = 0) -> KpwlModel:
    """Glorot-uniform weights, zero biases. ``sizes`` runs input -> 2 outputs."""
    if len(sizes) < 4:
        raise ConfigError("need at least three layers (input, two hidden widths, output)")
    if sizes[-1] != len(CLASSES):
        raise ConfigError("the last size must be 2")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return KpwlModel(weights, biases)


def freeze_ends(model: KpwlModel) -> KpwlModel:
    """Copy of ``model`` with its first and last layers frozen."""
    out = model.copy()
    out.frozen = [i in (0, out.n_layers - 1) for i in range(out.n_layers)]
    return out


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _sym_kl_rows(p_t: np.ndarray, p_s: np.ndarray) -> np.ndarray:
    t = np.clip(p_t, PROB_FLOOR, 1.0)
    s = np.clip(p_s, PROB_FLOOR, 1.0)
    log_ratio = np.log(t) - np.log(s)
    return np.sum(t * log_ratio, axis=-1) - np.sum(s * log_ratio, axis=-1)


def kd_loss(p_teacher, p_student) -> float:
    """KL(teacher || student) + KL(student || teacher) for one probability pair."""
    p_t = np.asarray(p_teacher, dtype=np.float64)
    p_s = np.asarray(p_student, dtype=np.float64)
    if p_t.shape != p_s.shape or p_t.ndim != 1:
        raise InvalidInputError("kd_loss takes two probability vectors of equal length")
    for p in (p_t, p_s):
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InvalidInputError("probability vectors must be non-negative and sum to 1")
    return max(float(_sym_kl_rows(p_t, p_s)), 0.0)


@dataclass(frozen=True)
class AnchorSnapshot:
    """Parameters at the start of adaptation plus the frozen teacher."""

    w0: tuple  # ((W, b), ...) per layer, copies
    teacher: KpwlModel

    @classmethod
    def capture(cls, model: KpwlModel) -> "AnchorSnapshot":
        teacher = model.copy()
        w0 = tuple((w.copy(), b.copy()) for w, b in zip(model.weights, model.biases))
        for w, b in w0:
            w.setflags(write=False)
            b.setflags(write=False)
        return cls(w0, teacher)


def l2sp_penalty(model: KpwlModel, anchor: AnchorSnapshot) -> float:
    """Sum of squared deviations of the trainable parameters from the anchor."""
    if len(anchor.w0) != model.n_layers:
        raise InvalidInputError("anchor and model differ in layer count")
    total = 0.0
    for i in model.trainable():
        w0, b0 = anchor.w0[i]
        if w0.shape != model.weights[i].shape or b0.shape != model.biases[i].shape:
            raise InvalidInputError(f"anchor layer {i} shape mismatch")
        total += float(np.sum((model.weights[i] - w0) ** 2) + np.sum((model.biases[i] - b0) ** 2))
    return total


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Weights inversely proportional to class frequency, N / (2 * N_c)."""
    counts = np.bincount(labels, minlength=len(CLASSES)).astype(np.float64)
    if np.any(counts == 0):
        raise InvalidInputError("both classes are required")
    return len(labels) / (len(CLASSES) * counts)


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    kd: float
    l2sp: float
    total: float
    beta: float
    mu: float
    epoch: int = 0
    step: int = 0


def loss_and_grads(model: KpwlModel, x: np.ndarray, y: np.ndarray, weights: np.ndarray,
                   beta: float = 0.0, mu: float = 0.0,
                   anchor: Optional[AnchorSnapshot] = None, task_weight: float = 1.0,
                   need_grads: bool = True, l2sp_grad: bool = True):
    """Loss terms for one batch and their gradients for every parameter.

    Frozen layers get all-zero gradients. ``anchor`` is required whenever
    ``beta`` or ``mu`` is non-zero. ``l2sp_grad=False`` leaves the L2-SP
    term out of the gradients (the optimiser then applies it as a
    proximal step); the reported loss always includes it.
    """
    if (beta or mu) and anchor is None:
        raise ConfigError("the KD and L2-SP terms need an anchor snapshot")
    acts, logp = model.forward(x)
    p = np.exp(logp)
    n = x.shape[0]
    onehot = np.eye(len(CLASSES))[y]

    w_i = weights[y]
    w_sum = w_i.sum()
    task = float(-(w_i * logp[np.arange(n), y]).sum() / w_sum)
    dz = task_weight * (w_i / w_sum)[:, None] * (p - onehot)

    kd = 0.0
    if anchor is not None:
        p_t = np.exp(anchor.teacher.log_proba(x))
        kd = float(np.mean(_sym_kl_rows(p_t, p)))
        if beta:
            t = np.clip(p_t, PROB_FLOOR, 1.0)
            s = np.clip(p, PROB_FLOOR, 1.0)
            # d/ds of sum[t log t/s] + sum[s log s/t]; zero where s was clamped
            g_s = (-t / s + np.log(s) - np.log(t) + 1.0) * (p > PROB_FLOOR)
            dz += beta / n * p * (g_s - np.sum(p * g_s, axis=1, keepdims=True))

    l2sp = l2sp_penalty(model, anchor) if anchor is not None else 0.0
    total = task_weight * task + beta * kd + mu * l2sp
    breakdown = LossBreakdown(task, kd, l2sp, total, beta, mu)
    if not need_grads:
        return breakdown, None

    grads_w = [np.zeros_like(w) for w in model.weights]
    grads_b = [np.zeros_like(b) for b in model.biases]
    delta = dz
    for i in range(model.n_layers - 1, -1, -1):
        gw = acts[i].T @ delta
        gb = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] ** 2)
        if model.frozen[i]:
            continue
        if mu and anchor is not None and l2sp_grad:
            gw = gw + 2.0 * mu * (model.weights[i] - anchor.w0[i][0])
            gb = gb + 2.0 * mu * (model.biases[i] - anchor.w0[i][1])
        grads_w[i], grads_b[i] = gw, gb
    return breakdown, (grads_w, grads_b)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0


PRETRAIN_DEFAULTS = TrainConfig(lr=1e-2, epochs=50)
ADAPT_DEFAULTS = TrainConfig(lr=2e-2, epochs=2)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _sgd_step(model: KpwlModel, grads, lr: float, mu: float = 0.0,
              anchor: Optional[AnchorSnapshot] = None) -> None:
    """Gradient step; with ``mu`` the anchoring term is applied in closed form.

    The proximal update minimises ``mu * ||w - w0||^2 + ||w - v||^2 / (2 lr)``
    for the plain-gradient point ``v``. It agrees with a gradient step to
    first order and stays stable for any ``mu``.
    """
    grads_w, grads_b = grads
    shrink = 1.0 / (1.0 + 2.0 * lr * mu)
    for i in model.trainable():
        w = model.weights[i] - lr * grads_w[i]
        b = model.biases[i] - lr * grads_b[i]
        if mu:
            w0, b0 = anchor.w0[i]
            w = w0 + (w - w0) * shrink
            b = b0 + (b - b0) * shrink
        model.weights[i][...] = w
        model.biases[i][...] = b


def _check_config(config: TrainConfig):
    if config.lr <= 0 or config.epochs < 0 or config.batch_size < 1:
        raise ConfigError(f"invalid training settings {config}")


def pretrain(model: KpwlModel, data: FeatureSet, config: TrainConfig = PRETRAIN_DEFAULTS) -> KpwlModel:
    """Fit every layer with class-weighted cross-entropy and mini-batch SGD."""
    _check_config(config)
    if any(model.frozen):
        raise ConfigError("pretraining expects no frozen layers")
    weights = class_weights(data.labels)
    out = model.copy()
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        for idx in _batches(len(data), config.batch_size, rng):
            _, grads = loss_and_grads(out, data.features[idx], data.labels[idx], weights)
            _sgd_step(out, grads, config.lr)
    return out


def kpwl_adapt(model: KpwlModel, data: FeatureSet, beta: float = 0.3, mu: float = 1e-4,
               config: TrainConfig = ADAPT_DEFAULTS, task_weight: float = 1.0,
               anchor: Optional[AnchorSnapshot] = None):
    """Adapt the non-frozen layers of a pretrained model to watermarked data.

    Returns the adapted copy and one :class:`LossBreakdown` per mini-batch,
    each measured before that batch's update. Teacher and student see the
    same inputs. The anchor defaults to a snapshot of ``model`` taken here.
    """
    _check_config(config)
    if not model.trainable():
        raise ConfigError("no trainable layers: every layer is frozen")
    weights = class_weights(data.labels)
    student = model.copy()
    if anchor is None:
        anchor = AnchorSnapshot.capture(model)
    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    for epoch in range(config.epochs):
        for idx in _batches(len(data), config.batch_size, rng):
            terms, grads = loss_and_grads(student, data.features[idx], data.labels[idx], weights,
                                          beta, mu, anchor, task_weight, l2sp_grad=False)
            history.append(LossBreakdown(terms.task, terms.kd, terms.l2sp, terms.total,
                                         beta, mu, epoch, step))
            _sgd_step(student, grads, config.lr, mu, anchor)
            step += 1
    return student, history


def write_training_log(history: Sequence[LossBreakdown], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch\tstep\ttask\tkd\tl2sp\ttotal\tbeta\tmu\n")
        for h in history:
            fh.write(f"{h.epoch}\t{h.step}\t{h.task!r}\t{h.kd!r}\t{h.l2sp!r}\t{h.total!r}"
                     f"\t{h.beta!r}\t{h.mu!r}\n")


# ---------------------------------------------------------------------------
# checks and scoring
# ---------------------------------------------------------------------------

def gradient_check(model: KpwlModel, x: np.ndarray, y: np.ndarray, beta: float, mu: float,
                   anchor: Optional[AnchorSnapshot] = None, step: float = 1e-5,
                   seed: int = 0) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Without an explicit anchor, the teacher and L2-SP anchor are a randomly
    perturbed copy of ``model`` so that every loss term has a non-zero
    gradient. Entries whose magnitude sum is below 1e-8 contribute their
    absolute error instead.
    """
    if len(y) == 0:
        raise InvalidInputError("gradient check needs a non-empty batch")
    if anchor is None:
        rng = np.random.default_rng(seed)
        ref = model.copy()
        for w, b in zip(ref.weights, ref.biases):
            w += 0.1 * rng.standard_normal(w.shape)
            b += 0.1 * rng.standard_normal(b.shape)
        anchor = AnchorSnapshot.capture(ref)
    weights = class_weights(y) if len(np.unique(y)) == 2 else np.ones(len(CLASSES))
    _, (gw, gb) = loss_and_grads(model, x, y, weights, beta, mu, anchor)
    probe = model.copy()
    worst = 0.0
    for i in probe.trainable():
        for arr, analytic in ((probe.weights[i], gw[i]), (probe.biases[i], gb[i])):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = loss_and_grads(probe, x, y, weights, beta, mu, anchor, need_grads=False)[0].total
                arr[idx] = orig - step
                down = loss_and_grads(probe, x, y, weights, beta, mu, anchor, need_grads=False)[0].total
                arr[idx] = orig
                numeric = (up - down) / (2 * step)
                err = abs(analytic[idx] - numeric)
                denom = abs(analytic[idx]) + abs(numeric)
                worst = max(worst, err if denom < 1e-8 else err / denom)
    return worst


def score_dataset(model: KpwlModel, data: FeatureSet) -> ScoreSet:
    """Score each trial as log P(bonafide) - log P(spoof)."""
    if data.width != model.input_width:
        raise InvalidInputError(f"model expects {model.input_width} features, data has {data.width}")
    logp = model.log_proba(data.features)
    scores = logp[:, 0] - logp[:, 1]
    return ScoreSet(tuple(Trial(u, float(s), CLASSES[lab])
                          for u, s, lab in zip(data.utt_ids, scores, data.labels)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: KpwlModel, path) -> None:
    """Text tensor dump: shapes, freeze flags and row-major values per layer."""
    lines = [CKPT_MAGIC, f"layers\t{model.n_layers}", "activation\ttanh"]
    for i, (w, b, f) in enumerate(zip(model.weights, model.biases, model.frozen)):
        lines.append(f"layer\t{i}\t{w.shape[0]}\t{w.shape[1]}\tfrozen={int(f)}")
        lines.append("W\t" + " ".join(repr(float(v)) for v in w.ravel()))
        lines.append("b\t" + " ".join(repr(float(v)) for v in b.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> KpwlModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise ParseError(f"expected header {CKPT_MAGIC!r}", 1)
    try:
        n_layers = int(lines[1].split("\t")[1])
        if lines[2] != "activation\ttanh":
            raise ParseError("only tanh checkpoints are supported", 3)
        weights, biases, frozen = [], [], []
        pos = 3
        for i in range(n_layers):
            head = lines[pos].split("\t")
            if head[0] != "layer" or int(head[1]) != i:
                raise ParseError("expected layer header", pos + 1)
            rows, cols = int(head[2]), int(head[3])
            frozen.append(head[4] == "frozen=1")
            w_line, b_line = lines[pos + 1], lines[pos + 2]
            if not (w_line.startswith("W\t") and b_line.startswith("b\t")):
                raise ParseError("expected W and b lines", pos + 2)
            w = np.array([float(v) for v in w_line[2:].split()]).reshape(rows, cols)
            b = np.array([float(v) for v in b_line[2:].split()]).reshape(cols)
            weights.append(w)
            biases.append(b)
            pos += 3
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from None
    return KpwlModel(weights, biases, frozen)
