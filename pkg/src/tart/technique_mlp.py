"""Feedforward technique classifier: 4x800 ReLU layers with batch norm, softmax head.

Each hidden layer is ``affine -> batch norm -> ReLU -> dropout``. Training is plain
mini-batch SGD on cross-entropy plus ``l2_lambda * sum(W**2)`` over weight
matrices, with early stopping on a stratified 80/20 validation split.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .score_model import TechniqueLabel

DEFAULT_WIDTHS = (180, 800, 800, 800, 800, 10)
N_CLASSES = len(TechniqueLabel)
MODEL_MAGIC = b"TARTMLP1"
FORMAT_VERSION = 1

# Classes present in IDMT-style test sets; evaluation masks the rest.
IDMT_CLASSES = (
    TechniqueLabel.PICKING, TechniqueLabel.SLIDE, TechniqueLabel.BEND, TechniqueLabel.VIBRATO,
    TechniqueLabel.PALM_MUTE, TechniqueLabel.HARMONIC, TechniqueLabel.OTHER,
)


class ModelFormatError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class HiddenLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    PARAMS = ("weight", "bias", "gamma", "beta")
    STATE = ("running_mean", "running_var")


@dataclass
class MlpModel:
    hidden: list[HiddenLayer]
    out_weight: np.ndarray
    out_bias: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        fan_in = self.hidden[0].weight.shape[0] if self.hidden else self.out_weight.shape[0]
        for i, layer in enumerate(self.hidden):
            n_out = layer.weight.shape[1]
            if layer.weight.shape[0] != fan_in:
                raise ValueError(f"hidden layer {i}: expected fan-in {fan_in}, got {layer.weight.shape[0]}")
            for name in ("bias", "gamma", "beta", "running_mean", "running_var"):
                if getattr(layer, name).shape != (n_out,):
                    raise ValueError(f"hidden layer {i}: {name} must have shape ({n_out},)")
            if np.any(layer.running_var <= 0):
                raise ValueError(f"hidden layer {i}: running variances must be positive")
            fan_in = n_out
        if self.out_weight.shape[0] != fan_in or self.out_bias.shape != (self.out_weight.shape[1],):
            raise ValueError("output layer shape does not chain")

    @property
    def widths(self) -> tuple[int, ...]:
        n_in = self.hidden[0].weight.shape[0] if self.hidden else self.out_weight.shape[0]
        return (n_in,) + tuple(layer.weight.shape[1] for layer in self.hidden) + (self.out_weight.shape[1],)

    @property
    def dtype(self):
        return self.out_weight.dtype

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.hidden):
            out += [(f"hidden{i}.{name}", getattr(layer, name)) for name in HiddenLayer.PARAMS]
        out += [("out.weight", self.out_weight), ("out.bias", self.out_bias)]
        return out

    def weight_matrices(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.hidden] + [self.out_weight]

    def astype(self, dtype) -> "MlpModel":
        m = copy.deepcopy(self)
        for layer in m.hidden:
            for name in HiddenLayer.PARAMS + HiddenLayer.STATE:
                setattr(layer, name, getattr(layer, name).astype(dtype))
        m.out_weight = m.out_weight.astype(dtype)
        m.out_bias = m.out_bias.astype(dtype)
        return m


def init_model(widths: Sequence[int] = DEFAULT_WIDTHS, seed: int = 0, dtype=np.float32) -> MlpModel:
    """He-uniform weights, zero biases, unit batch-norm scale."""
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = np.random.default_rng(seed)

    def he(n_in, n_out):
        limit = np.sqrt(6.0 / n_in)
        return rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)

    hidden = []
    for n_in, n_out in zip(widths[:-2], widths[1:-1]):
        hidden.append(HiddenLayer(he(n_in, n_out), np.zeros(n_out, dtype), np.ones(n_out, dtype),
                                  np.zeros(n_out, dtype), np.zeros(n_out, dtype), np.ones(n_out, dtype)))
    return MlpModel(hidden, he(widths[-2], widths[-1]), np.zeros(widths[-1], dtype))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(model: MlpModel, X: np.ndarray, train: bool, dropout_rate: float = 0.0,
             rng: Optional[np.random.Generator] = None):
    X = np.asarray(X, dtype=model.dtype)
    if X.ndim != 2 or X.shape[1] != model.widths[0]:
        raise ValueError(f"expected input of width {model.widths[0]}, got shape {X.shape}")
    caches = []
    h = X
    for layer in model.hidden:
        z = h @ layer.weight + layer.bias
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu, var = layer.running_mean, layer.running_var
        inv_std = 1.0 / np.sqrt(var + model.eps)
        zhat = (z - mu) * inv_std
        a = np.maximum(layer.gamma * zhat + layer.beta, 0.0)
        mask = None
        if train and dropout_rate > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs a seeded generator")
            mask = (rng.random(a.shape) >= dropout_rate).astype(a.dtype) / (1.0 - dropout_rate)
            a = a * mask
        caches.append((h, zhat, inv_std, a, mask, mu, var))
        h = a
    logits = h @ model.out_weight + model.out_bias
    return logits, h, caches


def forward(model: MlpModel, x, mode: str = "eval", dropout_rate: float = 0.0,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Class probabilities for one feature vector (or a batch, row-wise).

    ``mode="train"`` normalises with the batch's own statistics and applies
    dropout; ``"eval"`` uses running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    single = x.ndim == 1
    logits, _, _ = _forward(model, x[None, :] if single else x, mode == "train", dropout_rate, rng)
    probs = softmax(logits)
    return probs[0] if single else probs


def predict(model: MlpModel, X, allowed: Optional[Iterable[TechniqueLabel]] = None) -> np.ndarray:
    """Argmax class indices; ``allowed`` restricts the decision to a class subset."""
    probs = forward(model, np.atleast_2d(X))
    if allowed is not None:
        mask = np.zeros(probs.shape[1], dtype=bool)
        mask[[TechniqueLabel(c).index for c in allowed]] = True
        probs = np.where(mask, probs, -1.0)
    return probs.argmax(axis=1)


def loss_and_grads(model: MlpModel, X, y, l2_lambda: float = 0.0, dropout_rate: float = 0.0,
                   rng: Optional[np.random.Generator] = None, train: bool = True):
    """Mean cross-entropy + L2 penalty, and gradients keyed like ``named_parameters``."""
    loss, grads, probs, _ = _loss_grads(model, X, y, l2_lambda, dropout_rate, rng, train)
    return loss, grads, probs


def _loss_grads(model, X, y, l2_lambda, dropout_rate, rng, train):
    y = np.asarray(y, dtype=int)
    logits, h_last, caches = _forward(model, X, train, dropout_rate, rng)
    probs = softmax(logits)
    n = len(y)
    ce = -np.mean(np.log(np.maximum(probs[np.arange(n), y], 1e-300)))
    l2 = sum(float(np.sum(W.astype(np.float64) ** 2)) for W in model.weight_matrices())
    loss = ce + l2_lambda * l2

    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits = (dlogits / n).astype(model.dtype)
    grads = {
        "out.weight": h_last.T @ dlogits + 2 * l2_lambda * model.out_weight,
        "out.bias": dlogits.sum(axis=0),
    }
    dh = dlogits @ model.out_weight.T
    for i in reversed(range(len(model.hidden))):
        layer = model.hidden[i]
        h_in, zhat, inv_std, a, mask, _, _ = caches[i]
        if mask is not None:
            dh = dh * mask
        dy = dh * ((layer.gamma * zhat + layer.beta) > 0)
        grads[f"hidden{i}.gamma"] = (dy * zhat).sum(axis=0)
        grads[f"hidden{i}.beta"] = dy.sum(axis=0)
        dzhat = dy * layer.gamma
        if train:
            m = dzhat.shape[0]
            dz = inv_std / m * (m * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
        else:
            dz = dzhat * inv_std
        grads[f"hidden{i}.weight"] = h_in.T @ dz + 2 * l2_lambda * layer.weight
        grads[f"hidden{i}.bias"] = dz.sum(axis=0)
        dh = dz @ layer.weight.T
    return loss, grads, probs, caches


def gradient_errors(model: MlpModel, X, y, l2_lambda: float = 0.0, h: float = 1e-5,
                    train: bool = True) -> dict[str, tuple[float, float]]:
    """Per-parameter ``(max_abs_err, max_rel_err)`` of analytic vs central-difference gradients.

    Runs on a float64 copy. Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``;
    the floor keeps exactly-zero gradients (biases feeding batch norm) from
    turning round-off into a spurious 100% error.
    """
    m = model.astype(np.float64)
    X = np.asarray(X, dtype=np.float64)
    _, analytic, _ = loss_and_grads(m, X, y, l2_lambda, train=train)
    out = {}
    for name, param in m.named_parameters():
        numeric = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + h
            lp, _, _ = loss_and_grads(m, X, y, l2_lambda, train=train)
            param[idx] = orig - h
            lm, _, _ = loss_and_grads(m, X, y, l2_lambda, train=train)
            param[idx] = orig
            numeric[idx] = (lp - lm) / (2 * h)
        diff = np.abs(analytic[name] - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic[name]), np.abs(numeric)), 1e-6)
        out[name] = (float(diff.max(initial=0.0)), float((diff / denom).max(initial=0.0)))
    return out


def gradient_check(model: MlpModel, X, y, l2_lambda: float = 0.0, h: float = 1e-5) -> float:
    """Max relative error over all parameters (train-mode batch norm, no dropout)."""
    return max(rel for _, rel in gradient_errors(model, X, y, l2_lambda, h).values())


# --- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    l2_lambda: float = 1e-4
    dropout_rate: float = 0.2
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stopped_early: bool = False


def stratified_split(y: np.ndarray, val_fraction: float, rng: np.random.Generator):
    train_idx, val_idx = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.nonzero(y == c)[0])
        n_val = int(round(val_fraction * len(idx))) if len(idx) > 1 else 0
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx, dtype=int)), np.sort(np.array(val_idx, dtype=int))


def _batches(idx: np.ndarray, batch_size: int) -> list[np.ndarray]:
    out = [idx[i:i + batch_size] for i in range(0, len(idx), batch_size)]
    # batch norm cannot use a batch of one; fold it into its neighbour
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def train(model: MlpModel, X, y, cfg: TrainConfig = TrainConfig()) -> tuple[MlpModel, TrainHistory]:
    """Train a copy of ``model``; returns the best-validation checkpoint and the history.

    Stops once validation loss has failed to improve for more than
    ``cfg.patience`` consecutive epochs, so a run that stops early lasts exactly
    ``best_epoch + patience + 1`` epochs.
    """
    X = np.asarray(X, dtype=model.dtype)
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = stratified_split(y, cfg.val_fraction, rng)
    model = copy.deepcopy(model)
    best = copy.deepcopy(model)
    best_loss = np.inf
    history = TrainHistory()
    wait = 0

    for epoch in range(1, cfg.max_epochs + 1):
        batch_losses = []
        for batch in _batches(rng.permutation(train_idx), cfg.batch_size):
            loss, grads, _, caches = _loss_grads(model, X[batch], y[batch], cfg.l2_lambda,
                                                 cfg.dropout_rate, rng, True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} in epoch {epoch}; lower learning_rate "
                    f"(currently {cfg.learning_rate:g}) or l2_lambda ({cfg.l2_lambda:g})")
            batch_losses.append(loss)
            m = model.momentum
            for layer, (*_, mu, var) in zip(model.hidden, caches):
                layer.running_mean = ((1 - m) * layer.running_mean + m * mu).astype(model.dtype)
                layer.running_var = ((1 - m) * layer.running_var + m * var).astype(model.dtype)
            for name, param in model.named_parameters():
                param -= cfg.learning_rate * grads[name].astype(param.dtype)

        train_loss = float(np.mean(batch_losses))
        train_acc = float(np.mean(predict(model, X[train_idx]) == y[train_idx]))
        if len(val_idx):
            val_loss, _, _ = loss_and_grads(model, X[val_idx], y[val_idx], 0.0, train=False)
            val_loss = float(val_loss)
        else:
            val_loss = train_loss
        history.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                               "train_acc": train_acc})
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"validation loss became {val_loss} in epoch {epoch}; "
                                        f"lower learning_rate (currently {cfg.learning_rate:g})")
        if val_loss < best_loss:
            best_loss = val_loss
            best = copy.deepcopy(model)
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait > cfg.patience:
                history.stopped_early = True
                break
    return best, history


# --- persistence ----------------------------------------------------------------


def save_model(model: MlpModel) -> bytes:
    """``TARTMLP1`` | u32 preamble length | JSON preamble | little-endian f32 arrays."""
    preamble = json.dumps({"version": FORMAT_VERSION, "widths": list(model.widths),
                           "eps": model.eps, "momentum": model.momentum}).encode()
    parts = [MODEL_MAGIC, struct.pack("<I", len(preamble)), preamble]
    for layer in model.hidden:
        parts += [getattr(layer, n).astype("<f4").tobytes() for n in HiddenLayer.PARAMS + HiddenLayer.STATE]
    parts += [model.out_weight.astype("<f4").tobytes(), model.out_bias.astype("<f4").tobytes()]
    return b"".join(parts)


def load_model(data: bytes) -> MlpModel:
    if len(data) < 12 or data[:8] != MODEL_MAGIC:
        raise ModelFormatError("not a TARTMLP1 weight file")
    (plen,) = struct.unpack("<I", data[8:12])
    if 12 + plen > len(data):
        raise ModelFormatError("truncated preamble")
    try:
        meta = json.loads(data[12:12 + plen])
    except ValueError as e:
        raise ModelFormatError(f"bad preamble: {e}") from None
    if meta.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported weight-file version {meta.get('version')}")
    widths = [int(w) for w in meta["widths"]]
    sizes = []
    for n_in, n_out in zip(widths[:-2], widths[1:-1]):
        sizes += [(n_in, n_out)] + [(n_out,)] * 5
    sizes += [(widths[-2], widths[-1]), (widths[-1],)]
    expected = 12 + plen + 4 * sum(int(np.prod(s)) for s in sizes)
    if len(data) != expected:
        raise ModelFormatError(f"expected {expected} bytes, got {len(data)} (truncated or corrupt)")
    pos = 12 + plen
    arrays = []
    for shape in sizes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32))
        pos += 4 * n
    hidden = [HiddenLayer(*arrays[6 * i:6 * i + 6]) for i in range(len(widths) - 2)]
    return MlpModel(hidden, arrays[-2], arrays[-1], float(meta["eps"]), float(meta["momentum"]))


# --- label unification -------------------------------------------------------------

_L = TechniqueLabel
LABEL_TABLE: dict[str, dict[str, TechniqueLabel]] = {
    "agpt": {
        "pick over soundhole": _L.PICKING,
        "pick near bridge": _L.PICKING,
        "palm mute": _L.PALM_MUTE,
        "natural harmonics": _L.HARMONIC,
        "percussive": _L.OTHER,
    },
    "idmt": {
        "picked": _L.PICKING,
        "slide": _L.SLIDE,
        "bending": _L.BEND,
        "vibrato": _L.VIBRATO,
        "palm mute": _L.PALM_MUTE,
        "harmonics": _L.HARMONIC,
        "dead note": _L.OTHER,
    },
    "magcil": {
        "sweep picking": _L.SWEEP_PICKING,
        "alt. picking": _L.ALTERNATE_PICKING,
        "hammer-on": _L.LEGATO,
        "pull-off": _L.LEGATO,
        "legato": _L.LEGATO,
        "slide": _L.SLIDE,
        "bending": _L.BEND,
        "vibrato": _L.VIBRATO,
        "tapping": _L.OTHER,
    },
}


def _norm_label(raw: str) -> str:
    return " ".join(raw.strip().lower().replace("_", " ").split())


def unify_label(source_dataset: str, raw_label: str) -> TechniqueLabel:
    """Map a dataset-specific technique name onto the 10-class taxonomy.

    Unified names themselves (``"bend"``, ``"sweep_picking"``...) map to their
    own class; anything else unknown becomes ``other``. Never raises: an
    unrecognised dataset name simply has no table entries.
    """
    table = LABEL_TABLE.get(source_dataset.strip().lower(), {})
    key = _norm_label(raw_label)
    if key in table:
        return table[key]
    for label in TechniqueLabel:
        if key == _norm_label(label.value):
            return label
    return TechniqueLabel.OTHER
