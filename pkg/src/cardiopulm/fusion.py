"""MLP fusion head over [z_card; z_reason; z_lung] with a sigmoid output.

Plain numpy with hand-written backprop. Inputs are standardized with the
training-set mean and scale, which are stored with the weights so a params
file is self-contained. Training uses Adam with decoupled weight decay,
per-epoch cosine annealing, global gradient-norm clipping and early stopping
on validation AUC.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, SchemaError, ValidationError, VersionMismatchError
from .evaluation import auc

log = logging.getLogger(__name__)

EPS = 1e-7
PARAMS_FORMAT = "cardiopulm-fusion-params"
PARAMS_VERSION = 1


@dataclass
class FusionInput:
    z_card: np.ndarray
    z_reason: np.ndarray
    z_lung: np.ndarray
    subject_id: str = ""
    scan_id: str = ""
    label: int | None = None

    def vector(self) -> np.ndarray:
        x = np.concatenate([np.ravel(self.z_card), np.ravel(self.z_reason), np.ravel(self.z_lung)]).astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"non-finite fusion input for scan {self.scan_id!r}")
        return x


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    scale: np.ndarray
    blocks: list[tuple[str, int]] = field(default_factory=list)
    kb_version: str = ""
    channels: list[str] = field(default_factory=list)
    rng_seed: int = 0
    version: int = PARAMS_VERSION

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.blocks = [(str(n), int(d)) for n, d in self.blocks] or [("input", self.d_in)]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("params need one bias per weight matrix")
        prev = self.d_in
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValidationError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            prev = w.shape[1]
        if prev != 1:
            raise ValidationError("output layer must have width 1")
        if self.mean.shape != (self.d_in,) or self.scale.shape != (self.d_in,) or np.any(self.scale <= 0):
            raise ValidationError("standardization mean/scale must match the input width, scale > 0")
        if sum(d for _, d in self.blocks) != self.d_in:
            raise ValidationError(f"block layout {self.blocks} does not sum to D_in={self.d_in}")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise NumericError("non-finite model parameters")

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.d_in] + [w.shape[1] for w in self.weights]

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, d in self.blocks:
            out[name] = slice(start, start + d)
            start += d
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.mean.copy(),
                           self.scale.copy(), list(self.blocks), self.kb_version, list(self.channels),
                           self.rng_seed, self.version)


def init_params(layer_sizes, seed: int = 0, mean=None, scale=None, **meta) -> ModelParams:
    """Xavier-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    d = layer_sizes[0]
    return ModelParams(weights, biases, np.zeros(d) if mean is None else mean,
                       np.ones(d) if scale is None else scale, rng_seed=seed, **meta)


def _as_matrix(params: ModelParams, x) -> np.ndarray:
    if isinstance(x, FusionInput):
        x = x.vector()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValidationError(f"fusion input width {x.shape[-1]} != model D_in {params.d_in}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite fusion input")
    return x


def _forward_cache(params: ModelParams, x: np.ndarray):
    h = (x - params.mean) / params.scale
    acts = [h]
    pre = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(params.weights) - 1 else z
        acts.append(h)
    return acts, pre


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logits(params: ModelParams, x) -> np.ndarray:
    acts, _ = _forward_cache(params, _as_matrix(params, x))
    return acts[-1][:, 0]


def forward(params: ModelParams, x) -> float:
    """Predicted probability for a single input."""
    m = _as_matrix(params, x)
    if m.shape[0] != 1:
        raise ValidationError("forward takes one input; use predict_batch for many")
    return float(sigmoid(logits(params, m))[0])


def predict_batch(params: ModelParams, inputs) -> list[float]:
    if len(inputs) == 0:
        return []
    if isinstance(inputs[0], FusionInput):
        inputs = np.stack([fi.vector() for fi in inputs])
    return [float(p) for p in sigmoid(logits(params, inputs))]


def bce_loss(y_hat, y) -> float | np.ndarray:
    y_arr = np.asarray(y)
    if not np.all((y_arr == 0) | (y_arr == 1)):
        raise ValidationError(f"labels must be 0 or 1, got {y!r}")
    p = np.clip(np.asarray(y_hat, dtype=np.float64), EPS, 1.0 - EPS)
    loss = -(y_arr * np.log(p) + (1 - y_arr) * np.log1p(-p))
    return float(loss) if loss.ndim == 0 else loss


def gradient(params: ModelParams, x, y, pos_weight: float = 1.0):
    """Exact gradients of mean BCE over the batch.

    Returns ``(grad_weights, grad_biases, mean_loss)``. For the output layer
    the per-example logit gradient is ``(y_hat - y) / batch_size`` (scaled by
    ``pos_weight`` on positives when that option is used).
    """
    x = _as_matrix(params, x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0 or y.shape[0] != x.shape[0]:
        raise ValidationError("gradient needs a nonempty batch with one label per row")
    acts, pre = _forward_cache(params, x)
    p = sigmoid(acts[-1][:, 0])
    wts = np.where(y == 1, pos_weight, 1.0)
    n = x.shape[0]
    loss = float(np.mean(wts * bce_loss(p, y)))
    delta = (wts * (p - y) / n)[:, None]
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0)
    return gw, gb, loss


def input_gradient(params: ModelParams, x) -> np.ndarray:
    """d logit / d x for each row of ``x`` (raw, unstandardized inputs)."""
    x = _as_matrix(params, x)
    acts, pre = _forward_cache(params, x)
    g = np.ones((x.shape[0], 1))
    for i in range(len(params.weights) - 1, -1, -1):
        g = g @ params.weights[i].T
        if i > 0:
            g = g * (pre[i - 1] > 0)
    return g / params.scale


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 64
    seed: int = 0
    hidden_width: int = 64
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pos_weight: float = 1.0

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise SchemaError(f"unknown training config keys {sorted(unknown)}")
        cfg = cls(**obj)
        if cfg.lr <= 0 or cfg.max_epochs < 1 or cfg.patience < 1 or cfg.batch_size < 1 or cfg.hidden_width < 0:
            raise ValidationError(f"invalid training config {asdict(cfg)}")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(epoch: int, base_lr: float, max_epochs: int) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to 0 at ``max_epochs``."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(epoch, max_epochs) / max_epochs))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_epoch: int
    best_val_auc: float
    stopped_early: bool


def train(x_train, y_train, x_val, y_val, config: TrainConfig | None = None, **meta) -> TrainResult:
    """Fit the fusion head; returns the best-validation-AUC snapshot and a per-epoch log."""
    cfg = config or TrainConfig()
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValidationError("training and validation sets must be nonempty")
    if len(np.unique(y_val)) < 2:
        raise ValidationError("validation set must contain both classes")

    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    sizes = [x_train.shape[1]] + ([cfg.hidden_width] if cfg.hidden_width else []) + [1]
    params = init_params(sizes, cfg.seed, mean, scale, **meta)
    # output bias starts at the training log-odds so early epochs learn
    # ranking instead of spending their steps on the base rate
    prior = float(np.clip(y_train.mean(), 1e-6, 1 - 1e-6))
    params.biases[-1][...] = math.log(prior / (1.0 - prior))
    rng = np.random.default_rng(cfg.seed + 1)

    tensors = params.weights + params.biases
    m = [np.zeros_like(t) for t in tensors]
    v = [np.zeros_like(t) for t in tensors]
    n_w = len(params.weights)
    step = 0

    best = params.copy()
    best_auc, best_epoch, wait = -math.inf, -1, 0
    history = []
    stopped = False
    for epoch in range(cfg.max_epochs):
        lr = cosine_lr(epoch, cfg.lr, cfg.max_epochs)
        order = rng.permutation(len(x_train))
        losses, max_norm = [], 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            gw, gb, loss = gradient(params, x_train[idx], y_train[idx], cfg.pos_weight)
            if not math.isfinite(loss):
                log.error("non-finite loss at epoch %d step %d", epoch, step)
                raise NumericError(f"NaN/inf training loss at epoch {epoch}")
            grads, norm = clip_gradients(gw + gb, cfg.clip_norm)
            max_norm = max(max_norm, norm)
            step += 1
            b1c = 1.0 - cfg.beta1**step
            b2c = 1.0 - cfg.beta2**step
            for k, (t, g) in enumerate(zip(tensors, grads)):
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                upd = (m[k] / b1c) / (np.sqrt(v[k] / b2c) + cfg.adam_eps)
                if k < n_w:
                    upd = upd + cfg.weight_decay * t  # decoupled decay on weights only
                t -= lr * upd
            losses.append(loss * len(idx))
        if not all(np.all(np.isfinite(t)) for t in tensors):
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        val_auc = auc(sigmoid(logits(params, x_val)), y_val)
        history.append({"epoch": epoch, "lr": lr, "train_loss": sum(losses) / len(x_train),
                        "val_auc": val_auc, "max_grad_norm": max_norm})
        if val_auc > best_auc:
            best, best_auc, best_epoch, wait = params.copy(), val_auc, epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                stopped = True
                break
    return TrainResult(best, history, best_epoch, best_auc, stopped)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _floats(a: np.ndarray):
    return np.asarray(a, dtype=np.float64).tolist()


def save_params(params: ModelParams, path) -> None:
    """JSON with float64 values; Python float repr makes the round trip exact."""
    obj = {
        "format": PARAMS_FORMAT,
        "version": params.version,
        "kb_version": params.kb_version,
        "blocks": [list(b) for b in params.blocks],
        "channels": list(params.channels),
        "rng_seed": params.rng_seed,
        "layer_sizes": params.layer_sizes,
        "mean": _floats(params.mean),
        "scale": _floats(params.scale),
        "layers": [{"W": _floats(w), "b": _floats(b)} for w, b in zip(params.weights, params.biases)],
    }
    Path(path).write_text(json.dumps(obj))


def load_params(path, expected_kb_version: str | None = None, expected_blocks=None) -> ModelParams:
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read params {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"params file {path} is not JSON") from exc
    if obj.get("format") != PARAMS_FORMAT:
        raise SchemaError(f"{path} is not a fusion params file")
    if obj.get("version") != PARAMS_VERSION:
        raise VersionMismatchError(f"params version {obj.get('version')} != supported {PARAMS_VERSION}")
    if expected_kb_version is not None and obj["kb_version"] != expected_kb_version:
        raise VersionMismatchError(f"params trained with KB {obj['kb_version']}, pipeline uses {expected_kb_version}")
    blocks = [(n, int(d)) for n, d in obj["blocks"]]
    if expected_blocks is not None and blocks != [(n, int(d)) for n, d in expected_blocks]:
        raise VersionMismatchError(f"params expect input blocks {blocks}, pipeline provides {list(expected_blocks)}")
    try:
        return ModelParams(
            weights=[np.array(layer["W"], dtype=np.float64) for layer in obj["layers"]],
            biases=[np.array(layer["b"], dtype=np.float64) for layer in obj["layers"]],
            mean=np.array(obj["mean"]),
            scale=np.array(obj["scale"]),
            blocks=blocks,
            kb_version=obj["kb_version"],
            channels=list(obj["channels"]),
            rng_seed=int(obj["rng_seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed params file {path}: {exc}") from exc
