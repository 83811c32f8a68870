"""Linear probing, two-stage fine-tuning, supervised training and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from . import data as D
from . import model as M
from .core_math import RngState
from .pretrain import OptimState, adam_step


@dataclass
class FinetuneSchedule:
    probe_epochs: int = 10
    full_epochs: int | None = None  # None -> 2 x probe_epochs
    lr_probe: float = 1e-4
    lr_full: float = 1e-4
    head_dropout: float = 0.2
    batch_size: int = 64

    def __post_init__(self):
        if self.full_epochs is None:
            self.full_epochs = 2 * self.probe_epochs
        if self.probe_epochs < 0 or self.full_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class ForecastMetrics:
    mse: float
    mae: float
    mse_per_step: list[float] = field(default_factory=list)
    mae_per_step: list[float] = field(default_factory=list)


@dataclass
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict = field(default_factory=dict)


# ---------------------------------------------------------------- task data


@dataclass
class ForecastData:
    """Normalized patches and targets ready for the forecast head."""

    patches: np.ndarray  # B x C x N x P
    targets: np.ndarray  # B x C x H, normalized with input stats
    stats: D.NormStats
    raw_targets: np.ndarray  # B x H x C

    def __len__(self):
        return len(self.patches)


def forecast_data(windows, P: int, stride: int, pad_mode: str = "none") -> ForecastData:
    inputs, targets = D.stack_windows(windows)
    normed, stats = D.instance_normalize(inputs)
    patches = D.patchify(normed, P, stride, pad_mode).patches
    tnorm = (targets - stats.mean[:, None, :]) / stats.std[:, None, :]
    return ForecastData(patches, np.transpose(tnorm, (0, 2, 1)), stats, targets)


@dataclass
class ClassData:
    patches: np.ndarray  # S x C x N x P
    labels: np.ndarray  # S

    def __len__(self):
        return len(self.patches)


def class_data(series: np.ndarray, labels: np.ndarray, P: int, stride: int,
               pad_mode: str = "none", normalize: bool = True) -> ClassData:
    """``series`` is S x T x C."""
    x = D.instance_normalize(series)[0] if normalize else series
    return ClassData(D.patchify(x, P, stride, pad_mode).patches, np.asarray(labels))


# ---------------------------------------------------------------- losses


def _forward_head(params: M.ModelParams, patches, training, rng, rate):
    z1, z2, enc_cache = M.encode(params, patches)
    z = z1 if params.head.layer == "z1" else z2
    if params.head.task == "forecast":
        out, head_cache = M.forecast(params, z, training, rng, rate)
    else:
        out, head_cache = M.classify(params, z, training, rng, rate)
    return out, (enc_cache, head_cache)


def downstream_loss(params: M.ModelParams, patches, targets, rng=None, rate=0.0,
                    training=True, need_grad=True, encoder_grad=True) -> float:
    """MSE (forecast, normalized space) or mean cross-entropy (classify)."""
    out, (enc_cache, head_cache) = _forward_head(params, patches, training, rng, rate)
    if params.head.task == "forecast":
        diff = out - targets
        loss = float(np.mean(diff ** 2))
        dout = 2.0 * diff / diff.size
        backward = M.forecast_backward
    else:
        logp = out - cm.logsumexp(out, axis=-1)[:, None]
        n = len(targets)
        loss = float(-np.mean(logp[np.arange(n), targets]))
        dout = np.exp(logp)
        dout[np.arange(n), targets] -= 1.0
        dout /= n
        backward = M.classify_backward
    if need_grad:
        dz = backward(params, head_cache, dout)
        if encoder_grad:
            if params.head.layer == "z1":
                M.encode_backward(params, enc_cache, dz, None)
            else:
                M.encode_backward(params, enc_cache, None, dz)
    return loss


def _train(params: M.ModelParams, data, names, epochs: int, lr: float, batch_size: int,
           rate: float, rng: RngState, label: str) -> list[float]:
    """Mini-batch Adam on ``names`` only; returns per-epoch mean train loss."""
    if epochs == 0:
        return []
    targets = data.targets if isinstance(data, ForecastData) else data.labels
    encoder_grad = any(n.startswith("enc.") for n in names)
    state = OptimState(lr=lr)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.stream(f"shuffle-{label}", epoch).permutation(len(data))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            params.zero_grads()
            losses.append(downstream_loss(params, data.patches[idx], targets[idx],
                                          rng.stream(f"dropout-{label}", step), rate,
                                          encoder_grad=encoder_grad))
            adam_step(params, state, names)
            step += 1
        history.append(float(np.mean(losses)))
    return history


def _check_head(params: M.ModelParams, data) -> None:
    if params.head is None:
        raise M.ModelError("no downstream head attached")
    if data.patches.shape[2] != params.N:
        raise M.ModelError(
            f"data has N={data.patches.shape[2]} patches but the model expects N={params.N}"
        )


def linear_probe(params: M.ModelParams, data, schedule: FinetuneSchedule, rng: RngState):
    """Train only the head on frozen representations. Returns (params, history)."""
    _check_head(params, data)
    out = params.copy()
    hist = _train(out, data, M.HEAD_NAMES, schedule.probe_epochs, schedule.lr_probe,
                  schedule.batch_size, schedule.head_dropout, rng, "probe")
    return out, hist


def full_finetune(params: M.ModelParams, data, schedule: FinetuneSchedule, rng: RngState):
    """End-to-end training of encoder and head. Returns (params, history)."""
    _check_head(params, data)
    out = params.copy()
    names = list(out.encoder_names) + list(M.HEAD_NAMES)
    hist = _train(out, data, names, schedule.full_epochs, schedule.lr_full,
                  schedule.batch_size, schedule.head_dropout, rng, "full")
    return out, hist


def finetune(params: M.ModelParams, data, schedule: FinetuneSchedule, rng: RngState,
             probe_only: bool = False):
    """Probe then (unless ``probe_only``) fine-tune end to end."""
    probed, h1 = linear_probe(params, data, schedule, rng)
    if probe_only:
        return probed, {"probe": h1, "full": []}
    tuned, h2 = full_finetune(probed, data, schedule, rng)
    return tuned, {"probe": h1, "full": h2}


def train_supervised(params: M.ModelParams, data, epochs: int, lr: float, batch_size: int,
                     rng: RngState, head_dropout: float = 0.2):
    """Random-init encoder and head trained jointly on the downstream loss."""
    _check_head(params, data)
    out = params.copy()
    names = list(out.encoder_names) + list(M.HEAD_NAMES)
    hist = _train(out, data, names, epochs, lr, batch_size, head_dropout, rng, "sup")
    return out, hist


# ---------------------------------------------------------------- prediction & metrics


def predict_forecast(params: M.ModelParams, data: ForecastData, chunk: int = 256) -> np.ndarray:
    """Denormalized B x H x C forecasts."""
    preds = []
    for s in range(0, len(data), chunk):
        out, _ = _forward_head(params, data.patches[s : s + chunk], False, None, 0.0)
        preds.append(np.transpose(out, (0, 2, 1)))
    pred = np.concatenate(preds, axis=0)
    return D.denormalize(pred, data.stats)


def forecast_metrics(pred: np.ndarray, target: np.ndarray) -> ForecastMetrics:
    err = pred - target
    return ForecastMetrics(
        float(np.mean(err ** 2)), float(np.mean(np.abs(err))),
        np.mean(err ** 2, axis=(0, 2)).tolist(), np.mean(np.abs(err), axis=(0, 2)).tolist(),
    )


def evaluate_forecast(params: M.ModelParams, data: ForecastData) -> ForecastMetrics:
    _check_head(params, data)
    return forecast_metrics(predict_forecast(params, data), data.raw_targets)


def predict_classes(params: M.ModelParams, data: ClassData, chunk: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(data), chunk):
        logits, _ = _forward_head(params, data.patches[s : s + chunk], False, None, 0.0)
        out.append(np.argmax(logits, axis=-1))
    return np.concatenate(out)


def class_metrics(pred: np.ndarray, true: np.ndarray, K: int) -> ClassMetrics:
    """Accuracy plus macro precision/recall/F1; 0/0 counts as 0 for a class."""
    pred, true = np.asarray(pred), np.asarray(true)
    if true.size and (true.max() >= K or true.min() < 0):
        raise ValueError(f"label outside [0, {K}) in test set")
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(float)
    pred_pos = conf.sum(axis=0).astype(float)
    actual = conf.sum(axis=1).astype(float)
    prec = np.divide(tp, pred_pos, out=np.zeros(K), where=pred_pos > 0)
    rec = np.divide(tp, actual, out=np.zeros(K), where=actual > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(K), where=denom > 0)
    return ClassMetrics(
        float(tp.sum() / max(len(true), 1)), float(prec.mean()), float(rec.mean()), float(f1.mean()),
        {"precision": prec.tolist(), "recall": rec.tolist(), "f1": f1.tolist(),
         "confusion": conf.tolist()},
    )


def evaluate_classification(params: M.ModelParams, data: ClassData) -> ClassMetrics:
    _check_head(params, data)
    return class_metrics(predict_classes(params, data), data.labels, params.head.out_dim)
