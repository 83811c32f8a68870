"""Packaged analysis experiments on synthetic data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import finetune as F
from . import model as M
from . import pretrain as PT
from .core_math import RngState


@dataclass
class ShiftSettings:
    kind: str = "mlp"
    L: int = 96
    H: int = 24
    P: int = 12
    D: int = 32
    dropout: float = 0.2
    T: int = 1200
    noise_std: float = 0.1
    slope0: float = 0.5
    amp0: float = 1.0
    period: float = 24.0
    pretrain_steps: int = 600
    probe_epochs: int = 5
    full_epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    window_stride: int = 2
    test_window_stride: int = 8


def _pretrain_and_tune(task, inputs, fd, s: ShiftSettings, rng: RngState):
    params = M.init_params(s.kind, s.P, s.D, s.L // s.P, rng, dropout=s.dropout)
    params, _ = PT.run_pretraining(
        params, inputs, epochs=10**6, batch_size=s.batch_size, lr=s.lr, rng=rng,
        obj=PT.ObjectiveConfig(task=task), max_steps=s.pretrain_steps,
    )
    params = M.attach_head(params, M.HeadSpec("forecast", s.H), rng)
    sched = F.FinetuneSchedule(s.probe_epochs, s.full_epochs, s.lr, s.lr, 0.2, s.batch_size)
    tuned, _ = F.finetune(params, fd, sched, rng)
    return tuned


def shift_experiment(seeds=(0, 1, 2), settings: ShiftSettings | None = None):
    """PI-task vs PD-task forecasting error on every shifted test series.

    Returns (grid, per_seed) where per_seed[k] is a dict with ``mse_pi`` and
    ``mse_pd`` arrays aligned with ``grid``.
    """
    s = settings or ShiftSettings()
    grid = D.default_shift_grid(s.slope0, s.amp0)
    per_seed = []
    for seed in seeds:
        rng = RngState(seed)
        train, tests, _ = D.gen_shift_toy((s.slope0, s.amp0), grid, s.T, s.noise_std, rng, s.period)
        inputs = PT.ssl_inputs(train, "train", s.L, s.window_stride)
        fd = F.forecast_data(D.make_forecast_windows(train, "train", s.L, s.H, s.window_stride), s.P, s.P)
        test_data = [
            F.forecast_data(D.make_forecast_windows(t, "all", s.L, s.H, s.test_window_stride), s.P, s.P)
            for t in tests
        ]
        row = {}
        for task in ("pi", "pd"):
            tuned = _pretrain_and_tune(task, inputs, fd, s, rng)
            row[f"mse_{task}"] = np.array([F.evaluate_forecast(tuned, t).mse for t in test_data])
        per_seed.append(row)
    return grid, per_seed


def shift_severity(grid) -> np.ndarray:
    """Euclidean shift distance with each axis scaled by its largest |delta|."""
    sd = np.array([g.slope_delta for g in grid])
    ad = np.array([g.amp_delta for g in grid])
    return np.hypot(sd / np.abs(sd).max(), ad / np.abs(ad).max())


def shift_rows(grid, per_seed) -> list[dict]:
    mse_pi = np.mean([r["mse_pi"] for r in per_seed], axis=0)
    mse_pd = np.mean([r["mse_pd"] for r in per_seed], axis=0)
    return [
        {"slope_delta": g.slope_delta, "amp_delta": g.amp_delta, "mse_pi": float(a),
         "mse_pd": float(b), "gap": float(b - a)}
        for g, a, b in zip(grid, mse_pi, mse_pd)
    ]


# ---------------------------------------------------------------- class toy


@dataclass
class ClassToySettings:
    kind: str = "mlp"
    task: str = "pi+cl"
    P: int = 8
    D: int = 32
    T: int = 96
    per_class: int = 20
    num_classes: int = 10
    noise_std: float = 0.1
    dropout: float = 0.2
    agg: str = "max"
    pretrain_steps: int = 1000
    probe_epochs: int = 100
    lr: float = 1e-3
    lr_probe: float = 1e-2
    batch_size: int = 32


def class_toy_sets(seed: int, s: ClassToySettings):
    """Independent train and test draws of the labeled toy."""
    train = D.gen_class_toy(s.num_classes, s.per_class, s.T, RngState(2 * seed + 100), s.noise_std)
    test = D.gen_class_toy(s.num_classes, s.per_class, s.T, RngState(2 * seed + 101), s.noise_std)
    return train, test


def classtoy_experiment(seed: int = 0, settings: ClassToySettings | None = None):
    """Probe accuracy of a pretrained vs a frozen random encoder.

    Returns dict with accuracies, the pretrained model and its train embeddings.
    """
    s = settings or ClassToySettings()
    rng = RngState(seed)
    train, test = class_toy_sets(seed, s)
    xtr, xte = train.values.T[:, :, None], test.values.T[:, :, None]
    cd = F.class_data(xtr, train.labels, s.P, s.P)
    ce = F.class_data(xte, test.labels, s.P, s.P)
    sched = F.FinetuneSchedule(probe_epochs=s.probe_epochs, lr_probe=s.lr_probe,
                               batch_size=s.batch_size)
    spec = M.HeadSpec("classify", s.num_classes, s.agg)
    out = {}
    for name, pretrain in (("pretrained", True), ("random", False)):
        params = M.init_params(s.kind, s.P, s.D, s.T // s.P, rng, dropout=s.dropout)
        if pretrain:
            params, _ = PT.run_pretraining(
                params, xtr, epochs=10**6, batch_size=s.batch_size, lr=s.lr, rng=rng,
                obj=PT.ObjectiveConfig(task=s.task), max_steps=s.pretrain_steps,
            )
            out["model"] = params
        probed, _ = F.linear_probe(M.attach_head(params, spec, rng), cd, sched, rng)
        out[f"acc_{name}"] = F.evaluate_classification(probed, ce).accuracy
    z, _ = M.representation(out["model"], cd.patches)
    out["embeddings"] = M.aggregate(z, s.agg)[0]
    out["labels"] = train.labels
    return out


# ---------------------------------------------------------------- dropout study


@dataclass
class DropoutSettings:
    L: int = 192
    H: int = 48
    P: int = 12
    D: int = 32
    T: int = 4000
    C: int = 3
    pretrain_steps: int = 1500
    probe_epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32
    window_stride: int = 4


def dropout_experiment(seed: int, rates=(0.0, 0.2), settings: DropoutSettings | None = None):
    """Test MSE on the seasonal toy after pretraining with each dropout rate then FT."""
    s = settings or DropoutSettings()
    rng = RngState(seed)
    ds = D.gen_seasonal_toy(s.T, s.C, rng)
    inputs = PT.ssl_inputs(ds, "train", s.L, s.window_stride)
    fd = F.forecast_data(D.make_forecast_windows(ds, "train", s.L, s.H, s.window_stride), s.P, s.P)
    fe = F.forecast_data(D.make_forecast_windows(ds, "test", s.L, s.H, s.window_stride), s.P, s.P)
    sched = F.FinetuneSchedule(s.probe_epochs, None, s.lr, s.lr, 0.2, s.batch_size)
    out = {}
    for rate in rates:
        params = M.init_params("mlp", s.P, s.D, s.L // s.P, rng, dropout=rate)
        params, _ = PT.run_pretraining(
            params, inputs, epochs=10**6, batch_size=s.batch_size, lr=s.lr, rng=rng,
            obj=PT.ObjectiveConfig(task="pi"), max_steps=s.pretrain_steps,
        )
        tuned, _ = F.finetune(M.attach_head(params, M.HeadSpec("forecast", s.H), rng), fd, sched, rng)
        out[rate] = F.evaluate_forecast(tuned, fe).mse
    return out
