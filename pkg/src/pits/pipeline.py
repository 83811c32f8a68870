"""Command implementations: every function takes a validated RunConfig.

Outputs go only to ``cfg.out_dir(command)``; each artifact carries the
config hash, seed and format version.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import data as D
from . import experiments as X
from . import finetune as F
from . import gradcheck as G
from . import model as M
from . import pretrain as PT
from .config import ConfigError, RunConfig
from .core_math import RngState

log = logging.getLogger(__name__)

WEIGHTS_PRETRAIN = "pretrained.pits"
WEIGHTS_FINETUNE = "finetuned.pits"


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.seed, "format_version": M.FORMAT_VERSION}


def _prepare_out(cfg: RunConfig, command: str) -> Path:
    out = cfg.out_dir(command)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(cfg.hashed_dict().items()))
        + f"# config_hash = {cfg.config_hash}\n"
    )
    return out


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _objective(cfg: RunConfig) -> PT.ObjectiveConfig:
    cl = None if cfg.cl == "auto" else cfg.cl == "true"
    return PT.ObjectiveConfig(cfg.task, cl, cfg.recon_reduce, cfg.cl_level_reduce, cfg.cl_level0)


def load_dataset(cfg: RunConfig) -> D.TimeSeriesDataset:
    ts = None if cfg.timestamp_col == "none" else cfg.timestamp_col
    ds = D.load_csv(cfg.data, ts)
    return D.chronological_split(ds, cfg.split_ratios)


def load_classification(cfg: RunConfig, which: str):
    """(S x T x 1 series, labels) from a series-per-column CSV and labels sidecar.

    Without ``test_data`` the series are shuffled by seed and split by the
    train ratio (train+val vs test).
    """
    if not cfg.labels:
        raise D.DataError("classification needs a labels file (labels=...)")
    ds = D.load_csv(cfg.data, None if cfg.timestamp_col == "none" else cfg.timestamp_col)
    x, y = ds.values.T[:, :, None], D.read_labels(cfg.labels)
    if len(y) != len(x):
        raise D.DataError(f"{len(y)} labels for {len(x)} series")
    if cfg.test_data:
        if which == "train":
            return x, y
        tds = D.load_csv(cfg.test_data, None if cfg.timestamp_col == "none" else cfg.timestamp_col)
        return tds.values.T[:, :, None], D.read_labels(cfg.test_labels)
    order = RngState(cfg.seed).stream("class-split").permutation(len(x))
    cut = int(len(x) * (cfg.split_ratios[0] + cfg.split_ratios[1]))
    idx = order[:cut] if which == "train" else order[cut:]
    return x[idx], y[idx]


def _n_classes(cfg: RunConfig, labels) -> int:
    return cfg.classes or int(np.max(labels)) + 1


# ---------------------------------------------------------------- pretrain


def cmd_pretrain(cfg: RunConfig) -> dict:
    rng = RngState(cfg.seed)
    stride = cfg.ssl_stride()
    if cfg.head == "classify":
        inputs, _ = load_classification(cfg, "train")
        L = inputs.shape[1]
    else:
        ds = load_dataset(cfg)
        inputs = PT.ssl_inputs(ds, "train", cfg.L, cfg.window_stride)
        L = cfg.L
    N = D.num_patches(L, cfg.P, stride, cfg.pad_mode)
    log.info("pretrain: kind=%s task=%s P=%d stride=%d N=%d", cfg.kind, cfg.task, cfg.P, stride, N)
    params = M.init_params(cfg.kind, cfg.P, cfg.D, N, rng, cfg.dropout, stride, cfg.pad_mode)

    out = _prepare_out(cfg, "pretrain")
    with (out / "pretrain_log.jsonl").open("w") as fh:
        params, records = PT.run_pretraining(
            params, inputs, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, rng=rng,
            obj=_objective(cfg), max_steps=cfg.max_steps or None, log_fh=fh, log_extra=_stamp(cfg),
        )
    M.save_params(params, out / WEIGHTS_PRETRAIN, extra=_stamp(cfg))
    summary = {"N": N, "steps": len(records), "param_counts": M.param_counts(params), **_stamp(cfg)}
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary


# ---------------------------------------------------------------- downstream


def _task_data(cfg: RunConfig, params: M.ModelParams, which: str):
    stride, pad = params.stride, params.pad_mode
    if cfg.head == "forecast":
        ds = load_dataset(cfg)
        windows = D.make_forecast_windows(ds, which, cfg.L, cfg.H, cfg.window_stride)
        return F.forecast_data(windows, params.P, stride, pad)
    x, y = load_classification(cfg, "train" if which == "train" else "test")
    return F.class_data(x, y, params.P, stride, pad)


def _head_spec(cfg: RunConfig, n_classes: int | None = None) -> M.HeadSpec:
    if cfg.head == "forecast":
        return M.HeadSpec("forecast", cfg.H, cfg.agg, cfg.layer)
    return M.HeadSpec("classify", n_classes, cfg.agg, cfg.layer)


def _metric_records(cfg: RunConfig, params: M.ModelParams, data, split: str, dataset: str):
    if cfg.head == "forecast":
        m = F.evaluate_forecast(params, data)
        rec = {"dataset": dataset, "horizon": cfg.H, "split": split, "mse": m.mse, "mae": m.mae,
               "mse_per_step": m.mse_per_step, "mae_per_step": m.mae_per_step}
    else:
        m = F.evaluate_classification(params, data)
        rec = {"dataset": dataset, "classes": params.head.out_dim, "split": split,
               "acc": m.accuracy, "prec": m.precision, "rec": m.recall, "f1": m.f1,
               "per_class": m.per_class}
    rec.update(_stamp(cfg))
    return rec


def _emit_metrics(out: Path, rec: dict) -> None:
    _write_jsonl(out / "metrics.jsonl", [rec])
    flat = {k: v for k, v in rec.items() if not isinstance(v, (list, dict))}
    _write_csv(out / "metrics.csv", [flat])


def _schedule(cfg: RunConfig) -> F.FinetuneSchedule:
    return F.FinetuneSchedule(
        cfg.probe_epochs, cfg.resolved_full_epochs(), cfg.lr_probe or cfg.lr,
        cfg.lr_full or cfg.lr, cfg.head_dropout, cfg.batch_size,
    )


def _dataset_name(cfg: RunConfig) -> str:
    return Path(cfg.data).stem


def cmd_finetune(cfg: RunConfig) -> dict:
    if not cfg.weights:
        raise M.ModelError("finetune needs weights=<pretrained weight file>")
    rng = RngState(cfg.seed)
    pre = M.load_params(cfg.weights, expect={"P": cfg.P})
    train = _task_data(cfg, pre, "train")
    test = _task_data(cfg, pre, cfg.eval_split)
    n_cls = _n_classes(cfg, train.labels) if cfg.head == "classify" else None
    params = M.transfer(pre, _head_spec(cfg, n_cls), rng)
    tuned, hist = F.finetune(params, train, _schedule(cfg), rng, probe_only=cfg.probe_only)

    out = _prepare_out(cfg, "finetune")
    M.save_params(tuned, out / WEIGHTS_FINETUNE, extra=_stamp(cfg))
    _write_jsonl(out / "finetune_log.jsonl", [
        {"stage": stage, "epoch": e, "loss": v, **_stamp(cfg)}
        for stage in ("probe", "full") for e, v in enumerate(hist[stage])
    ])
    rec = _metric_records(cfg, tuned, test, cfg.eval_split, _dataset_name(cfg))
    _emit_metrics(out, rec)
    return rec


def cmd_supervised(cfg: RunConfig) -> dict:
    rng = RngState(cfg.seed)
    stride = cfg.sup_stride()
    if cfg.head == "forecast":
        L = cfg.L
    else:
        L = load_classification(cfg, "train")[0].shape[1]
    N = D.num_patches(L, cfg.P, stride, cfg.pad_mode)
    base = M.init_params(cfg.kind, cfg.P, cfg.D, N, rng, 0.0, stride, cfg.pad_mode)
    train = _task_data(cfg, base, "train")
    test = _task_data(cfg, base, cfg.eval_split)
    n_cls = _n_classes(cfg, train.labels) if cfg.head == "classify" else None
    params = M.attach_head(base, _head_spec(cfg, n_cls), rng)
    tuned, hist = F.train_supervised(params, train, cfg.epochs, cfg.lr, cfg.batch_size, rng,
                                     cfg.head_dropout)

    out = _prepare_out(cfg, "supervised")
    M.save_params(tuned, out / WEIGHTS_FINETUNE, extra=_stamp(cfg))
    _write_jsonl(out / "train_log.jsonl",
                 [{"epoch": e, "loss": v, **_stamp(cfg)} for e, v in enumerate(hist)])
    rec = _metric_records(cfg, tuned, test, cfg.eval_split, _dataset_name(cfg))
    _emit_metrics(out, rec)
    return rec


def cmd_eval(cfg: RunConfig) -> dict:
    if not cfg.weights:
        raise M.ModelError("eval needs weights=<fine-tuned weight file>")
    params = M.load_params(cfg.weights, expect={"P": cfg.P})
    if params.head is None:
        raise M.ModelError(f"{cfg.weights}: weight file has no downstream head")
    if params.head.task != cfg.head:
        raise M.ModelError(f"{cfg.weights}: head is {params.head.task}, config asks for {cfg.head}")
    if cfg.head == "forecast" and params.head.out_dim != cfg.H:
        raise M.ModelError(f"{cfg.weights}: head horizon {params.head.out_dim}, config H={cfg.H}")
    test = _task_data(cfg, params, cfg.eval_split)
    rec = _metric_records(cfg, params, test, cfg.eval_split, _dataset_name(cfg))
    out = _prepare_out(cfg, "eval")
    _emit_metrics(out, rec)
    return rec


# ---------------------------------------------------------------- toys


def cmd_toygen(cfg: RunConfig) -> dict:
    rng = RngState(cfg.seed)
    if cfg.toy == "shift":
        train, tests, grid = D.gen_shift_toy((cfg.slope0, cfg.amp0), None, cfg.toy_T or 1200,
                                             cfg.noise_std, rng, cfg.period)
        out = _prepare_out(cfg, "toygen")
        D.write_csv(train, out / "shift_train.csv")
        for t in tests:
            D.write_csv(t, out / f"{t.name}.csv")
        _write_csv(out / "shift_grid.csv", [
            {"name": t.name, "slope": g.slope, "amplitude": g.amplitude,
             "slope_delta": g.slope_delta, "amp_delta": g.amp_delta}
            for t, g in zip(tests, grid)
        ])
        files = 2 + len(tests)
    elif cfg.toy == "class":
        ds = D.gen_class_toy(cfg.num_classes, cfg.per_class, cfg.toy_T or 96, rng, cfg.noise_std)
        out = _prepare_out(cfg, "toygen")
        D.write_csv(ds, out / "class_toy.csv")
        D.write_labels(ds.labels, out / "class_toy_labels.csv")
        files = 2
    else:
        ds = D.gen_seasonal_toy(cfg.toy_T or 4000, cfg.channels, rng, cfg.noise_std)
        out = _prepare_out(cfg, "toygen")
        D.write_csv(ds, out / "seasonal_toy.csv")
        files = 1
    summary = {"toy": cfg.toy, "files": files, **_stamp(cfg)}
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary


def cmd_experiment(cfg: RunConfig, name: str) -> dict:
    if name == "shift":
        s = X.ShiftSettings(kind=cfg.kind, noise_std=cfg.noise_std, slope0=cfg.slope0,
                            amp0=cfg.amp0, period=cfg.period, T=cfg.toy_T or 1200)
        grid, per_seed = X.shift_experiment(cfg.seed_list, s)
        rows = X.shift_rows(grid, per_seed)
        out = _prepare_out(cfg, "experiment")
        _write_csv(out / "shift_grid.csv", rows)
        gaps = np.array([r["gap"] for r in rows])
        summary = {"experiment": "shift", "points": len(rows),
                   "frac_nonneg_gap": float(np.mean(gaps >= 0)), **_stamp(cfg)}
    elif name == "classtoy":
        s = X.ClassToySettings(kind=cfg.kind, task=cfg.task, num_classes=cfg.num_classes,
                               per_class=cfg.per_class, noise_std=cfg.noise_std, agg=cfg.agg)
        res = X.classtoy_experiment(cfg.seed, s)
        out = _prepare_out(cfg, "experiment")
        emb = res["embeddings"]
        rows = [{"series_id": i, "channel": 0, "patch_index": -1,
                 **{f"d{j}": repr(float(v)) for j, v in enumerate(e)}} for i, e in enumerate(emb)]
        _write_csv(out / "classtoy_embeddings.csv", rows)
        D.write_labels(res["labels"], out / "classtoy_labels.csv")
        summary = {"experiment": "classtoy", "acc_pretrained": res["acc_pretrained"],
                   "acc_random": res["acc_random"], "rows": len(rows), **_stamp(cfg)}
    else:
        raise ValueError(f"unknown experiment {name!r}; expected shift or classtoy")
    (out / f"{name}_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary


# ---------------------------------------------------------------- verification & export


def cmd_gradcheck(cfg: RunConfig):
    try:
        return G.run_gradcheck(B=cfg.gc_B, C=cfg.gc_C, N=cfg.gc_N, P=cfg.gc_P, D_=cfg.gc_D,
                               eps=cfg.gc_eps, tol=cfg.gc_tol, seed=cfg.seed,
                               corrupt=cfg.gc_corrupt)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_export_embeddings(cfg: RunConfig) -> dict:
    if not cfg.weights:
        raise M.ModelError("export-embeddings needs weights=<weight file>")
    params = M.load_params(cfg.weights)
    if cfg.head == "classify" or cfg.labels:
        x = D.load_csv(cfg.data, None if cfg.timestamp_col == "none" else cfg.timestamp_col).values.T[:, :, None]
    else:
        x = PT.ssl_inputs(load_dataset(cfg), cfg.eval_split, cfg.L, cfg.window_stride)
    patches = PT.patch_windows(x, params.P, params.stride, params.pad_mode)
    z, _ = M.representation(params, patches, cfg.layer)
    out = _prepare_out(cfg, "export-embeddings")
    B, C, N, Dm = z.shape
    with (out / "embeddings.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "channel", "patch_index"] + [f"d{j}" for j in range(Dm)])
        for b in range(B):
            for c in range(C):
                for n in range(N):
                    w.writerow([b, c, n] + [repr(float(v)) for v in z[b, c, n]])
    summary = {"rows": B * C * N, "layer": cfg.layer, **_stamp(cfg)}
    (out / "run.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary
