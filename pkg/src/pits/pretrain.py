"""Self-supervised objectives and the pretraining loop.

Task variants (input -> target):

  pi         every patch -> itself
  pd         masked patches zero-filled -> masked patches
  zero-xu    all-zero input -> unmasked patches
  zero-zero  all-zero input -> zeros

Any of them can be combined with the complementary hierarchical contrastive
loss on layer-1 embeddings (``cl=True``); ``pi+cl`` is shorthand for that.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from . import data as D
from .core_math import NonFiniteError, RngState
from .model import ModelParams, encode, encode_backward, reconstruct, reconstruct_backward

log = logging.getLogger(__name__)

TASKS = ("pi", "pi+cl", "pd", "zero-zero", "zero-xu")


def split_task(task: str) -> tuple[str, bool]:
    if task not in TASKS:
        raise ValueError(f"unknown pretraining task {task!r}; expected one of {TASKS}")
    if task == "pi+cl":
        return "pi", True
    return task, False


@dataclass
class LossBreakdown:
    recon: float
    cl_per_level: list[float]
    cl_total: float
    total: float
    recon_sum: float = 0.0
    recon_norm: float = 0.0


# ---------------------------------------------------------------- reconstruction


def recon_loss(x: np.ndarray, xhat: np.ndarray, weight: np.ndarray | None = None) -> float:
    """Sum of squared errors over patches; ``weight`` (B x C x N) selects patches."""
    if x.shape != xhat.shape:
        raise cm.ShapeError(f"recon_loss: {x.shape} vs {xhat.shape}")
    sq = np.sum((x - xhat) ** 2, axis=-1)
    if weight is not None:
        sq = sq * weight
    return float(np.sum(sq))


# ---------------------------------------------------------------- contrastive


def contrastive_level_loss(v1: np.ndarray, v2: np.ndarray, need_grad: bool = False):
    """Softmax contrast of each patch against the other 2N-1 patches of its series.

    ``v1``, ``v2``: B x C x N x D embeddings of the two views. The positive for
    index n is n+N (mod 2N). Returns ``loss`` or ``(loss, dv1, dv2)``.
    """
    B, C, N, _ = v1.shape
    z = np.concatenate([v1, v2], axis=2)  # B x C x 2N x D
    sim = z @ np.swapaxes(z, -1, -2)
    n2 = 2 * N
    eye = np.eye(n2, dtype=bool)
    logits = np.where(eye, -np.inf, sim)
    pos = (np.arange(n2) + N) % n2
    lse = cm.logsumexp(logits, axis=-1)  # B x C x 2N
    pos_sim = np.take_along_axis(sim, pos[None, None, :, None], axis=-1)[..., 0]
    scale = 1.0 / (B * C * n2)
    loss = float(np.sum(lse - pos_sim) * scale)
    if not need_grad:
        return loss
    p = np.exp(logits - lse[..., None])  # diagonal -> 0
    onehot = np.zeros((n2, n2))
    onehot[np.arange(n2), pos] = 1.0
    gsim = (p - onehot) * scale
    dz = (gsim + np.swapaxes(gsim, -1, -2)) @ z
    return loss, dz[:, :, :N], dz[:, :, N:]


def level_sizes(N: int) -> list[int]:
    sizes = [N]
    while sizes[-1] > 1:
        sizes.append(sizes[-1] // 2)
    return sizes


def hierarchical_cl_loss(v1: np.ndarray, v2: np.ndarray, reduce: str = "mean",
                         include_level0: bool = True, need_grad: bool = False):
    """Contrastive loss at every max-pooling level down to a single patch.

    Returns ``(cl_total, per_level)`` or ``(cl_total, per_level, dv1, dv2)``.
    """
    if reduce not in ("mean", "sum"):
        raise ValueError(f"cl_level_reduce must be mean or sum, got {reduce!r}")
    levels = []  # (a, b, loss, da, db, picks to reach next)
    a, b = v1, v2
    while True:
        if need_grad:
            loss, da, db = contrastive_level_loss(a, b, need_grad=True)
        else:
            loss, da, db = contrastive_level_loss(a, b), None, None
        levels.append([a.shape[2], loss, da, db, None, None])
        if a.shape[2] == 1:
            break
        a, pa = cm.maxpool_adjacent(a, axis=2)
        b, pb = cm.maxpool_adjacent(b, axis=2)
        levels[-1][4:] = [pa, pb]

    used = levels if include_level0 or len(levels) == 1 else levels[1:]
    per_level = [lv[1] for lv in levels]
    w = 1.0 / len(used) if reduce == "mean" else 1.0
    total = w * sum(lv[1] for lv in used)
    if not need_grad:
        return total, per_level

    # backward from the coarsest level up
    first = 0 if used is levels else 1
    ga = gb = None
    for k in range(len(levels) - 1, -1, -1):
        n, _, da, db, pa, pb = levels[k]
        if ga is not None:
            ga = cm.maxpool_adjacent_backward(pa, ga, n, axis=2)
            gb = cm.maxpool_adjacent_backward(pb, gb, n, axis=2)
        if k >= first:
            ga = w * da if ga is None else ga + w * da
            gb = w * db if gb is None else gb + w * db
    return total, per_level, ga, gb


# ---------------------------------------------------------------- full objective


@dataclass
class ObjectiveConfig:
    task: str = "pi+cl"
    cl: bool | None = None  # None -> implied by task
    recon_reduce: str = "mean"
    cl_level_reduce: str = "mean"
    cl_level0: bool = True
    cl_layer: str = "z1"

    def resolved(self) -> tuple[str, bool]:
        base, cl = split_task(self.task)
        return base, (cl if self.cl is None else self.cl)


def _task_io(base: str, x: np.ndarray, m: np.ndarray):
    """(encoder input, target, per-patch weight)."""
    if base == "pi":
        return x, x, np.ones(m.shape)
    if base == "pd":
        return x * m[..., None], x, 1.0 - m
    if base == "zero-xu":
        return np.zeros_like(x), x, m
    if base == "zero-zero":
        return np.zeros_like(x), np.zeros_like(x), np.ones(m.shape)
    raise ValueError(base)


def _views(params: ModelParams, x: np.ndarray, m: np.ndarray, layer: str):
    """Layer embeddings of the two complementary views plus a backward closure.

    Patch-independent encoders embed each patch once and fill masked slots
    with the embedding of a single zero patch. The mixer needs a forward pass
    per view because masked zeros leak into every patch.
    """
    mk = m[..., None]
    pick = 0 if layer == "z1" else 1
    if params.kind == "mixer":
        o1 = encode(params, x * mk)
        o2 = encode(params, x * (1.0 - mk))
        v1, v2 = o1[pick], o2[pick]

        def backward(g1, g2):
            for o, g in ((o1, g1), (o2, g2)):
                encode_backward(params, o[2], g if pick == 0 else None, g if pick == 1 else None)

        return v1, v2, backward

    real = encode(params, x)
    zero = encode(params, np.zeros((1, 1, 1, params.P)))
    zr, z0 = real[pick], zero[pick]
    v1 = np.where(mk == 1.0, zr, z0)
    v2 = np.where(mk == 1.0, z0, zr)

    def backward(g1, g2):
        greal = np.where(mk == 1.0, g1, g2)
        gzero = np.where(mk == 1.0, g2, g1).sum(axis=(0, 1, 2)).reshape(1, 1, 1, -1)
        for o, g in ((real, greal), (zero, gzero)):
            encode_backward(params, o[2], g if pick == 0 else None, g if pick == 1 else None)

    return v1, v2, backward


def pits_loss(params: ModelParams, x: np.ndarray, masks: D.MaskPair,
              rng: np.random.Generator | None, obj: ObjectiveConfig | None = None,
              training: bool = True, need_grad: bool = True) -> LossBreakdown:
    """Total loss = reconstruction + hierarchical contrastive; fills ``params.grads``.

    ``x`` is B x C x N x P. Grads are accumulated, so callers zero them first.
    The dropout mask on z2 is drawn from ``rng``; pass a generator rebuilt from
    the same state to reproduce it.
    """
    obj = obj or ObjectiveConfig()
    base, use_cl = obj.resolved()
    m = masks.m
    x_in, target, weight = _task_io(base, x, m)

    z1, z2, cache = encode(params, x_in)
    zd, dmask = cm.dropout(z2, params.dropout, training, rng)
    xhat = reconstruct(params, zd)
    resid = xhat - target
    recon_sum = recon_loss(target, xhat, weight)
    n_el = float(np.sum(weight)) * params.P
    recon_norm = recon_sum / n_el if n_el > 0 else 0.0
    recon = recon_norm if obj.recon_reduce == "mean" else recon_sum

    cl_total, per_level = 0.0, []
    if use_cl:
        v1, v2, views_backward = _views(params, x, m, obj.cl_layer)
        out = hierarchical_cl_loss(v1, v2, obj.cl_level_reduce, obj.cl_level0, need_grad)
        cl_total, per_level = out[0], out[1]

    result = LossBreakdown(recon, per_level, cl_total, recon + cl_total, recon_sum, recon_norm)
    if not np.isfinite(result.total):
        raise NonFiniteError(f"non-finite loss {result}")
    if not need_grad:
        return result

    scale = 2.0 if obj.recon_reduce == "sum" else (2.0 / n_el if n_el > 0 else 0.0)
    dxhat = scale * resid * weight[..., None]
    dzd = reconstruct_backward(params, zd, dxhat)
    dz2 = cm.dropout_backward(dmask, dzd)
    encode_backward(params, cache, None, dz2)
    if use_cl:
        views_backward(out[2], out[3])
    return result


def pd_task_loss(params: ModelParams, x: np.ndarray, masks: D.MaskPair) -> float:
    """Squared error on masked patches predicted from the zero-filled sequence."""
    x_in, target, weight = _task_io("pd", x, masks.m)
    _, z2, _ = encode(params, x_in)
    return recon_loss(target, reconstruct(params, z2), weight)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: OptimState, names=None) -> None:
    """In-place bias-corrected Adam update of ``params.tensors[names]``."""
    names = list(params.tensors) if names is None else list(names)
    for k in names:
        if not np.all(np.isfinite(params.grads[k])):
            raise NonFiniteError(f"non-finite gradient for {k}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k in names:
        g = params.grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        params.tensors[k] = params.tensors[k] - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------- loop


def patch_windows(inputs: np.ndarray, P: int, stride: int, pad_mode: str = "none") -> np.ndarray:
    """B x L x C raw windows -> B x C x N x P normalized patches."""
    normed, _ = D.instance_normalize(inputs)
    return D.patchify(normed, P, stride, pad_mode).patches


def ssl_inputs(ds: D.TimeSeriesDataset, split: str, L: int, window_stride: int = 1) -> np.ndarray:
    """B x L x C pretraining windows from one split (targets unused)."""
    seg = ds.segment(split)
    if len(seg) < L:
        raise D.DataError(f"split {split!r} has {len(seg)} steps; need at least L = {L}")
    starts = range(0, len(seg) - L + 1, window_stride)
    return np.stack([seg[s : s + L] for s in starts])


def run_pretraining(params: ModelParams, inputs: np.ndarray, *, epochs: int, batch_size: int,
                    lr: float, rng: RngState, obj: ObjectiveConfig | None = None,
                    max_steps: int | None = None, log_fh=None, log_extra: dict | None = None):
    """Mini-batch Adam over ``inputs`` (B x L x C raw windows).

    Returns (params, records) where each record is one JSON-lines loss entry.
    """
    obj = obj or ObjectiveConfig()
    patches = patch_windows(inputs, params.P, params.stride, params.pad_mode)
    if patches.shape[2] != params.N:
        raise ValueError(f"windows give N={patches.shape[2]} patches, model has N={params.N}")
    state = OptimState(lr=lr)
    records = []
    step = 0
    for epoch in range(epochs):
        order = rng.stream("shuffle", epoch).permutation(len(patches))
        for start in range(0, len(order), batch_size):
            if max_steps is not None and step >= max_steps:
                return params, records
            xb = patches[order[start : start + batch_size]]
            masks = D.complementary_masks(*xb.shape[:3], rng.stream("mask", step))
            params.zero_grads()
            lb = pits_loss(params, xb, masks, rng.stream("dropout", step), obj)
            adam_step(params, state)
            rec = {
                "epoch": epoch, "step": step, "recon": lb.recon, "cl_total": lb.cl_total,
                "cl_levels": lb.cl_per_level, "total": lb.total, "recon_norm": lb.recon_norm,
                **(log_extra or {}),
            }
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            step += 1
        log.info("epoch %d: total=%.6f", epoch, records[-1]["total"] if records else float("nan"))
    return params, records
