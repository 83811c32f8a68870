"""Analytic-vs-numeric gradient report over every task and encoder kind."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M
from .core_math import RngState, finite_difference_check
from .pretrain import ObjectiveConfig, pits_loss

GRADCHECK_TASKS = ("pi", "pi+cl", "pd")


@dataclass
class GradcheckResult:
    task: str
    kind: str
    max_rel_err: float
    worst_param: str
    passed: bool


def check_one(task: str, kind: str, *, B=2, C=2, N=4, P=3, D_=5, eps=1e-5, tol=1e-4,
              seed=0, dropout=0.2, corrupt: str = "") -> GradcheckResult:
    """One finite-difference comparison with the dropout and data masks frozen.

    ``corrupt`` names a parameter whose analytic gradient is deliberately
    scaled before comparison (negative control).
    """
    rng = RngState(seed)
    params = M.init_params(kind, P, D_, N, rng, dropout=dropout)
    jitter = rng.stream("gradcheck-bias")
    for k, v in params.tensors.items():
        if k.endswith((".b", ".b1", ".b2", ".bt")):
            params.tensors[k] = v + jitter.normal(0.0, 0.1, v.shape)
    x = rng.stream("gradcheck-data").normal(size=(B, C, N, P))
    masks = D.complementary_masks(B, C, N, rng.stream("gradcheck-mask"))
    obj = ObjectiveConfig(task=task)

    def loss_fn():
        return pits_loss(params, x, masks, rng.stream("gradcheck-dropout"), obj,
                         need_grad=False).total

    params.zero_grads()
    pits_loss(params, x, masks, rng.stream("gradcheck-dropout"), obj)
    grads = {k: v.copy() for k, v in params.grads.items()}
    if corrupt in grads:  # kinds without this tensor run uncorrupted
        grads[corrupt] = grads[corrupt] * 1.5 + 1e-3
    report = finite_difference_check(loss_fn, params.tensors, grads, eps)
    worst = max(report, key=report.get)
    return GradcheckResult(task, kind, report[worst], worst, report[worst] < tol)


def run_gradcheck(kinds=M.KINDS, tasks=GRADCHECK_TASKS, **kw) -> list[GradcheckResult]:
    corrupt = kw.get("corrupt")
    if corrupt:
        known = {n for k in kinds for n in M.ENCODER_NAMES[k]} | set(M.RECON_NAMES)
        if corrupt not in known:
            raise ValueError(f"gc_corrupt: no parameter named {corrupt!r}; known: {sorted(known)}")
    return [check_one(t, k, **kw) for t in tasks for k in kinds]


def format_report(results: list[GradcheckResult]) -> str:
    lines = [f"{'task':<7} {'kind':<7} {'max_rel_err':>12}  worst_param  status"]
    for r in results:
        lines.append(f"{r.task:<7} {r.kind:<7} {r.max_rel_err:12.3e}  {r.worst_param:<11}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def max_error(results) -> float:
    return float(np.max([r.max_rel_err for r in results]))
