"""Registered gradient checks and the tiny-model hypergradient comparison."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ViewBatch
from .models import FusionStrategy, MlpSpec, init_params
from .objectives import (
    LossConfig,
    barlow_twins_loss,
    byol_loss,
    coding_entropy,
    comp_loss,
    counterfactual_loss,
    info_nce,
    mcr_loss,
)
from .trainer import TrainState, comp_head_grad, hypergradient, inner_objective_grad, oracle_outer_grad

LOSS_TOL = 1e-5
HYPERGRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    cases: int
    # losses need a strict "<", the hypergradient bound is inclusive
    inclusive: bool = False

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_err <= self.tol if self.inclusive else self.max_rel_err < self.tol)


def _inputs(seed: int, n: int = 6, d: int = 3, k: int = 3) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(n, d)) for _ in range(k)]


def _unit(x):
    return T.row_normalize(x)


def _worst(fns: list[Callable], points: list[np.ndarray]) -> float:
    return max(T.grad_check(f, p) for f, p in zip(fns, points))


def _info_nce(seed):
    a, b, _ = _inputs(seed)
    fa = lambda x: info_nce(_unit(x), _unit(T.const(b)), 0.5)
    fb = lambda x: info_nce(_unit(T.const(a)), _unit(x), 0.5)
    return _worst([fa, fb], [a, b])


def _comp(seed):
    a, _, _ = _inputs(seed)
    cfg = LossConfig()
    return _worst([lambda x: comp_loss(_unit(x), cfg)], [a])


def _mcr(seed):
    a, b, c = _inputs(seed)
    cfg = LossConfig()
    through = LossConfig(mcr_through_zhat=True)
    fns = [
        lambda x: mcr_loss(_unit(x), _unit(T.const(b)), _unit(T.const(c)), cfg),
        lambda x: mcr_loss(_unit(T.const(a)), _unit(x), _unit(T.const(c)), cfg),
        lambda x: mcr_loss(_unit(T.const(a)), _unit(T.const(b)), _unit(x), through),
    ]
    return _worst(fns, [a, b, c])


def _barlow(seed):
    a, b, _ = _inputs(seed)
    fa = lambda x: barlow_twins_loss(x, T.const(b), 0.005)
    fb = lambda x: barlow_twins_loss(T.const(a), x, 0.005)
    return _worst([fa, fb], [a, b])


def _byol(seed):
    a, b, _ = _inputs(seed)
    return _worst([lambda x: byol_loss(x, b)], [a])


def _counterfactual(seed):
    a, b, _ = _inputs(seed)
    cfg = LossConfig()
    fa = lambda x: counterfactual_loss(_unit(x), _unit(T.const(b)), cfg)
    fb = lambda x: counterfactual_loss(_unit(T.const(a)), _unit(x), cfg)
    return _worst([fa, fb], [a, b])


def _entropy(seed):
    a, _, _ = _inputs(seed)
    return _worst([lambda x: coding_entropy(_unit(x), LossConfig())], [a])


LOSS_CHECKS: dict[str, Callable[[int], float]] = {
    "info_nce": _info_nce,
    "comp_loss": _comp,
    "mcr_loss": _mcr,
    "barlow_twins": _barlow,
    "byol": _byol,
    "counterfactual": _counterfactual,
    "coding_entropy": _entropy,
}

TINY_MODELS = [
    (FusionStrategy("mixup", alpha=0.3), {"encoder": (2, 2), "projector": (2, 2), "compmod": (2, 2)}),
    (FusionStrategy("concat_repr"), {"encoder": (2, 1), "projector": (1, 2), "compmod": (2, 2, 2)}),
    (FusionStrategy("concat_embed"), {"encoder": (2, 1), "projector": (1, 2), "embed_fusion": (4, 2)}),
]


def tiny_instance(seed: int, fusion: FusionStrategy, widths: dict, **loss) -> tuple[TrainState, ViewBatch]:
    """A model with at most 20 parameters, standard-normal weights and a 4-sample batch."""
    rng = np.random.default_rng(seed)
    params = init_params({k: MlpSpec(v) for k, v in widths.items()}, seed)
    for k in params.values:
        params.values[k] = rng.normal(size=params.values[k].shape)
    cfg = LossConfig(**{"lambda1": 1.0, "lambda2": 0.1, **loss})
    batch = ViewBatch(rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), np.zeros(4), np.arange(4), None)
    return TrainState(params, cfg, fusion, lr=0.1), batch


def fd_outer_grad(state: TrainState, batch: ViewBatch) -> dict[str, np.ndarray]:
    w = state.inner_values()
    inner = inner_objective_grad(state, batch, w)
    w_next = {k: w[k] - state.lr * inner.grads[k] for k in w}
    g = hypergradient(state, batch, w, w_next)
    if state.cfg.lambda2 > 0:
        cg, _ = comp_head_grad(state, batch, w)
        g = {k: g[k] + state.cfg.lambda2 * cg[k] for k in g}
    return g


def hypergradient_errors(n_seeds: int = 8, **loss) -> list[float]:
    """Relative max-norm error of the fd outer gradient against the brute-force oracle per instance."""
    errs = []
    for seed in range(n_seeds):
        for fusion, widths in TINY_MODELS:
            state, batch = tiny_instance(seed, fusion, widths, **loss)
            ours = fd_outer_grad(state, batch)
            oracle = oracle_outer_grad(state, batch)
            a = np.concatenate([ours[k].ravel() for k in sorted(ours)])
            b = np.concatenate([oracle[k].ravel() for k in sorted(oracle)])
            errs.append(float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)))
    return errs


def run_checks(scope: str = "all", seeds: int = 3) -> list[CheckResult]:
    names = list(LOSS_CHECKS) + ["hypergradient"] if scope == "all" else [scope]
    out = []
    for name in names:
        if name == "hypergradient":
            errs = hypergradient_errors(4) + hypergradient_errors(4, mcr_through_zhat=True)
            out.append(CheckResult(name, max(errs), HYPERGRAD_TOL, len(errs), inclusive=True))
        elif name in LOSS_CHECKS:
            errs = [LOSS_CHECKS[name](s) for s in range(seeds)]
            out.append(CheckResult(name, max(errs), LOSS_TOL, seeds))
        else:
            raise KeyError(name)
    return out
