"""Bi-level training: an inner SGD step on the encoder/projector, an outer step on the fusion head.

Per batch the inner step moves ``w = (theta, phi[, predictor])`` along
``-r * grad_w(L_ssl + lambda1 * L_mcr)`` with the head fixed.  The outer step
then moves the head along the gradient of
``L_ssl(w'(head)) + lambda2 * L_comp(zhat)``, where ``w'`` is the inner update
viewed as a function of the head.  ``L_ssl`` reaches the head only through
``w'``, so that term equals ``-r * lambda1 * d/dhead [grad_w L_mcr . v]`` with
``v = grad_w L_ssl(w')``; it is approximated by central differences of
``grad_head L_mcr`` along ``v``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .data import ViewBatch
from .errors import ContractError, DimensionError, TrainingError
from .models import FusionStrategy, ModelParams, fuse, layers, mlp_forward
from .objectives import (
    LossConfig,
    barlow_twins_loss,
    byol_loss,
    comp_loss,
    counterfactual_loss,
    info_nce,
    mcr_loss,
)
from .probe import effective_rank

HYPERGRAD_KINDS = ("fd_hvp", "exact_oracle")
METRIC_COLUMNS = ("epoch", "loss_ssl", "loss_mcr", "loss_comp", "knn_acc", "probe_acc",
                  "erank_z1", "erank_zhat", "wallclock_s")

Values = dict[str, np.ndarray]


@dataclass(frozen=True)
class HypergradMode:
    kind: str = "fd_hvp"
    eps: float = 1e-4
    oracle_eps: float = 1e-5
    max_oracle_params: int = 20

    def __post_init__(self):
        if self.kind not in HYPERGRAD_KINDS:
            raise ContractError(f"hypergrad: kind must be one of {HYPERGRAD_KINDS}, got {self.kind!r}")
        if self.kind == "fd_hvp" and not 1e-6 <= self.eps <= 1e-3:
            raise ContractError(f"hypergrad: fd epsilon must lie in [1e-6, 1e-3], got {self.eps}")


@dataclass
class TrainState:
    params: ModelParams
    cfg: LossConfig = field(default_factory=LossConfig)
    fusion: FusionStrategy = field(default_factory=FusionStrategy)
    lr: float = 0.05
    epoch: int = 0
    init_seed: int = 0
    epoch_seed: int = 0
    ema_momentum: float = 0.99
    compmod: bool = True
    bilevel: bool = True
    hypergrad: HypergradMode = field(default_factory=HypergradMode)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ContractError(f"ema momentum must lie in [0, 1], got {self.ema_momentum}")

    @property
    def inner_groups(self) -> tuple[str, ...]:
        return ("theta", "phi", "predictor") if self.cfg.base == "byol" else ("theta", "phi")

    @property
    def head_group(self) -> str:
        return self.fusion.head_group

    def inner_values(self) -> Values:
        return {k: v.copy() for k, v in self.params.subset(self.inner_groups).items()}


@dataclass
class MetricsRow:
    epoch: int
    loss_ssl: float | None = None
    loss_mcr: float | None = None
    loss_comp: float | None = None
    knn_acc: float | None = None
    probe_acc: float | None = None
    erank_z1: float | None = None
    erank_zhat: float | None = None
    wallclock_s: float | None = None

    def as_list(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class StepResult:
    losses: dict[str, float]
    grads: Values
    erank_z1: float | None = None
    erank_zhat: float | None = None


# ---------------------------------------------------------------------------
# forward pieces


def _net(state: TrainState, binding, net: str, x: T.Node) -> T.Node:
    return mlp_forward(layers(binding, net, state.params.specs[net]), x)


def _views(state: TrainState, binding, batch: ViewBatch):
    h1 = _net(state, binding, "encoder", T.const(batch.x1))
    h2 = _net(state, binding, "encoder", T.const(batch.x2))
    return h1, h2, _net(state, binding, "projector", h1), _net(state, binding, "projector", h2)


def _target_embedding(state: TrainState, x: np.ndarray) -> np.ndarray:
    out = x
    for net in ("target_encoder", "target_projector"):
        spec = state.params.specs[net]
        for i in range(spec.n_layers):
            out = out @ state.params.values[f"{net}.{i}.W"] + state.params.values[f"{net}.{i}.b"]
            if i < spec.n_layers - 1:
                out = np.maximum(out, 0.0)
    return out


def _ssl_loss(state: TrainState, binding, batch: ViewBatch, z1: T.Node, z2: T.Node) -> T.Node:
    cfg = state.cfg
    if cfg.base == "simclr":
        loss = info_nce(z1, z2, cfg.tau)
    elif cfg.base == "barlow_twins":
        loss = barlow_twins_loss(z1, z2, cfg.bt_offdiag)
    else:
        p1 = _net(state, binding, "predictor", z1)
        p2 = _net(state, binding, "predictor", z2)
        t1 = _target_embedding(state, batch.x1)
        t2 = _target_embedding(state, batch.x2)
        loss = T.add(byol_loss(p1, t2), byol_loss(p2, t1))
    if cfg.counterfactual_weight > 0:
        cf = counterfactual_loss(T.row_normalize(z1), T.row_normalize(z2), cfg)
        loss = T.add(loss, T.scale(cf, cfg.counterfactual_weight))
    return loss


def _zhat(state: TrainState, binding, h1, h2, z1, z2, alpha, through: bool) -> T.Node:
    a, b = (z1, z2) if state.fusion.kind == "concat_embed" else (h1, h2)
    if not through:
        a, b = T.detach(a), T.detach(b)
    return T.row_normalize(fuse(a, b, state.fusion, state.params, binding, alpha))


def _check(name: str, value: float):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} loss ({value})")


def _collect(binding, names) -> Values:
    return {k: (np.zeros(binding[k].shape) if binding[k].grad is None else binding[k].grad) for k in names}


def _check_grads(grads: Values, what: str):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite {what} gradient for {k}")


def _sgd(values: Mapping[str, np.ndarray], grads: Values, lr: float, sign: float = -1.0) -> Values:
    return {k: values[k] + sign * lr * grads[k] for k in grads}


def _mcr_active(state: TrainState) -> bool:
    return state.compmod and state.cfg.lambda1 > 0


def _comp_active(state: TrainState) -> bool:
    return state.compmod and state.cfg.lambda2 > 0


# ---------------------------------------------------------------------------
# gradients


def inner_objective_grad(state: TrainState, batch: ViewBatch, w: Mapping | None = None,
                         alpha: float | None = None, with_mcr: bool = True) -> StepResult:
    """Gradient of ``L_ssl + lambda1 * L_mcr`` w.r.t. the inner groups, head fixed."""
    names = state.params.names(state.inner_groups)
    binding = state.params.bind(state.inner_groups, overrides=w)
    h1, h2, z1, z2 = _views(state, binding, batch)
    ssl = _ssl_loss(state, binding, batch, z1, z2)
    losses = {"ssl": ssl.item()}
    _check("ssl", losses["ssl"])
    total = ssl
    erank_zhat = None
    if with_mcr and _mcr_active(state):
        zhat = _zhat(state, binding, h1, h2, z1, z2, alpha, state.cfg.mcr_through_zhat)
        mcr = mcr_loss(T.row_normalize(z1), T.row_normalize(z2), zhat, state.cfg)
        losses["mcr"] = mcr.item()
        _check("mcr", losses["mcr"])
        total = T.add(total, T.scale(mcr, state.cfg.lambda1))
        erank_zhat = effective_rank(zhat.value)
    T.backward(total)
    grads = _collect(binding, names)
    return StepResult(losses, grads, effective_rank(z1.value), erank_zhat)


def ssl_grad(state: TrainState, batch: ViewBatch, w: Mapping) -> Values:
    """Gradient of ``L_ssl`` alone w.r.t. the inner groups at ``w``."""
    return inner_objective_grad(state, batch, w, with_mcr=False).grads


def mcr_head_grad(state: TrainState, batch: ViewBatch, w_views: Mapping, w_fused: Mapping,
                  alpha: float | None = None) -> Values:
    """grad_head L_mcr with view embeddings from ``w_views`` and the fused embedding from ``w_fused``."""
    head = state.head_group
    vb = state.params.bind((), overrides=w_views)
    _, _, z1, z2 = _views(state, vb, batch)
    fb = state.params.bind((head,), overrides=w_fused)
    h1, h2, y1, y2 = _views(state, fb, batch)
    zhat = _zhat(state, fb, h1, h2, y1, y2, alpha, through=False)
    loss = mcr_loss(T.row_normalize(z1), T.row_normalize(z2), zhat, replace(state.cfg, mcr_through_zhat=True))
    T.backward(loss)
    return _collect(fb, state.params.names(head))


def comp_head_grad(state: TrainState, batch: ViewBatch, w: Mapping, alpha: float | None = None
                   ) -> tuple[Values, float]:
    head = state.head_group
    binding = state.params.bind((head,), overrides=w)
    h1, h2, z1, z2 = _views(state, binding, batch)
    zhat = _zhat(state, binding, h1, h2, z1, z2, alpha, through=False)
    loss = comp_loss(zhat, state.cfg)
    _check("comp", loss.item())
    T.backward(loss)
    return _collect(binding, state.params.names(head)), loss.item()


def _zeros(state: TrainState, group: str) -> Values:
    return {k: np.zeros_like(v) for k, v in state.params.subset(group).items()}


def _norm(values: Values) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for v in values.values()))


def hypergradient(state: TrainState, batch: ViewBatch, w: Mapping, w_next: Mapping,
                  alpha: float | None = None, eps: float | None = None) -> Values:
    """The head gradient of ``L_ssl(w'(head))`` by a central-difference Hessian-vector product.

    ``w`` is the pre-step point the inner gradient was taken at, ``w_next``
    the result of the inner step.  Exactly zero when ``lambda1 == 0``.
    """
    if not _mcr_active(state):
        return _zeros(state, state.head_group)
    eps = state.hypergrad.eps if eps is None else eps
    v = ssl_grad(state, batch, w_next)
    vnorm = _norm(v)
    if vnorm == 0.0:
        return _zeros(state, state.head_group)
    step = eps / vnorm
    plus = {k: w[k] + step * v[k] for k in v}
    minus = {k: w[k] - step * v[k] for k in v}
    through = state.cfg.mcr_through_zhat
    g_plus = mcr_head_grad(state, batch, plus, plus if through else w, alpha)
    g_minus = mcr_head_grad(state, batch, minus, minus if through else w, alpha)
    coef = -state.lr * state.cfg.lambda1 / (2.0 * step)
    return {k: coef * (g_plus[k] - g_minus[k]) for k in g_plus}


def composed_outer_objective(state: TrainState, batch: ViewBatch, w: Mapping, head: Mapping,
                             alpha: float | None = None) -> float:
    """``L_ssl(w'(head)) + lambda2 * L_comp(zhat(w, head))`` evaluated from scratch."""
    overrides = {**w, **head}
    inner = inner_objective_grad(state, batch, overrides, alpha)
    w_next = _sgd(w, inner.grads, state.lr)
    binding = state.params.bind((), overrides={**w_next, **head})
    _, _, z1, z2 = _views(state, binding, batch)
    value = _ssl_loss(state, binding, batch, z1, z2).item()
    if _comp_active(state):
        b0 = state.params.bind((), overrides=overrides)
        h1, h2, y1, y2 = _views(state, b0, batch)
        zhat = _zhat(state, b0, h1, h2, y1, y2, alpha, through=False)
        value += state.cfg.lambda2 * comp_loss(zhat, state.cfg).item()
    return value


def oracle_outer_grad(state: TrainState, batch: ViewBatch, w: Mapping | None = None,
                      alpha: float | None = None, eps: float | None = None) -> Values:
    """Brute-force central differences of :func:`composed_outer_objective` per head coordinate."""
    total = state.params.n_params()
    if total > state.hypergrad.max_oracle_params:
        raise ContractError(
            f"exact_oracle supports at most {state.hypergrad.max_oracle_params} parameters, model has {total}"
        )
    eps = state.hypergrad.oracle_eps if eps is None else eps
    w = state.inner_values() if w is None else w
    head = {k: v.copy() for k, v in state.params.subset(state.head_group).items()}
    out = {}
    for k, v in head.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(*v.shape):
            probe = dict(head)
            bumped = v.copy()
            bumped[idx] += eps
            probe[k] = bumped
            fp = composed_outer_objective(state, batch, w, probe, alpha)
            bumped = v.copy()
            bumped[idx] -= eps
            probe[k] = bumped
            fm = composed_outer_objective(state, batch, w, probe, alpha)
            g[idx] = (fp - fm) / (2 * eps)
        out[k] = g
    _check_grads(out, "oracle outer")
    return out


# ---------------------------------------------------------------------------
# steps


def ema_update(target: Mapping[str, np.ndarray], online: Mapping[str, np.ndarray], momentum: float) -> Values:
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"ema momentum must lie in [0, 1], got {momentum}")
    out = {}
    for k, t in target.items():
        o = np.asarray(online[k])
        t = np.asarray(t, dtype=np.float64)
        if t.shape != o.shape:
            raise DimensionError(f"ema_update: {k} has shapes {t.shape} and {o.shape}")
        out[k] = momentum * t + (1.0 - momentum) * o
    return out


def _update_target(state: TrainState):
    if state.cfg.base != "byol":
        return
    target = state.params.subset("target")
    online = {k: state.params.values[k.replace("target_", "", 1)] for k in target}
    state.params.assign(ema_update(target, online, state.ema_momentum))


def inner_step(state: TrainState, batch: ViewBatch, alpha: float | None = None) -> StepResult:
    """One SGD step on the inner groups; the head and fused-embedding head stay untouched."""
    res = inner_objective_grad(state, batch, alpha=alpha)
    _check_grads(res.grads, "inner")
    state.params.assign(_sgd(state.params.values, res.grads, state.lr))
    return res


def outer_step(state: TrainState, batch: ViewBatch, mode: HypergradMode | None = None,
               anchor: Mapping | None = None, alpha: float | None = None) -> StepResult:
    """One SGD step on the head.

    With ``anchor`` the current inner parameters are taken to be the inner
    step's result and ``anchor`` its starting point.  Without it the current
    parameters are the starting point and the inner step is only simulated.
    Inner parameters are never modified.
    """
    mode = mode or state.hypergrad
    if anchor is None:
        w = state.inner_values()
        w_next = None
    else:
        w = {k: np.asarray(v) for k, v in anchor.items()}
        w_next = state.inner_values()
    losses = {}
    if mode.kind == "exact_oracle":
        g = oracle_outer_grad(state, batch, w, alpha)
    else:
        if _mcr_active(state):
            if w_next is None:
                inner = inner_objective_grad(state, batch, w, alpha)
                w_next = _sgd(w, inner.grads, state.lr)
            g = hypergradient(state, batch, w, w_next, alpha, mode.eps)
        else:
            g = _zeros(state, state.head_group)
        if _comp_active(state):
            cg, losses["comp"] = comp_head_grad(state, batch, w, alpha)
            g = {k: g[k] + state.cfg.lambda2 * cg[k] for k in g}
    _check_grads(g, "outer")
    state.params.assign(_sgd(state.params.values, g, state.lr))
    return StepResult(losses, g)


def joint_step(state: TrainState, batch: ViewBatch, alpha: float | None = None) -> StepResult:
    """Single-level update of inner groups and head on ``L_ssl + l1 L_mcr + l2 L_comp``."""
    groups = (*state.inner_groups, state.head_group)
    names = state.params.names(groups)
    binding = state.params.bind(groups)
    h1, h2, z1, z2 = _views(state, binding, batch)
    ssl = _ssl_loss(state, binding, batch, z1, z2)
    losses = {"ssl": ssl.item()}
    _check("ssl", losses["ssl"])
    total = ssl
    erank_zhat = None
    if _mcr_active(state) or _comp_active(state):
        zhat = _zhat(state, binding, h1, h2, z1, z2, alpha, state.cfg.mcr_through_zhat)
        erank_zhat = effective_rank(zhat.value)
        if _mcr_active(state):
            mcr = mcr_loss(T.row_normalize(z1), T.row_normalize(z2), zhat, replace(state.cfg, mcr_through_zhat=True))
            losses["mcr"] = mcr.item()
            _check("mcr", losses["mcr"])
            total = T.add(total, T.scale(mcr, state.cfg.lambda1))
        if _comp_active(state):
            comp = comp_loss(zhat, state.cfg)
            losses["comp"] = comp.item()
            _check("comp", losses["comp"])
            total = T.add(total, T.scale(comp, state.cfg.lambda2))
    T.backward(total)
    grads = _collect(binding, names)
    _check_grads(grads, "joint")
    state.params.assign(_sgd(state.params.values, grads, state.lr))
    _update_target(state)
    return StepResult(losses, grads, effective_rank(z1.value), erank_zhat)


def plain_step(state: TrainState, batch: ViewBatch) -> StepResult:
    """Baseline SSL step without any fusion head."""
    names = state.params.names(state.inner_groups)
    binding = state.params.bind(state.inner_groups)
    _, _, z1, z2 = _views(state, binding, batch)
    loss = _ssl_loss(state, binding, batch, z1, z2)
    _check("ssl", loss.item())
    T.backward(loss)
    grads = _collect(binding, names)
    _check_grads(grads, "ssl")
    state.params.assign(_sgd(state.params.values, grads, state.lr))
    _update_target(state)
    return StepResult({"ssl": loss.item()}, grads, effective_rank(z1.value))


def _alpha_stream(state: TrainState) -> np.random.Generator:
    return np.random.default_rng([state.epoch_seed, state.epoch, 7])


def train_epoch(state: TrainState, batches: Iterable[ViewBatch]) -> MetricsRow:
    """Run every batch through inner then outer step (or the configured variant)."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    last = None
    alphas = _alpha_stream(state)
    for b, batch in enumerate(batches):
        alpha = float(alphas.uniform()) if state.fusion.sample_alpha else None
        try:
            if not state.compmod:
                res = plain_step(state, batch)
                losses = res.losses
            elif not state.bilevel:
                res = joint_step(state, batch, alpha)
                losses = res.losses
            else:
                anchor = state.inner_values()
                res = inner_step(state, batch, alpha)
                _update_target(state)
                outer = outer_step(state, batch, anchor=anchor, alpha=alpha)
                losses = {**res.losses, **outer.losses}
        except TrainingError as exc:
            raise TrainingError(f"epoch {state.epoch} batch {b}: {exc}") from None
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + v
            counts[k] = counts.get(k, 0) + 1
        last = res
    state.epoch += 1
    mean = {k: sums[k] / counts[k] for k in sums}
    return MetricsRow(
        epoch=state.epoch,
        loss_ssl=mean.get("ssl"),
        loss_mcr=mean.get("mcr"),
        loss_comp=mean.get("comp"),
        erank_z1=None if last is None else last.erank_z1,
        erank_zhat=None if last is None else last.erank_zhat,
    )


def encode(params: ModelParams, x: np.ndarray, net: str = "encoder") -> np.ndarray:
    """Frozen forward pass through one network, numpy only."""
    spec = params.specs[net]
    out = np.asarray(x, dtype=np.float64)
    for i in range(spec.n_layers):
        out = out @ params.values[f"{net}.{i}.W"] + params.values[f"{net}.{i}.b"]
        if i < spec.n_layers - 1:
            out = np.maximum(out, 0.0)
    return out
