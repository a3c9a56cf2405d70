"""Loss functions: contrastive, redundancy-reduction, distillation and coding-length terms.

All losses take and return :class:`~compmod.tensor.Node` objects so they can
be differentiated by the tensor core.  The coding-length losses follow the
truncated log-det series literally; callers decide whether to unit-normalize
embedding rows first.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

BASES = ("simclr", "byol", "barlow_twins")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 0.01
    # None means "derive from the batch": mu = (n + d) / 2, lambda = d / (n * eps_sq).
    # eps_sq=None takes eps_sq = d, so lambda = 1/n and lambda * ||Z Z^T|| <= 1 for unit rows.
    mu: float | None = None
    lambda_code: float | None = None
    eps_sq: float | None = None
    taylor_m: int = 4
    bt_offdiag: float = 0.005
    base: str = "simclr"
    mcr_through_zhat: bool = False
    counterfactual_weight: float = 0.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []

        def finite_nonneg(name):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                out.append(f"{name}: must be a finite number >= 0, got {v!r}")

        def positive(name, allow_none=False):
            v = getattr(self, name)
            if v is None and allow_none:
                return
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                out.append(f"{name}: must be a finite number > 0, got {v!r}")

        positive("tau")
        finite_nonneg("lambda1")
        finite_nonneg("lambda2")
        positive("mu", allow_none=True)
        positive("lambda_code", allow_none=True)
        positive("eps_sq", allow_none=True)
        finite_nonneg("bt_offdiag")
        finite_nonneg("counterfactual_weight")
        if not (isinstance(self.taylor_m, int) and self.taylor_m >= 1):
            out.append(f"taylor_m: must be an integer >= 1, got {self.taylor_m!r}")
        if self.base not in BASES:
            out.append(f"base: must be one of {BASES}, got {self.base!r}")
        return out

    def coding_coefficients(self, n: int, d: int) -> tuple[float, float]:
        mu = self.mu if self.mu is not None else (n + d) / 2.0
        if self.lambda_code is not None:
            lam = self.lambda_code
        else:
            lam = d / (n * (d if self.eps_sq is None else self.eps_sq))
        return float(mu), float(lam)

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(*nodes, where):
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise DimensionError(f"{where}: shapes differ: {[n.shape for n in nodes]}")


def info_nce(z1: T.Node, z2: T.Node, tau: float) -> T.Node:
    """NT-Xent averaged over all 2n anchors of both views."""
    _same_shape(z1, z2, where="info_nce")
    n = z1.shape[0]
    if n < 2:
        raise ContractError("info_nce: need at least 2 samples so that negatives exist")
    z = T.concat_rows(T.row_normalize(z1), T.row_normalize(z2))
    sim = T.scale(T.matmul(z, T.transpose(z)), 1.0 / tau)
    idx = np.arange(2 * n)
    positive = (idx + n) % (2 * n)
    mask = ~np.eye(2 * n, dtype=bool)
    per_anchor = T.sub(T.logsumexp_rows(sim, mask), T.gather(sim, idx, positive))
    return T.mean(per_anchor)


def coding_entropy(z: T.Node, cfg: LossConfig) -> T.Node:
    """mu * Tr(truncated log(I + lambda Z Z^T))."""
    mu, lam = cfg.coding_coefficients(*z.shape)
    gram = T.matmul(z, T.transpose(z))
    return T.scale(T.power_series_trace(gram, cfg.taylor_m, lam), mu)


def comp_loss(zhat: T.Node, cfg: LossConfig) -> T.Node:
    if zhat.value.size == 0:
        raise DimensionError("comp_loss: empty embedding matrix")
    return T.scale(coding_entropy(zhat, cfg), -1.0)


def mcr_loss(z1: T.Node, z2: T.Node, zhat: T.Node, cfg: LossConfig) -> T.Node:
    """Cross-coding loss pulling both view embeddings towards the fused one."""
    _same_shape(z1, z2, zhat, where="mcr_loss")
    if not cfg.mcr_through_zhat:
        zhat = T.detach(zhat)
    mu, lam = cfg.coding_coefficients(*zhat.shape)
    out = None
    for zt in (z1, z2):
        cross = T.matmul(zhat, T.transpose(zt))
        term = T.scale(T.power_series_trace(cross, cfg.taylor_m, lam), -mu)
        out = term if out is None else T.add(out, term)
    return out


def barlow_twins_loss(z1: T.Node, z2: T.Node, bt_offdiag: float, eps: float = 1e-12) -> T.Node:
    _same_shape(z1, z2, where="barlow_twins_loss")
    n = z1.shape[0]
    if n < 2:
        raise ContractError("barlow_twins_loss: need at least 2 samples to standardize")

    def standardize(z):
        centered = T.sub(z, T.mean_rows(z))
        std = T.sqrt(T.add(T.mean_rows(T.square(centered)), eps))
        return T.div(centered, std)

    c = T.scale(T.matmul(T.transpose(standardize(z1)), standardize(z2)), 1.0 / n)
    diag = T.diag_part(c)
    on = T.total(T.square(T.sub(1.0, diag)))
    off = T.sub(T.total(T.square(c)), T.total(T.square(diag)))
    return T.add(on, T.scale(off, bt_offdiag))


def byol_loss(pred: T.Node, target) -> T.Node:
    """Mean of 2 - 2 cos(p_i, t_i); the target never receives gradient."""
    target = T.const(target.value if isinstance(target, T.Node) else target)
    _same_shape(pred, target, where="byol_loss")
    cos = T.sum_cols(T.mul(T.row_normalize(pred), T.row_normalize(target)))
    return T.mean(T.sub(2.0, T.scale(cos, 2.0)))


def counterfactual_loss(z1: T.Node, z2: T.Node, cfg: LossConfig) -> T.Node:
    """Mean squared view distance minus the smaller coding entropy of the two views."""
    _same_shape(z1, z2, where="counterfactual_loss")
    dist = T.mean(T.sum_cols(T.square(T.sub(z1, z2))))
    h_min = T.minimum(coding_entropy(z1, cfg), coding_entropy(z2, cfg))
    return T.sub(dist, h_min)


def with_zhat_gradient(cfg: LossConfig) -> LossConfig:
    return replace(cfg, mcr_through_zhat=True)
