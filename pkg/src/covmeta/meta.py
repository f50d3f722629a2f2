"""Covariate-aware meta-learner and the MAML / Reptile baselines.

All functions work on a batch of tasks at once: covariates and responses are
``(B, n)`` arrays and every per-task quantity carries a leading batch axis.
Tasks never interact inside a batch; the inner-loop loss is the sum of the
per-task losses, so its gradient with respect to batched task parameters is
exactly the stack of per-task gradients.

The objective minimised for ``ours`` is, averaged over the batch::

    a_l2 * ||beta||^2 + a_R * (-sum_j log p(x_j | z_q)) + a_KL * KL(q(z | x_query) || N(0, I))
        + 1/2 * sum_j (y_j - f(x_j; lambda*))^2

with ``lambda*`` obtained by K SGD steps on the support set starting from the
modulated initialisation ``f_beta(z_s)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .nets import Architecture
from .optim import AdamState, adam_step, clip_by_global_norm, sgd_step

ALGORITHMS = ("ours", "maml", "reptile", "mmaml-lite")
ELBO_COVARIATES = ("query", "support", "both")


@dataclass(frozen=True)
class MetaConfig:
    algorithm: str = "ours"
    inner_steps: int = 5
    inner_lr: float = 0.0001
    outer_lr: float = 0.001
    alpha_r: float = 0.2
    alpha_kl: float = 0.1
    alpha_l2: float = 0.0005
    first_order: bool = False
    elbo_covariates: str = "query"
    gates_frozen: bool = False
    encoder_bypass: bool = False
    reptile_step: float = 0.1
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.elbo_covariates not in ELBO_COVARIATES:
            raise ValueError(f"elbo_covariates must be one of {ELBO_COVARIATES}")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if min(self.alpha_r, self.alpha_kl, self.alpha_l2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.inner_lr < 0 or self.outer_lr < 0 or self.reptile_step < 0 or self.grad_clip < 0:
            raise ValueError("learning rates must be non-negative")
        if self.encoder_bypass and not self.gates_frozen:
            raise ValueError("encoder_bypass requires gates_frozen")
        if self.encoder_bypass and (self.alpha_r or self.alpha_kl):
            raise ValueError("encoder_bypass requires alpha_r = alpha_kl = 0")

    def to_dict(self):
        return asdict(self)


def preset(name: str, **overrides) -> tuple[Architecture, MetaConfig]:
    """Named configurations: ``ours``, ``maml``, ``reptile``, ``mmaml-lite``, ``ours-kl001``.

    ``arch`` and ``config`` keys in ``overrides`` go to the matching object.
    """
    arch_kw = dict(overrides.pop("arch", {}))
    if name == "ours":
        cfg = MetaConfig("ours")
    elif name == "ours-kl001":
        cfg = MetaConfig("ours", alpha_kl=0.01)
    elif name == "maml":
        cfg = MetaConfig("maml", alpha_r=0.0, alpha_kl=0.0)
    elif name == "reptile":
        cfg = MetaConfig("reptile", alpha_r=0.0, alpha_kl=0.0)
    elif name == "mmaml-lite":
        cfg = MetaConfig("mmaml-lite", alpha_r=0.0, alpha_kl=0.0)
        arch_kw.setdefault("encoder_input", "pairs")
    else:
        raise ValueError(f"unknown preset {name!r}")
    if overrides:
        cfg = MetaConfig(**dict(cfg.to_dict(), **overrides))
    return Architecture(**arch_kw), cfg


def uses_encoder(cfg: MetaConfig) -> bool:
    return cfg.algorithm in ("ours", "mmaml-lite")


# ---------------------------------------------------------------- losses

def task_nll(lam: dict, xs, ys, arch: Architecture):
    """Per-task ``1/2 * sum_j (y_j - f(x_j))^2``; shape (...,)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ad.ShapeError(f"task_nll: covariates {xs.shape} vs responses {ys.shape}")
    resid = ad.sub(nets.mlp_forward(lam, xs, arch), ys)
    return ad.mul(ad.sum(ad.square(resid), axis=-1), 0.5)


def mse(lam: dict, xs, ys, arch: Architecture) -> np.ndarray:
    pred = ad.value_of(nets.mlp_forward(lam, xs, arch))
    return np.mean((pred - ys) ** 2, axis=-1)


def l2_penalty(params: dict):
    total = None
    for v in params.values():
        s = ad.sum(ad.square(v))
        total = s if total is None else ad.add(total, s)
    return total


@dataclass
class LossBreakdown:
    """Batch-mean components of the meta-objective (nodes while on a tape)."""
    recon: object
    kl: object
    task_nll: object
    l2: object
    total: object

    def values(self) -> dict:
        return {k: float(ad.value_of(getattr(self, k)))
                for k in ("recon", "kl", "task_nll", "l2", "total")}


def combine(l2, recon, kl, nll, cfg: MetaConfig):
    total = ad.mul(l2, cfg.alpha_l2)
    total = ad.add(total, ad.mul(recon, cfg.alpha_r))
    total = ad.add(total, ad.mul(kl, cfg.alpha_kl))
    return ad.add(total, nll)


# ---------------------------------------------------------------- inner loop

def _sgd_once(lam: dict, xs, ys, arch, lr, first_order):
    tape = next((v.tape for v in lam.values() if ad.is_node(v)), None)
    local = tape is None
    if local:
        tape = ad.Tape()
    nodes = {k: v if ad.is_node(v) else tape.variable(v) for k, v in lam.items()}
    per_task = task_nll(nodes, xs, ys, arch)
    loss = ad.sum(per_task)
    create = tape.higher_order and not first_order
    grads = tape.backward(loss, list(nodes.values()), create_graph=create)
    src = lam if not local else {k: ad.value_of(v) for k, v in lam.items()}
    new = {k: sgd_step(src[k], g, lr) for (k, g) in zip(nodes, grads)}
    return new, np.array(ad.value_of(per_task))


def inner_sgd(lam0: dict, xs, ys, arch: Architecture, steps: int, lr: float,
              first_order: bool = False):
    """K plain SGD steps on the support loss.

    Returns ``(lambda_final, support_losses)`` where ``support_losses`` has
    ``steps + 1`` per-task entries, the first one taken before any update.
    When ``lam0`` lives on a higher-order tape and ``first_order`` is false,
    the whole trajectory stays differentiable.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    lam = dict(lam0)
    losses = []
    for _ in range(steps):
        lam, loss = _sgd_once(lam, xs, ys, arch, lr, first_order)
        losses.append(loss)
    vals = {k: ad.value_of(v) for k, v in lam.items()}
    losses.append(np.array(ad.value_of(task_nll(vals, xs, ys, arch))))
    return lam, losses


@dataclass
class AdaptResult:
    lambda_init: dict
    lambda_final: dict
    support_losses: list
    z: object = None
    eps: np.ndarray | None = None
    kappa: tuple | None = None


def initial_params(beta: dict, support_x, support_y, eps, arch: Architecture, cfg: MetaConfig):
    """``(lambda0, z, kappa)`` for a batch, for any algorithm."""
    B = np.shape(support_x)[:-1]
    if not uses_encoder(cfg):
        theta = nets.sub_params(beta, "theta.")
        return {k: ad.broadcast_to(v, B + ad.shape_of(v)) for k, v in theta.items()}, None, None
    init = {k: v for k, v in beta.items() if k.startswith(("base.", "gate."))}
    if cfg.encoder_bypass:
        return nets.init_from_latent(init, None, arch, gates_frozen=True, batch_shape=B), None, None
    kappa = nets.encode_covariates(nets.sub_params(beta, "enc."), support_x, arch, support_y)
    z = nets.reparameterize(kappa, eps)
    return nets.init_from_latent(init, z, arch, gates_frozen=cfg.gates_frozen), z, kappa


def adapt(beta: dict, support_x, support_y, eps, arch: Architecture, cfg: MetaConfig) -> AdaptResult:
    """Encode, sample, initialise, then run the inner loop (exact or first-order)."""
    lam0, z, kappa = initial_params(beta, support_x, support_y, eps, arch, cfg)
    lam, losses = inner_sgd(lam0, support_x, support_y, arch, cfg.inner_steps, cfg.inner_lr,
                            cfg.first_order)
    return AdaptResult(lam0, lam, losses, z, None if eps is None else np.asarray(eps), kappa)


def meta_test_adapt(beta: dict, support_x, support_y, eps, arch: Architecture, cfg: MetaConfig) -> dict:
    """Adapted task parameters as plain arrays (no outer differentiation)."""
    beta = {k: ad.value_of(v) for k, v in beta.items()}
    return {k: ad.value_of(v) for k, v in adapt(beta, support_x, support_y, eps, arch, cfg).lambda_final.items()}


# ---------------------------------------------------------------- outer objective

def _elbo_terms(beta, batch, eps_q, z_s, kappa_s, arch, cfg):
    sx, sy, qx, qy = batch
    dec = nets.sub_params(beta, "dec.")
    if cfg.elbo_covariates == "support":
        kappa, z, xs = kappa_s, z_s, sx
    else:
        if cfg.elbo_covariates == "query":
            xs, ys = qx, qy
        else:
            xs, ys = np.concatenate([sx, qx], axis=-1), np.concatenate([sy, qy], axis=-1)
        kappa = nets.encode_covariates(nets.sub_params(beta, "enc."), xs, arch, ys)
        z = nets.reparameterize(kappa, eps_q)
    recon = ad.neg(nets.decode_covariate_loglik(dec, z, xs))
    kl = nets.kl_rows(kappa)
    return ad.mean(recon), ad.mean(kl)


def outer_objective(beta: dict, batch, eps_s, eps_q, arch: Architecture, cfg: MetaConfig) -> LossBreakdown:
    """Batch-mean meta-objective for ``ours`` / ``mmaml-lite`` (or MAML via ``maml_objective``)."""
    if not uses_encoder(cfg):
        return maml_objective(beta, batch, arch, cfg)
    sx, sy, qx, qy = batch
    res = adapt(beta, sx, sy, eps_s, arch, cfg)
    nll = ad.mean(task_nll(res.lambda_final, qx, qy, arch))
    if cfg.encoder_bypass:
        recon = kl = 0.0
    else:
        recon, kl = _elbo_terms(beta, batch, eps_q, res.z, res.kappa, arch, cfg)
    l2 = l2_penalty(beta)
    return LossBreakdown(recon, kl, nll, l2, combine(l2, recon, kl, nll, cfg))


def maml_objective(theta: dict, batch, arch: Architecture, cfg: MetaConfig) -> LossBreakdown:
    """Mean query loss after adapting from the shared initialisation, plus ``a_l2 ||theta||^2``."""
    sx, sy, qx, qy = batch
    B = np.shape(sx)[:-1]
    lam0 = {k[len("theta."):]: ad.broadcast_to(v, B + ad.shape_of(v)) for k, v in theta.items()}
    lam, _ = inner_sgd(lam0, sx, sy, arch, cfg.inner_steps, cfg.inner_lr, cfg.first_order)
    nll = ad.mean(task_nll(lam, qx, qy, arch))
    l2 = l2_penalty(theta)
    return LossBreakdown(0.0, 0.0, nll, l2, combine(l2, 0.0, 0.0, nll, cfg))


def draw_eps(rng, batch_size: int, arch: Architecture):
    eps_s = rng.normal(batch_size * arch.latent).reshape(batch_size, arch.latent)
    eps_q = rng.normal(batch_size * arch.latent).reshape(batch_size, arch.latent)
    return eps_s, eps_q


def meta_gradient(beta: dict, batch, eps_s, eps_q, arch: Architecture, cfg: MetaConfig):
    """``(grads, breakdown_values)`` of the batch-mean objective w.r.t. every meta-parameter."""
    with ad.Tape(higher_order=not cfg.first_order) as tape:
        nodes = {k: tape.variable(v) for k, v in beta.items()}
        lb = outer_objective(nodes, batch, eps_s, eps_q, arch, cfg)
        grads = tape.backward(lb.total, list(nodes.values()), create_graph=False)
    out = {}
    for k, g in zip(nodes, grads):
        if not np.isfinite(g).all():
            raise ad.NonFiniteError(f"non-finite meta-gradient in {k}")
        out[k] = g
    return out, lb.values()


def objective_value(beta: dict, batch, eps_s, eps_q, arch: Architecture, cfg: MetaConfig) -> float:
    """Objective evaluated without an outer tape (used by finite differences)."""
    return float(ad.value_of(outer_objective(beta, batch, eps_s, eps_q, arch, cfg).total))


def _adam_update(params: dict, state: AdamState, grads: dict, cfg: MetaConfig):
    """Clip the flattened meta-gradient to ``cfg.grad_clip`` and take one Adam step."""
    layout = [(k, np.shape(v)) for k, v in params.items()]
    g, _ = clip_by_global_norm(nets.flatten(grads, layout), cfg.grad_clip)
    state, flat = adam_step(state, nets.flatten(params, layout), g)
    return nets.unflatten(flat, layout), state


def meta_train_step(beta: dict, state: AdamState, batch, rng, arch: Architecture, cfg: MetaConfig):
    """One Adam step on the batch-mean objective.  Returns ``(beta', state', losses)``."""
    if np.shape(batch[0])[0] == 0:
        raise ValueError("empty meta-batch")
    eps_s, eps_q = draw_eps(rng, np.shape(batch[0])[0], arch)
    grads, losses = meta_gradient(beta, batch, eps_s, eps_q, arch, cfg)
    beta, state = _adam_update(beta, state, grads, cfg)
    return beta, state, losses


def maml_adapt(theta: dict, support_x, support_y, arch: Architecture, cfg: MetaConfig) -> dict:
    B = np.shape(support_x)[:-1]
    lam0 = {k[len("theta."):]: np.broadcast_to(ad.value_of(v), B + np.shape(ad.value_of(v)))
            for k, v in theta.items()}
    lam, _ = inner_sgd(lam0, support_x, support_y, arch, cfg.inner_steps, cfg.inner_lr, True)
    return {k: ad.value_of(v) for k, v in lam.items()}


def maml_train_step(theta: dict, state: AdamState, batch, arch: Architecture, cfg: MetaConfig):
    grads, losses = meta_gradient(theta, batch, None, None, arch, cfg)
    theta, state = _adam_update(theta, state, grads, cfg)
    return theta, state, losses


def reptile_train_step(theta: dict, batch, arch: Architecture, cfg: MetaConfig,
                       step_size: float | None = None):
    """``theta + eps_r * mean_i(lambda_i* - theta)`` with ``lambda_i*`` from K support SGD steps."""
    if cfg.inner_steps < 1:
        raise ValueError("reptile needs at least one inner step")
    eps_r = cfg.reptile_step if step_size is None else step_size
    sx, sy, qx, qy = batch
    lam = maml_adapt(theta, sx, sy, arch, cfg)
    new = {}
    for k, v in theta.items():
        diff = lam[k[len("theta."):]] - v
        new[k] = v + eps_r * diff.mean(axis=0)
    # reported for monitoring only; the update itself ignores the query set and l2
    l2 = l2_penalty(theta)
    nll = np.mean(task_nll(lam, qx, qy, arch))
    return new, LossBreakdown(0.0, 0.0, nll, l2, combine(l2, 0.0, 0.0, nll, cfg)).values()
