"""Parametric pieces of the meta-learner.

Parameters live in flat ``dict[str, array]`` maps whose insertion order is the
flattening order.  Weight matrices are stored ``(out, in)`` so that row ``i``
belongs to output unit ``i``.  Any function here accepts arrays or autodiff
nodes, and task-specific tensors may carry leading batch axes (one entry per
task) in front of their natural shape.

Task network layout, layer-major with weights before biases::

    w0 (H1, 1 + bt)   b0 (H1,)   w1 (H2, H1)   b1 (H2,) ...   wL (1, HL)   bL (1,)   bt (bt,)
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .rng import MODEL_INIT, CounterRng

ENCODER_INPUTS = ("covariates", "pairs")


@dataclass(frozen=True)
class Architecture:
    hidden: tuple = (100, 100, 100)
    bias_transform: int = 20
    latent: int = 28
    decoder_hidden: int = 32
    encoder_input: str = "covariates"
    input_scale: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.encoder_input not in ENCODER_INPUTS:
            raise ValueError(f"encoder_input must be one of {ENCODER_INPUTS}")
        if self.latent < 1 or any(h < 1 for h in self.hidden) or self.bias_transform < 0:
            raise ValueError("invalid architecture sizes")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")

    @property
    def layer_widths(self):
        """(in, out) per task-network layer."""
        dims = (1 + self.bias_transform,) + self.hidden + (1,)
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d, hidden=tuple(d["hidden"])))


MINIATURE = Architecture(hidden=(4, 4), bias_transform=2, latent=3, decoder_hidden=4)


# ---------------------------------------------------------------- layouts

def task_layout(arch: Architecture, prefix: str = ""):
    out = []
    for l, (i, o) in enumerate(arch.layer_widths):
        out.append((f"{prefix}w{l}", (o, i)))
        out.append((f"{prefix}b{l}", (o,)))
    if arch.bias_transform:
        out.append((f"{prefix}bt", (arch.bias_transform,)))
    return out


def encoder_layout(arch: Architecture):
    H = arch.latent
    d_in = 1 if arch.encoder_input == "covariates" else 2
    return [("enc.w_in", (H, d_in)), ("enc.w_h", (H, H)), ("enc.b", (H,)),
            ("enc.mu_w", (H, H)), ("enc.mu_b", (H,)),
            ("enc.lv_w", (H, H)), ("enc.lv_b", (H,))]


def decoder_layout(arch: Architecture):
    return [("dec.w0", (arch.decoder_hidden, arch.latent)), ("dec.b0", (arch.decoder_hidden,)),
            ("dec.w1", (2, arch.decoder_hidden)), ("dec.b1", (2,))]


def initializer_layout(arch: Architecture):
    out = task_layout(arch, "base.")
    for l, (_, o) in enumerate(arch.layer_widths):
        out.append((f"gate.u{l}", (o, arch.latent)))
        out.append((f"gate.c{l}", (o,)))
    return out


def meta_layout(arch: Architecture, algorithm: str = "ours"):
    """Layout of every meta-parameter for ``algorithm`` (``ours`` or a baseline)."""
    if algorithm in ("ours", "mmaml-lite"):
        return encoder_layout(arch) + decoder_layout(arch) + initializer_layout(arch)
    return task_layout(arch, "theta.")


def layout_size(layout) -> int:
    return int(sum(math.prod(s) for _, s in layout))


def flatten(params: dict, layout) -> np.ndarray:
    return np.concatenate([np.asarray(ad.value_of(params[k]), dtype=np.float64).reshape(-1)
                           for k, _ in layout])


def unflatten(vec, layout) -> dict:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != layout_size(layout):
        raise ValueError(f"flat vector has {vec.size} entries, layout needs {layout_size(layout)}")
    out, pos = {}, 0
    for k, shape in layout:
        n = math.prod(shape)
        out[k] = vec[pos:pos + n].reshape(shape).copy()
        pos += n
    return out


def sub_params(params: dict, prefix: str) -> dict:
    """Entries whose key starts with ``prefix``, with the prefix stripped."""
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def glorot_limit(shape) -> float:
    fan_out, fan_in = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(rng: CounterRng | int, layout) -> dict:
    """Glorot-uniform matrices, zero vectors (biases, bias transformation, log-variance bias)."""
    if not isinstance(rng, CounterRng):
        rng = CounterRng(rng, MODEL_INIT, 0)
    out = {}
    for k, shape in layout:
        if len(shape) == 2:
            lim = glorot_limit(shape)
            out[k] = rng.uniform(math.prod(shape), -lim, lim).reshape(shape)
        else:
            out[k] = np.zeros(shape)
    return out


# ---------------------------------------------------------------- forward passes

def _batch_shape(x):
    return ad.shape_of(x)[:-1]


def _linear(h, w, b):
    """``h @ w.T + b`` where ``h`` is (..., n, in) and ``w``/``b`` may be batched."""
    out = ad.matmul(h, ad.swapaxes(w, -1, -2))
    bshape = ad.shape_of(b)
    return ad.add(out, ad.reshape(b, bshape[:-1] + (1, bshape[-1])))


def mlp_forward(params: dict, x, arch: Architecture):
    """Predictions of the task network, shape (..., n), for covariates (..., n).

    ReLU on hidden layers, linear output, bias transformation concatenated to
    every input row.
    """
    x = np.asarray(x, dtype=np.float64)
    h = (x * (1.0 / arch.input_scale))[..., None]
    n_layers = len(arch.layer_widths)
    lead = _batch_shape(params["w0"])[:-1]
    if arch.bias_transform:
        bt = params["bt"]
        bt_lead = ad.shape_of(bt)[:-1]
        batch = np.broadcast_shapes(lead, bt_lead, x.shape[:-1])
        bt_rows = ad.broadcast_to(ad.reshape(bt, bt_lead + (1, arch.bias_transform)),
                                  batch + (x.shape[-1], arch.bias_transform))
        h = ad.concat([np.broadcast_to(h, batch + h.shape[-2:]), bt_rows], axis=-1)
    for l in range(n_layers):
        h = _linear(h, params[f"w{l}"], params[f"b{l}"])
        if l < n_layers - 1:
            h = ad.relu(h)
    return ad.reshape(h, ad.shape_of(h)[:-1])


def _encoder_inputs(xs, ys, arch: Architecture):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[-1] == 0:
        raise ValueError("encode_covariates: empty covariate set")
    order = np.argsort(xs, axis=-1, kind="stable")
    xs_sorted = np.take_along_axis(xs, order, axis=-1) * (1.0 / arch.input_scale)
    if arch.encoder_input == "covariates":
        return xs_sorted[..., None]
    if ys is None:
        raise ValueError("encoder_input='pairs' needs responses")
    ys_sorted = np.take_along_axis(np.asarray(ys, dtype=np.float64), order, axis=-1)
    return np.stack([xs_sorted, ys_sorted], axis=-1)


def encode_covariates(enc: dict, xs, arch: Architecture, ys=None):
    """Posterior parameters ``(mu, sigma)`` over the task embedding, each (..., latent).

    Covariates are sorted before the tanh recurrence so the result is a
    function of the set, not the sequence.
    """
    inp = _encoder_inputs(xs, ys, arch)           # (..., n, d_in)
    pre = ad.matmul(inp, ad.swapaxes(enc["w_in"], -1, -2))   # (..., n, H)
    n = inp.shape[-2]
    H = arch.latent
    h = None
    for t in range(n):
        step = ad.getitem(pre, (Ellipsis, slice(t, t + 1), slice(None)))
        if h is not None:
            step = ad.add(step, ad.matmul(h, ad.swapaxes(enc["w_h"], -1, -2)))
        h = ad.tanh(ad.add(step, enc["b"]))
    mu = _linear(h, enc["mu_w"], enc["mu_b"])
    logvar = _linear(h, enc["lv_w"], enc["lv_b"])
    lead = ad.shape_of(mu)[:-2]
    mu = ad.reshape(mu, lead + (H,))
    sigma = ad.exp(ad.mul(ad.reshape(logvar, lead + (H,)), 0.5))
    return mu, sigma


def reparameterize(kappa, eps):
    mu, sigma = kappa
    if ad.shape_of(mu) != np.shape(eps):
        raise ad.ShapeError(f"reparameterize: eps shape {np.shape(eps)} != mu shape {ad.shape_of(mu)}")
    return ad.add(mu, ad.mul(eps, sigma))


def decoder_forward(dec: dict, z):
    """Mean and standard deviation of the Gaussian over covariates, each (...,)."""
    zz = ad.reshape(z, ad.shape_of(z)[:-1] + (1, ad.shape_of(z)[-1]))
    h = ad.tanh(_linear(zz, dec["w0"], dec["b0"]))
    out = _linear(h, dec["w1"], dec["b1"])
    lead = ad.shape_of(out)[:-2]
    mu = ad.reshape(ad.getitem(out, (Ellipsis, 0, 0)), lead)
    log_sigma = ad.reshape(ad.getitem(out, (Ellipsis, 0, 1)), lead)
    return mu, ad.exp(log_sigma)


def decode_covariate_loglik(dec: dict, z, xs, arch: Architecture | None = None):
    """Summed Gaussian log-likelihood of covariates ``xs`` (..., n) given ``z``; shape (...,)."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[-1] == 0:
        raise ValueError("decode_covariate_loglik: empty covariate set")
    mu, sigma = decoder_forward(dec, z)
    lead = ad.shape_of(mu)
    mu_ = ad.reshape(mu, lead + (1,))
    sigma_ = ad.reshape(sigma, lead + (1,))
    return gaussian_loglik_rows(xs, mu_, sigma_)


def gaussian_loglik_rows(x, mu, sigma):
    """Per-row (last axis summed) Gaussian log-density."""
    var = ad.square(sigma)
    terms = ad.add(ad.mul(ad.log(var), -0.5), ad.mul(ad.div(ad.square(ad.sub(x, mu)), var), -0.5))
    terms = ad.add(terms, -0.5 * math.log(2.0 * math.pi))
    shape = np.broadcast_shapes(np.shape(x), ad.shape_of(mu), ad.shape_of(sigma))
    return ad.sum(ad.broadcast_to(terms, shape), axis=-1)


def kl_rows(kappa):
    mu, sigma = kappa
    return ad.gaussian_kl_to_standard(mu, sigma, axis=-1)


def init_from_latent(init: dict, z, arch: Architecture, gates_frozen: bool = False,
                     batch_shape=None):
    """Modulated initial task-network parameters for embedding ``z`` (..., latent).

    Layer ``l`` output unit ``i`` has its weight row and bias scaled by
    ``sigmoid(u_l z + c_l)[i]``.  The bias transformation is copied unchanged.
    With ``gates_frozen`` the base parameters are returned unmodulated
    (broadcast to ``batch_shape``), and ``z`` is ignored.
    """
    if batch_shape is None:
        batch_shape = ad.shape_of(z)[:-1]
    batch_shape = tuple(batch_shape)
    out = {}
    for l, _ in enumerate(arch.layer_widths):
        w, b = init[f"base.w{l}"], init[f"base.b{l}"]
        if gates_frozen:
            out[f"w{l}"] = ad.broadcast_to(w, batch_shape + ad.shape_of(w))
            out[f"b{l}"] = ad.broadcast_to(b, batch_shape + ad.shape_of(b))
            continue
        zz = ad.reshape(z, batch_shape + (1, arch.latent))
        gate = ad.sigmoid(_linear(zz, init[f"gate.u{l}"], init[f"gate.c{l}"]))   # (..., 1, out)
        out[f"w{l}"] = ad.mul(w, ad.swapaxes(gate, -1, -2))
        out[f"b{l}"] = ad.mul(b, ad.reshape(gate, batch_shape + ad.shape_of(b)))
    if arch.bias_transform:
        bt = init["base.bt"]
        out["bt"] = ad.broadcast_to(bt, batch_shape + ad.shape_of(bt))
    return out
