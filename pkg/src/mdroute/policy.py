"""Attention policy with FiLM-conditioned customer embeddings.

All forward functions are written against :mod:`mdroute.autodiff` so that one
code path serves both training (tracked parameters) and inference (plain
arrays).  Batched functions take a leading instance axis ``B``; decoding runs
``N`` trajectories per instance in parallel.

Weight matrices are stored ``(out, in)``; a linear map is ``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_var
from .instances import Instance, make_rng

CONTEXT_DIM = 5


@dataclass(frozen=True)
class PolicyConfig:
    d: int = 16
    heads: int = 2
    layers: int = 2
    ff_hidden: int = 64
    clip: float = 10.0
    norm_eps: float = 1e-5
    use_film: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("embedding dimension must be divisible by the head count")

    @property
    def dk(self) -> int:
        return self.d // self.heads

    def to_dict(self):
        return asdict(self)


FULL_SCALE = PolicyConfig(d=128, heads=8, layers=6, ff_hidden=512)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: PolicyConfig, seed: int = 0, film_identity: bool = False) -> dict[str, np.ndarray]:
    """Fresh parameters; ``film_identity`` makes FiLM start as the identity map."""
    rng = make_rng(seed)
    d, da = cfg.d, cfg.ff_hidden
    p = {}

    def linear(name, n_out, n_in, bias=True):
        p[name + ".W"] = _uniform(rng, (n_out, n_in), n_in)
        if bias:
            p[name + ".b"] = _uniform(rng, (n_out,), n_in)

    linear("embed.depot", d, 2)
    linear("embed.customer", d, 6)
    linear("film.gamma", d, CONTEXT_DIM)
    linear("film.beta", d, CONTEXT_DIM)
    if film_identity:
        p["film.gamma.W"][:] = 0.0
        p["film.gamma.b"][:] = 1.0
        p["film.beta.W"][:] = 0.0
        p["film.beta.b"][:] = 0.0
    for l in range(cfg.layers):
        pre = f"enc{l}."
        for w in ("q", "k", "v", "o"):
            linear(pre + "attn." + w, d, d, bias=False)
        p[pre + "norm1.scale"] = np.ones(d)
        p[pre + "norm1.shift"] = np.zeros(d)
        linear(pre + "ff1", da, d)
        linear(pre + "ff2", d, da)
        p[pre + "norm2.scale"] = np.ones(d)
        p[pre + "norm2.shift"] = np.zeros(d)
    linear("dec.q", d, d + CONTEXT_DIM, bias=False)
    linear("dec.k", d, d, bias=False)
    linear("dec.v", d, d, bias=False)
    linear("dec.o", d, d, bias=False)
    return p


def _lin(x, P, name, bias=True):
    y = x @ ad.transpose(P[name + ".W"], (1, 0))
    if bias:
        y = y + P[name + ".b"]
    return y


def _vars(params) -> dict:
    return {k: as_var(v) for k, v in params.items()}


# -- encoder ---------------------------------------------------------------

def embed_batch(depot_x, cust_x, P):
    """Separate linear projections for depots (B, m, 2) and customers (B, n, 6)."""
    return _lin(as_var(depot_x), P, "embed.depot"), _lin(as_var(cust_x), P, "embed.customer")


def film_batch(h_cust, z, P):
    """gamma(z) * h + beta(z), row-wise over customers; z has shape (B, 5)."""
    z = as_var(z)
    B, d = z.shape[0], h_cust.shape[-1]
    gamma = ad.reshape(_lin(z, P, "film.gamma"), (B, 1, d))
    beta = ad.reshape(_lin(z, P, "film.beta"), (B, 1, d))
    return h_cust * gamma + beta


def instance_norm(x, P, name, eps):
    """Normalize each channel across the node axis of every instance."""
    mu = ad.mean(x, axis=1, keepdims=True)
    v = ad.var(x, axis=1, keepdims=True)
    return (x - mu) * ad.rsqrt(v + eps) * P[name + ".scale"] + P[name + ".shift"]


def _split_heads(x, A):
    B, V, d = x.shape
    return ad.transpose(ad.reshape(x, (B, V, A, d // A)), (0, 2, 1, 3))


def _merge_heads(x):
    B, A, V, dk = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, V, A * dk))


def attention(h, P, pre, cfg: PolicyConfig, weights_out: list | None = None):
    A = cfg.heads
    q = _split_heads(_lin(h, P, pre + "attn.q", bias=False), A)
    k = _split_heads(_lin(h, P, pre + "attn.k", bias=False), A)
    v = _split_heads(_lin(h, P, pre + "attn.v", bias=False), A)
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(cfg.dk))
    w = ad.softmax(scores, axis=-1)
    if weights_out is not None:
        weights_out.append(w.value)
    return _lin(_merge_heads(w @ v), P, pre + "attn.o", bias=False)


def encoder_layer(h, P, l, cfg: PolicyConfig, weights_out=None):
    pre = f"enc{l}."
    h = instance_norm(h + attention(h, P, pre, cfg, weights_out), P, pre + "norm1", cfg.norm_eps)
    ff = _lin(ad.relu(_lin(h, P, pre + "ff1")), P, pre + "ff2")
    out = instance_norm(h + ff, P, pre + "norm2", cfg.norm_eps)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError(f"non-finite activations in encoder layer {l}")
    return out


def encode_batch(depot_x, cust_x, z, P, cfg: PolicyConfig, weights_out=None):
    """Node embeddings after the last encoder layer, shape (B, m+n, d)."""
    hd, hc = embed_batch(depot_x, cust_x, P)
    if cfg.use_film:
        hc = film_batch(hc, z, P)
    h = ad.concat([hd, hc], axis=1)
    for l in range(cfg.layers):
        h = encoder_layer(h, P, l, cfg, weights_out)
    return h


def instance_inputs(instances):
    depot_x = np.stack([i.depot_coords for i in instances])
    cust_x = np.stack([i.customer_features() for i in instances])
    z = np.stack([i.flags.z for i in instances])
    return depot_x, cust_x, z


# -- decoder ---------------------------------------------------------------

@dataclass
class DecoderCache:
    H: Var  # (B, V, d)
    keys: Var  # (B, A, dk, V)
    values: Var  # (B, A, V, dk)
    logit_keys: Var  # (B, d, V)


def precompute(H, P, cfg: PolicyConfig) -> DecoderCache:
    """Keys and values that stay fixed for the whole decoding of an instance."""
    A = cfg.heads
    k = ad.transpose(_split_heads(_lin(H, P, "dec.k", bias=False), A), (0, 1, 3, 2))
    v = _split_heads(_lin(H, P, "dec.v", bias=False), A)
    return DecoderCache(H, k, v, ad.transpose(H, (0, 2, 1)))


def decode_batch(cache: DecoderCache, prev, ctx, mask, P, cfg: PolicyConfig, return_logits=False):
    """Log-probabilities (B, N, V) of the next node for N trajectories per instance.

    prev: (B, N) previous node; ctx: (B, N, 5) state scalars; mask: (B, N, V).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every decoding row needs at least one feasible node")
    B, N = prev.shape
    A, dk = cfg.heads, cfg.dk
    rows = np.arange(B)[:, None]
    h_prev = cache.H[rows, prev]  # (B, N, d)
    q_in = ad.concat([h_prev, as_var(ctx)], axis=2)
    q = ad.transpose(ad.reshape(_lin(q_in, P, "dec.q", bias=False), (B, N, A, dk)), (0, 2, 1, 3))
    scores = ad.scale(q @ cache.keys, 1.0 / np.sqrt(dk))  # (B, A, N, V)
    att = ad.softmax(scores, mask[:, None, :, :], axis=-1)
    glimpse = ad.reshape(ad.transpose(att @ cache.values, (0, 2, 1, 3)), (B, N, cfg.d))
    hc = _lin(glimpse, P, "dec.o", bias=False)
    u = ad.scale(ad.tanh(ad.scale(hc @ cache.logit_keys, 1.0 / np.sqrt(dk))), cfg.clip)
    logp = ad.log_softmax(u, mask, axis=-1)
    if return_logits:
        return logp, u
    return logp


# -- single-instance API -------------------------------------------------

def embed(instance: Instance, params) -> np.ndarray:
    """Pre-FiLM node embeddings (m+n, d), depots first."""
    P = _vars(params)
    hd, hc = embed_batch(instance.depot_coords[None], instance.customer_features()[None], P)
    return np.concatenate([hd.value[0], hc.value[0]])


def film(customer_embeds, z, params) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (CONTEXT_DIM,):
        raise ValueError(f"conditioning vector must have length {CONTEXT_DIM}")
    h = np.asarray(customer_embeds, dtype=float)
    return film_batch(as_var(h[None]), z[None], _vars(params)).value[0]


def encode(embeds, params, cfg: PolicyConfig, weights_out=None) -> np.ndarray:
    """Run the encoder stack on already-embedded (and modulated) nodes."""
    h = as_var(np.asarray(embeds, dtype=float)[None])
    if not np.all(np.isfinite(h.value)):
        raise FloatingPointError("non-finite input embeddings")
    P = _vars(params)
    for l in range(cfg.layers):
        h = encoder_layer(h, P, l, cfg, weights_out)
    return h.value[0]


def encode_instance(instance: Instance, params, cfg: PolicyConfig) -> np.ndarray:
    depot_x, cust_x, z = instance_inputs([instance])
    return encode_batch(depot_x, cust_x, z, _vars(params), cfg).value[0]


def decode_step(H, state, mask, params, cfg: PolicyConfig, instance: Instance) -> np.ndarray:
    """Probability vector over all nodes for one rollout state."""
    from .env import context_scalars

    P = _vars(params)
    cache = precompute(as_var(np.asarray(H)[None]), P, cfg)
    prev = np.array([[state.position]])
    ctx = np.array([[context_scalars(instance, state)]])
    mask = np.asarray(mask, dtype=bool)[None, None]
    if not mask.any():
        raise ValueError("all nodes are masked")
    logp = decode_batch(cache, prev, ctx, mask, P, cfg)
    return np.exp(logp.value[0, 0])


def select(probs, mode: str = "greedy", rng=None) -> int:
    """Greedy (lowest index wins ties) or sampled node choice."""
    probs = np.asarray(probs, dtype=float)
    total = probs.sum()
    if not total > 0 or np.any(probs < 0):
        raise ValueError("degenerate probability vector")
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        return int(select_batch(probs[None], "sample", rng)[0])
    raise ValueError(f"unknown selection mode {mode!r}")


def select_batch(probs, mode, rng=None) -> np.ndarray:
    """Row-wise selection over the last axis of a (k, V) array."""
    if mode == "greedy":
        return probs.argmax(axis=-1)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    last_nonzero = probs.shape[-1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=-1)
    return np.minimum(idx, last_nonzero)
