"""Parameter containers and the few network blocks shared by the models."""

from __future__ import annotations

import numpy as np

from . import ndiff as nd


class ParamSet:
    """Ordered name -> Tensor mapping; names are dotted paths used in checkpoints."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        t = nd.Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def state(self):
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state):
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


def glorot(rng, fan_in, fan_out, shape=None):
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape or (fan_in, fan_out))


def add_mlp(ps, prefix, rng, sizes, stacked=None):
    """Register a perceptron; ``stacked=m`` creates m independent copies along axis 0."""
    lead = () if stacked is None else (stacked,)
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        ps.add(f"{prefix}.W{i}", glorot(rng, a, b, lead + (a, b)))
        ps.add(f"{prefix}.b{i}", np.zeros(lead + (b,)))


def mlp(ps, prefix, x, depth, act=nd.sigmoid):
    """x: (..., in). Activation between layers, none after the last."""
    for i in range(depth):
        x = x @ ps[f"{prefix}.W{i}"] + ps[f"{prefix}.b{i}"]
        if i < depth - 1:
            x = act(x)
    return x


def stacked_mlp(ps, prefix, x, depth, act=nd.sigmoid):
    """x: (B, m, in); copy k of the stacked perceptron acts on x[:, k]."""
    for i in range(depth):
        x = nd.einsum("bmi,mio->bmo", x, ps[f"{prefix}.W{i}"]) + ps[f"{prefix}.b{i}"]
        if i < depth - 1:
            x = act(x)
    return x


def add_transformer_layer(ps, prefix, rng, d, ff_mult=2):
    f = ff_mult * d
    ps.add(f"{prefix}.ln1.g", np.ones(d))
    ps.add(f"{prefix}.ln1.b", np.zeros(d))
    for w in ("Wq", "Wk", "Wv", "Wo"):
        ps.add(f"{prefix}.{w}", glorot(rng, d, d))
    ps.add(f"{prefix}.ln2.g", np.ones(d))
    ps.add(f"{prefix}.ln2.b", np.zeros(d))
    ps.add(f"{prefix}.ff.W0", glorot(rng, d, f))
    ps.add(f"{prefix}.ff.b0", np.zeros(f))
    ps.add(f"{prefix}.ff.W1", glorot(rng, f, d))
    ps.add(f"{prefix}.ff.b1", np.zeros(d))


def _split_heads(x, heads):
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, heads, d // heads))
    return nd.swapaxes(x, -2, -3)


def _merge_heads(x):
    x = nd.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(tuple(lead) + (n, h * dh))


def transformer_layer(ps, prefix, x, heads, key_mask=None):
    """Pre-norm block: x + MHA(LN x), then x + FF(LN x). No causal mask.

    ``key_mask``: bool (..., n) marking real tokens; padded keys are ignored.
    """
    d = x.shape[-1]
    if d % heads:
        raise ValueError(f"head count {heads} does not divide width {d}")
    h = nd.layer_norm(x, ps[f"{prefix}.ln1.g"], ps[f"{prefix}.ln1.b"])
    q = _split_heads(h @ ps[f"{prefix}.Wq"], heads)
    k = _split_heads(h @ ps[f"{prefix}.Wk"], heads)
    v = _split_heads(h @ ps[f"{prefix}.Wv"], heads)
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    att = _merge_heads(nd.scaled_dot_product_attention(q, k, v, key_mask=mask))
    x = x + att @ ps[f"{prefix}.Wo"]
    h = nd.layer_norm(x, ps[f"{prefix}.ln2.g"], ps[f"{prefix}.ln2.b"])
    h = nd.silu(h @ ps[f"{prefix}.ff.W0"] + ps[f"{prefix}.ff.b0"])
    return x + h @ ps[f"{prefix}.ff.W1"] + ps[f"{prefix}.ff.b1"]
