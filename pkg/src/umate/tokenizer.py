"""Modality encoders/decoders, codebook rounding and the latent token layout.

Every modality is mapped into the same d-dimensional token space: a graph
convolution for the topology (one token per node), a small perceptron for the
density, and one perceptron per property dimension.  Tokens are snapped to the
nearest codebook prototype; gradients cross the snap by the straight-through rule.

All network functions accept a leading batch axis; topology inputs are padded
to a common node count and accompanied by a boolean ``node_mask``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ndiff as nd
from .errors import ContractViolation
from .geometry import lattice_axes
from .layers import ParamSet, add_mlp, add_transformer_layer, glorot, mlp, stacked_mlp, transformer_layer

SEGMENTS = ("topology", "density", "property")
ACTIVATIONS = {"sigmoid": nd.sigmoid, "tanh": nd.tanh, "silu": nd.silu}


# ---------------------------------------------------------------- token layout


@dataclass
class LMTR:
    """Latent tokens of one sample: n topology rows, 1 density row, m property rows."""

    tokens: np.ndarray
    n: int
    m: int
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.n + 1 + self.m:
            raise ContractViolation(f"LMTR: {self.tokens.shape[0]} rows, expected n + 1 + m = {self.n + 1 + self.m}")

    @property
    def h(self):
        return self.n + 1 + self.m

    @property
    def d(self):
        return self.tokens.shape[1]

    def rows(self, segment):
        """Row range of a segment."""
        return {
            "topology": range(0, self.n),
            "density": range(self.n, self.n + 1),
            "property": range(self.n + 1, self.h),
        }[segment]

    def segment(self, segment):
        r = self.rows(segment)
        return self.tokens[r.start:r.stop]

    def disassemble(self):
        return self.segment("topology"), self.segment("density"), self.segment("property")


def assemble_lmtr(X_tok, rho_tok, P_tok, indices=None):
    X_tok = np.atleast_2d(np.asarray(X_tok, dtype=np.float64))
    rho_tok = np.atleast_2d(np.asarray(rho_tok, dtype=np.float64))
    P_tok = np.atleast_2d(np.asarray(P_tok, dtype=np.float64))
    if not X_tok.shape[1] == rho_tok.shape[1] == P_tok.shape[1]:
        raise ContractViolation("assemble_lmtr: token widths differ")
    if rho_tok.shape[0] != 1:
        raise ContractViolation("assemble_lmtr: exactly one density token expected")
    return LMTR(np.concatenate([X_tok, rho_tok, P_tok]), n=X_tok.shape[0], m=P_tok.shape[0], indices=indices)


# ---------------------------------------------------------------- codebook


def check_codebook(Z):
    Z = np.asarray(Z.data if isinstance(Z, nd.Tensor) else Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ContractViolation("codebook must be a non-empty (kappa, d) matrix")
    if not np.all(np.isfinite(Z)):
        raise ContractViolation("codebook has non-finite entries")
    if len(np.unique(Z, axis=0)) != len(Z):
        raise ContractViolation("codebook has duplicate prototypes")
    return Z


def nearest_prototype(tokens, Z):
    """Index of the Euclidean-nearest row of Z for every row of ``tokens``.

    Squared distances come from explicit differences (not the expanded dot-product
    form) so exact ties resolve identically; ``argmin`` keeps the lowest index.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ContractViolation("round_tokens: empty codebook")
    if tokens.shape[-1] != Z.shape[1]:
        raise ContractViolation(f"round_tokens: token width {tokens.shape[-1]} != codebook width {Z.shape[1]}")
    flat = tokens.reshape(-1, Z.shape[1])
    idx = np.empty(len(flat), dtype=np.int64)
    chunk = 4096
    for s in range(0, len(flat), chunk):
        diff = flat[s:s + chunk, None, :] - Z[None, :, :]
        idx[s:s + chunk] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return idx.reshape(tokens.shape[:-1])


def round_tokens(tokens, codebook):
    """(rounded tokens, indices) for plain arrays."""
    Z = np.asarray(codebook.data if isinstance(codebook, nd.Tensor) else codebook, dtype=np.float64)
    idx = nearest_prototype(tokens, Z)
    return Z[idx], idx


class Quantized(NamedTuple):
    st: nd.Tensor  # forward = prototypes, gradient -> encoder output
    rounded: nd.Tensor  # forward = prototypes, gradient -> codebook rows
    indices: np.ndarray


def quantize(tokens, codebook, identity=False):
    """Differentiable rounding.  ``identity=True`` skips the snap (used for gradient checks)."""
    if identity:
        return Quantized(tokens, tokens, np.zeros(tokens.shape[:-1], dtype=np.int64))
    idx = nearest_prototype(tokens.data, codebook.data)
    rounded = nd.take(codebook, idx, axis=0)
    return Quantized(nd.straight_through(tokens, rounded), rounded, idx)


# ---------------------------------------------------------------- tokenizer


def normalized_adjacency(A, mode="self_loop", node_mask=None):
    """Propagation matrix for the graph convolution.

    ``self_loop``: A + I, each row divided by its sum; ``raw``: A unchanged.
    Padded nodes (``node_mask`` False) get all-zero rows and columns.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-1] != A.shape[-2]:
        raise ContractViolation(f"adjacency must be square, got {A.shape}")
    if node_mask is None:
        mask = np.ones(A.shape[:-1], dtype=bool)
    else:
        mask = np.asarray(node_mask, dtype=bool)
    pair = mask[..., :, None] & mask[..., None, :]
    if mode == "raw":
        return np.where(pair, A, 0.0)
    if mode != "self_loop":
        raise ContractViolation(f"unknown adjacency normalization {mode!r}")
    Ahat = np.where(pair, A + np.eye(A.shape[-1]), 0.0)
    deg = Ahat.sum(axis=-1, keepdims=True)
    return np.divide(Ahat, deg, out=np.zeros_like(Ahat), where=deg > 0)


def binarize_adjacency(A_raw, theta=0.5, node_mask=None):
    A_raw = np.asarray(A_raw, dtype=np.float64)
    B = (A_raw >= theta).astype(np.float64)
    B = np.maximum(B, np.swapaxes(B, -1, -2))
    idx = np.arange(B.shape[-1])
    B[..., idx, idx] = 0.0
    if node_mask is not None:
        mask = np.asarray(node_mask, dtype=bool)
        B = np.where(mask[..., :, None] & mask[..., None, :], B, 0.0)
    return B


class TopologyDecoding(NamedTuple):
    X_hat: nd.Tensor  # (..., n, 3)
    A_raw: nd.Tensor  # (..., n, n)
    features: nd.Tensor  # (..., n, d)


class Tokenizer:
    """Parameters and forward passes for every encoder, decoder and the codebook."""

    def __init__(self, cfg, rng=None, ps=None):
        self.cfg = cfg
        self.ps = ps if ps is not None else ParamSet()
        self.p_min = np.zeros(cfg.m)
        self.p_span = np.ones(cfg.m)
        self.rho_min, self.rho_span = 0.0, 1.0
        self.act = ACTIVATIONS[cfg.mlp_act]
        if ps is None:
            self._init_params(np.random.default_rng(cfg.seed) if rng is None else rng)

    def _init_params(self, rng):
        cfg, ps, d = self.cfg, self.ps, self.cfg.d
        sizes = [3] + [d] * cfg.gcn_layers
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            ps.add(f"enc_T.W{i}", glorot(rng, a, b))
        add_mlp(ps, "enc_rho", rng, [1] + [d] * cfg.mlp_depth)
        add_mlp(ps, "enc_p", rng, [1] + [d] * cfg.mlp_depth, stacked=cfg.m)
        if cfg.dec_positional:
            ps.add("dec_T.pos", rng.normal(size=(cfg.n_max, d)))
        for i in range(cfg.dec_layers):
            add_transformer_layer(ps, f"dec_T.{i}", rng, d, cfg.ff_mult)
        ps.add("dec_T.ln.g", np.ones(d))
        ps.add("dec_T.ln.b", np.zeros(d))
        ps.add("dec_T.W_T", glorot(rng, d, 3))
        ps.add("dec_T.b_T", np.zeros(3))
        add_mlp(ps, "dec_rho", rng, [d] * cfg.mlp_depth + [1])
        add_mlp(ps, "dec_p", rng, [d] * cfg.mlp_depth + [1], stacked=cfg.m)
        ps.add("codebook", rng.normal(size=(cfg.kappa, d)))

    @property
    def codebook(self):
        return self.ps["codebook"]

    def set_normalization(self, p_min, p_max):
        p_min = np.asarray(p_min, dtype=np.float64)
        span = np.asarray(p_max, dtype=np.float64) - p_min
        if p_min.shape != (self.cfg.m,):
            raise ContractViolation(f"normalization expects {self.cfg.m} property dimensions")
        self.p_min = p_min
        self.p_span = np.where(span > 0, span, 1.0)

    def set_density_range(self, lo, hi):
        self.rho_min = float(lo)
        self.rho_span = float(hi - lo) if hi > lo else 1.0

    def normalize_density(self, rho):
        return (np.asarray(rho, dtype=np.float64) - self.rho_min) / self.rho_span

    def normalize_properties(self, P):
        return (np.asarray(P, dtype=np.float64) - self.p_min) / self.p_span

    def denormalize_properties(self, P_norm):
        return np.asarray(P_norm, dtype=np.float64) * self.p_span + self.p_min

    # ---- encoders

    def encode_topology(self, X, A, node_mask=None):
        """Graph convolution H_l = Â σ(H_{l-1}) W_l with H_0 = X; returns (..., n, d)."""
        X = nd.as_tensor(X)
        if X.shape[-1] != 3 or np.shape(A)[-1] != X.shape[-2]:
            raise ContractViolation(f"encode_topology: X {X.shape} incompatible with A {np.shape(A)}")
        Ahat = normalized_adjacency(A, self.cfg.adj_norm, node_mask)
        H = X
        for i in range(self.cfg.gcn_layers):
            H = nd.matmul(Ahat, nd.sigmoid(H) @ self.ps[f"enc_T.W{i}"])
        return H

    def encode_density(self, rho):
        """(...,) densities -> (..., 1, d)."""
        rho = np.asarray(rho, dtype=np.float64)
        if np.any(rho <= 0) or np.any(rho > 1):
            raise ContractViolation("density must lie in (0, 1]")
        return mlp(self.ps, "enc_rho", nd.Tensor(self.normalize_density(rho)[..., None, None]), self.cfg.mlp_depth, self.act)

    def encode_property(self, P):
        """(..., m) raw properties -> (..., m, d), one perceptron per dimension."""
        P = np.asarray(P, dtype=np.float64)
        if P.shape[-1] != self.cfg.m:
            raise ContractViolation(f"property length {P.shape[-1]} != m = {self.cfg.m}")
        if not np.all(np.isfinite(P)):
            raise ContractViolation("properties must be finite")
        x = nd.Tensor(self.normalize_properties(P).reshape(-1, self.cfg.m, 1))
        out = stacked_mlp(self.ps, "enc_p", x, self.cfg.mlp_depth, self.act)
        return out.reshape(P.shape + (self.cfg.d,))

    # ---- decoders

    def decode_topology(self, tokens, node_mask=None):
        tokens = nd.as_tensor(tokens)
        if tokens.shape[-1] != self.cfg.d:
            raise ContractViolation(f"decode_topology: width {tokens.shape[-1]} != d = {self.cfg.d}")
        H = tokens
        if self.cfg.dec_positional:
            n = tokens.shape[-2]
            if n > self.cfg.n_max:
                raise ContractViolation(f"decode_topology: {n} rows exceed n_max = {self.cfg.n_max}")
            H = H + self.ps["dec_T.pos"][:n]
        for i in range(self.cfg.dec_layers):
            H = transformer_layer(self.ps, f"dec_T.{i}", H, self.cfg.dec_heads, key_mask=node_mask)
        F = nd.layer_norm(H, self.ps["dec_T.ln.g"], self.ps["dec_T.ln.b"])
        X_hat = F @ self.ps["dec_T.W_T"] + self.ps["dec_T.b_T"]
        source = F if self.cfg.adj_feature == "latent" else X_hat
        return TopologyDecoding(X_hat, nd.pairwise_cosine(source), F)

    def decode_density(self, tokens):
        """(..., 1, d) -> (...,) in (0, 1)."""
        out = nd.sigmoid(mlp(self.ps, "dec_rho", nd.as_tensor(tokens), self.cfg.mlp_depth, self.act))
        return out.reshape(out.shape[:-2])

    def decode_property(self, tokens):
        """(..., m, d) -> (..., m) in normalized property units."""
        tokens = nd.as_tensor(tokens)
        if tokens.shape[-2] != self.cfg.m:
            raise ContractViolation(f"decode_property: {tokens.shape[-2]} rows != m = {self.cfg.m}")
        x = tokens.reshape((-1, self.cfg.m, self.cfg.d))
        out = stacked_mlp(self.ps, "dec_p", x, self.cfg.mlp_depth, self.act)
        return out.reshape(tokens.shape[:-1])


def decode_topology_arrays(tok, tokens, node_mask=None):
    """Plain-array decode of one sample: (X̂, Â_raw, Â_binary, L̂ or None)."""
    with nd.no_grad():
        out = tok.decode_topology(tokens)
    X_hat = out.X_hat.data
    A_raw = out.A_raw.data
    A_bin = binarize_adjacency(A_raw, tok.cfg.theta_edge, node_mask)
    L_hat = lattice_axes(X_hat) if len(X_hat) >= 8 else None
    return X_hat, A_raw, A_bin, L_hat


def init_codebook(tok, warmup_tokens, rng):
    """Unit-Gaussian prototypes rescaled to the median norm of warm-up encoder outputs."""
    warmup_tokens = np.asarray(warmup_tokens, dtype=np.float64).reshape(-1, tok.cfg.d)
    target = float(np.median(np.linalg.norm(warmup_tokens, axis=1)))
    if not target > 0:
        raise ContractViolation("init_codebook: warm-up tokens are all zero")
    Z = rng.normal(size=(tok.cfg.kappa, tok.cfg.d))
    Z *= target / np.linalg.norm(Z, axis=1, keepdims=True)
    tok.codebook.data = Z
    return Z


# ---------------------------------------------------------------- alignment loss

ALIGN_TERMS = ("x", "x_round", "adj", "rho", "rho_round", "p", "p_round")
_TERM_WEIGHT = {"x": "alpha_T", "x_round": "alpha_T", "adj": "alpha_T",
                "rho": "alpha_rho", "rho_round": "alpha_rho", "p": "alpha_p", "p_round": "alpha_p"}


def _sample_norm(diff, axes):
    """Per-sample Frobenius norm over ``axes``, averaged over any leading batch axes."""
    return nd.mean(nd.norm(diff, axis=axes)) if diff.ndim > len(axes) else nd.norm(diff)


def alignment_residuals(X, A, rho, P_norm, X_tok, rho_tok, P_tok, X_round, rho_round, P_round,
                        decoded, rho_hat, p_hat, node_mask=None):
    """The seven reconstruction / rounding residual norms, each a scalar Tensor.

    Batched inputs give batch-mean norms.  Padded rows are excluded through
    ``node_mask``; the adjacency residual ignores the diagonal (the cosine
    matrix is 1 there, the adjacency 0).
    """
    X = np.asarray(X, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    rho_hat = nd.as_tensor(rho_hat)
    n = A.shape[-1]
    mask = np.ones(A.shape[:-1], dtype=bool) if node_mask is None else np.asarray(node_mask, dtype=bool)
    row = mask[..., None].astype(np.float64)
    pair = (mask[..., :, None] & mask[..., None, :]) & ~np.eye(n, dtype=bool)
    return {
        "x": _sample_norm((decoded.X_hat - X) * row, (-2, -1)),
        "x_round": _sample_norm((X_tok - X_round) * row, (-2, -1)),
        "adj": _sample_norm((decoded.A_raw - A) * pair.astype(np.float64), (-2, -1)),
        "rho": _sample_norm(rho_hat.reshape(rho_hat.shape + (1,)) - rho[..., None], (-1,)),
        "rho_round": _sample_norm(rho_tok - rho_round, (-2, -1)),
        "p": _sample_norm(p_hat - np.asarray(P_norm, dtype=np.float64), (-1,)),
        "p_round": _sample_norm(P_tok - P_round, (-2, -1)),
    }


def alignment_loss(residuals, d_w, alpha_T=1.0, alpha_rho=1.0, alpha_p=1.0, alpha_w=0.1):
    """Weighted sum of the residual norms plus the transport term."""
    weights = {"alpha_T": alpha_T, "alpha_rho": alpha_rho, "alpha_p": alpha_p, "alpha_w": alpha_w}
    for k, v in weights.items():
        if v < 0:
            raise ContractViolation(f"alignment weight {k} must be >= 0, got {v}")
    missing = set(ALIGN_TERMS) - set(residuals)
    if missing:
        raise ContractViolation(f"alignment_loss: missing residuals {sorted(missing)}")
    total = nd.as_tensor(alpha_w) * d_w
    for name in ALIGN_TERMS:
        total = total + weights[_TERM_WEIGHT[name]] * nd.as_tensor(residuals[name])
    return total
