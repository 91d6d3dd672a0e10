"""Masked-token denoising: transformer backbone, frozen context rows, Langevin chain.

Token matrices are (h, d) or batched (B, h, d).  The batched model uses a padded
row layout: topology rows 0..n_max-1, the density row at n_max, property rows
after it; ``key_mask`` marks the rows that exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .errors import ContractViolation, NumericError
from .layers import ParamSet, add_transformer_layer, glorot, transformer_layer
from .tokenizer import LMTR, SEGMENTS


@dataclass
class DiffusionSchedule:
    """Geometric noise levels with annealed-Langevin step sizes eps·σ_i²/σ_L²."""

    sigmas: np.ndarray
    steps_per_level: int = 2
    eps_step: float = 2e-5

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.sigmas.ndim != 1 or len(self.sigmas) == 0:
            raise ContractViolation("schedule needs at least one noise level")
        if np.any(np.diff(self.sigmas) >= 0) or np.any(self.sigmas <= 0):
            raise ContractViolation("noise levels must be positive and strictly decreasing")
        if self.steps_per_level < 1 or self.eps_step < 0:
            raise ContractViolation("steps_per_level must be >= 1 and eps_step >= 0")

    @classmethod
    def geometric(cls, sigma_max=1.0, sigma_min=0.01, n_levels=10, steps_per_level=2, eps_step=2e-5):
        if n_levels == 1:
            sigmas = np.array([sigma_max], dtype=np.float64)
        else:
            sigmas = np.geomspace(sigma_max, sigma_min, n_levels)
        return cls(sigmas, steps_per_level, eps_step)

    @classmethod
    def from_config(cls, cfg):
        return cls.geometric(cfg.sigma_max, cfg.sigma_min, cfg.n_levels, cfg.steps_per_level, cfg.eps_step)

    @property
    def alphas(self):
        return self.eps_step * self.sigmas ** 2 / self.sigmas[-1] ** 2

    @property
    def T(self):
        return len(self.sigmas) * self.steps_per_level

    def step_sizes(self):
        """The α used at each of the T steps, in order."""
        return np.repeat(self.alphas, self.steps_per_level)

    def step_sigmas(self):
        """The noise level σ_i of each of the T steps, in order."""
        return np.repeat(self.sigmas, self.steps_per_level)


@dataclass
class MaskSpec:
    """Known (frozen) and unknown (generated) row sets of an h-row token matrix."""

    known: tuple
    unknown: tuple
    h: int

    def __post_init__(self):
        self.known = tuple(sorted(int(i) for i in self.known))
        self.unknown = tuple(sorted(int(i) for i in self.unknown))
        if set(self.known) & set(self.unknown):
            raise ContractViolation("known and unknown rows overlap")
        if set(self.known) | set(self.unknown) != set(range(self.h)):
            raise ContractViolation("known and unknown rows must cover every row exactly once")

    @classmethod
    def from_unknown(cls, unknown, h):
        unknown = set(int(i) for i in unknown)
        return cls(tuple(i for i in range(h) if i not in unknown), tuple(unknown), h)

    @property
    def un_mask(self):
        m = np.zeros(self.h, dtype=bool)
        m[list(self.unknown)] = True
        return m


def _un_mask(mask, shape):
    """Boolean array broadcastable to a (..., h, d) token tensor."""
    if isinstance(mask, MaskSpec):
        m = mask.un_mask
    else:
        m = np.asarray(mask, dtype=bool)
    if m.shape[-1] != shape[-2]:
        raise ContractViolation(f"mask covers {m.shape[-1]} rows, tokens have {shape[-2]}")
    return m[..., None]


def padded_layout(n_max, m):
    """(segment id per row, row count) of the padded layout."""
    return np.array([0] * n_max + [1] + [2] * m), n_max + 1 + m


def lmtr_positions(n, m, n_max):
    """Padded-layout row indices of an unpadded LMTR's rows."""
    if n > n_max:
        raise ContractViolation(f"{n} topology rows exceed n_max = {n_max}")
    return np.concatenate([np.arange(n), [n_max], n_max + 1 + np.arange(m)])


class Backbone:
    """Pre-norm transformer over all rows (no causal mask) with a linear read-out."""

    def __init__(self, cfg, rng=None, ps=None):
        self.cfg = cfg
        self.ps = ps if ps is not None else ParamSet()
        if ps is None:
            self._init_params(np.random.default_rng(cfg.seed + 1) if rng is None else rng)

    def _init_params(self, rng):
        cfg, ps, d = self.cfg, self.ps, self.cfg.d
        if cfg.positional:
            ps.add("bb.pos", rng.normal(size=(cfg.h_max, d)))
            ps.add("bb.seg", rng.normal(size=(len(SEGMENTS), d)))
        for i in range(cfg.backbone_layers):
            add_transformer_layer(ps, f"bb.{i}", rng, d, cfg.ff_mult)
        ps.add("bb.ln.g", np.ones(d))
        ps.add("bb.ln.b", np.zeros(d))
        ps.add("bb.out.W", glorot(rng, d, d))
        ps.add("bb.out.b", np.zeros(d))

    def __call__(self, M, sigma=None, positions=None, segments=None, key_mask=None):
        return backbone_forward(self, M, sigma, positions, segments, key_mask)


def backbone_forward(bb, M, sigma=None, positions=None, segments=None, key_mask=None):
    """φ(M; σ): (..., h, d) -> (..., h, d).

    With ``cfg.denoise_gain = c`` the transformer read-out D(M) is treated as
    an estimate of the clean tokens and φ = c·(D(M) − M)/σ², the denoising
    score form (σ defaults to 1).  With ``None`` the read-out is returned as is.

    ``positions`` / ``segments`` index the learned row and segment embeddings
    (defaults: row order, padded-layout segments).  Ignored when the backbone
    was built with ``positional=False``.
    """
    cfg = bb.cfg
    M = nd.as_tensor(M)
    if M.shape[-1] != cfg.d:
        raise ContractViolation(f"backbone: width {M.shape[-1]} != d = {cfg.d}")
    h = M.shape[-2]
    x = M
    if cfg.positional:
        if positions is None:
            positions = np.arange(h)
        if segments is None:
            segments = padded_layout(cfg.n_max, cfg.m)[0][positions]
        positions = np.asarray(positions)
        if positions.max() >= cfg.h_max:
            raise ContractViolation(f"row position {positions.max()} beyond h_max = {cfg.h_max}")
        x = x + nd.take(bb.ps["bb.pos"], positions, axis=0) + nd.take(bb.ps["bb.seg"], np.asarray(segments), axis=0)
    for i in range(cfg.backbone_layers):
        x = transformer_layer(bb.ps, f"bb.{i}", x, cfg.backbone_heads, key_mask=key_mask)
    x = nd.layer_norm(x, bb.ps["bb.ln.g"], bb.ps["bb.ln.b"])
    out = x @ bb.ps["bb.out.W"] + bb.ps["bb.out.b"]
    if cfg.denoise_gain is not None:
        s = 1.0 if sigma is None else float(sigma)
        out = (out - M) * (cfg.denoise_gain / (s * s))
    return out


def frozen_forward(phi, M, mask, sigma=None):
    """Rows in the unknown set come from ``phi(M, sigma)``; known rows are M itself, bit-exact."""
    M = nd.as_tensor(M)
    un = _un_mask(mask, M.shape)
    if not un.any():
        return M
    return nd.where(un, phi(M, sigma), M)


def denoise_chain(M0, mask, schedule, phi, rng, literal=False, truncate=None, noise=True):
    """Run the T Langevin-style steps M <- M + (α/2)·φ̃(M) + √α·Z.

    φ̃ is ``frozen_forward`` of the previous state; ``phi`` is called as
    ``phi(M, sigma)`` with the step's noise level.  By default increment and
    noise touch only unknown rows, so known rows stay bit-identical through the
    whole chain; ``literal=True`` applies both to every row instead.  A normal
    draw of the full state shape is taken at every step regardless, so the
    generator stream does not depend on the mask.  ``truncate=k`` stops
    gradients from flowing into steps before the last k.
    """
    M = nd.as_tensor(M0)
    un = _un_mask(mask, M.shape)
    alphas = schedule.step_sizes()
    sigmas = schedule.step_sigmas()
    T = len(alphas)
    for t, (a, sigma) in enumerate(zip(alphas, sigmas)):
        if truncate is not None and t == T - truncate:
            M = M.detach()
        Z = rng.standard_normal(M.shape) if noise else np.zeros(M.shape)
        if not un.any() and not literal:
            continue
        try:
            step = frozen_forward(phi, M, un[..., 0], sigma) * (a / 2.0) + np.sqrt(a) * Z
            M = M + step if literal else nd.where(un, M + step, M)
        except NumericError as exc:
            raise NumericError(f"denoise step {t}: {exc}") from None
    return M


def noise_random_modality(lmtr, sigma, rng):
    """Add N(0, σ²) noise to one uniformly chosen segment; returns (LMTR, MaskSpec)."""
    if sigma <= 0:
        raise ContractViolation("noise scale must be positive")
    seg = SEGMENTS[int(rng.integers(len(SEGMENTS)))]
    rows = lmtr.rows(seg)
    tokens = lmtr.tokens.copy()
    tokens[rows.start:rows.stop] += sigma * rng.standard_normal((len(rows), lmtr.d))
    return LMTR(tokens, lmtr.n, lmtr.m), MaskSpec.from_unknown(rows, lmtr.h)


def batch_noise_mask(n_max, m, rng, batch):
    """Per-sample chosen segment ids and the (B, h) unknown-row mask of the padded layout."""
    seg_of_row, h = padded_layout(n_max, m)
    choice = rng.integers(len(SEGMENTS), size=batch)
    return choice, seg_of_row[None, :] == choice[:, None]


def generation_loss(M_round, M_T, row_mask=None):
    """‖M_round − M_T‖ (Frobenius); batched input gives the batch mean of per-sample norms."""
    diff = nd.as_tensor(M_T) - M_round
    if row_mask is not None:
        diff = diff * np.asarray(row_mask, dtype=np.float64)[..., None]
    if diff.ndim == 2:
        return nd.norm(diff)
    return nd.mean(nd.norm(diff, axis=(-2, -1)))


def total_loss(L_align, L_gen, lambda_align=1.0, lambda_gen=1.0):
    if lambda_align < 0 or lambda_gen < 0:
        raise ContractViolation("loss weights must be >= 0")
    return nd.as_tensor(L_align) * lambda_align + nd.as_tensor(L_gen) * lambda_gen
