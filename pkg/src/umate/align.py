"""Three-marginal entropic optimal transport over codebook indices.

The plan is P[i, j, k] = u_i v_j w_k M[i, j, k] with M = exp(-C / eps);
u, v, w are rescaled in turn so that P's topology, density and property
marginals match the token frequencies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ndiff as nd
from .errors import ContractViolation, FormatError, NumericError, VersionError

MODALITIES = ("topology", "density", "property")
FREQ_FLOOR = 1e-9


@dataclass
class Marginals:
    f_t: np.ndarray
    f_rho: np.ndarray
    f_p: np.ndarray

    def __post_init__(self):
        for name in ("f_t", "f_rho", "f_p"):
            f = np.asarray(getattr(self, name), dtype=np.float64)
            if f.ndim != 1 or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-12:
                raise ContractViolation(f"marginal {name} must be a nonnegative vector summing to 1")
            setattr(self, name, f)
        if not (len(self.f_t) == len(self.f_rho) == len(self.f_p)):
            raise ContractViolation("marginals must share the codebook size")

    def as_list(self):
        return [self.f_t, self.f_rho, self.f_p]


@dataclass
class TransportPlan:
    plan: np.ndarray
    d_w: float
    iterations: int
    converged: bool
    eps: float = 0.0
    tol: float = 0.0
    scalings: tuple | None = None

    @property
    def kappa(self):
        return self.plan.shape[0]


def _histogram(indices, kappa):
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ContractViolation("token_frequencies: empty index batch")
    if idx.min() < 0 or idx.max() >= kappa:
        raise ContractViolation("token_frequencies: index outside the codebook")
    f = np.bincount(idx, minlength=kappa).astype(np.float64)
    f /= f.sum()
    f[f == 0] = FREQ_FLOOR
    return f / f.sum()


def token_frequencies(topology_idx, density_idx, property_idx, kappa):
    """Normalized per-modality histograms of codebook indices (floored at 1e-9)."""
    return Marginals(_histogram(topology_idx, kappa), _histogram(density_idx, kappa),
                     _histogram(property_idx, kappa))


def _cosine_matrix(Z):
    Z = np.asarray(Z, dtype=np.float64)
    n = np.linalg.norm(Z, axis=1)
    if np.any(n == 0):
        raise ContractViolation("cost_kernel: zero-norm prototype, cosine undefined")
    U = Z / n[:, None]
    return U @ U.T


def _pair_cost(S, mode):
    if mode == "cos":
        return S
    if mode == "1-cos":
        return 1.0 - S
    raise ContractViolation(f"unknown cost mode {mode!r} (use 'cos' or '1-cos')")


def cost_kernel(codebook, eps, mode="cos"):
    """C[i,j,k] = c(z_i,z_j) + c(z_j,z_k) + c(z_i,z_k) and M = exp(-C/eps), shifted.

    ``mode='cos'`` uses the cosine similarity itself as pair cost; ``'1-cos'``
    uses the dissimilarity so that low cost means aligned tokens.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    P = _pair_cost(_cosine_matrix(codebook), mode)
    C = P[:, :, None] + P[None, :, :] + P[:, None, :]
    M = np.exp(-(C - C.min()) / eps)
    return C, M


def _contract(M, a, b, axis):
    """Contract M over the two axes other than ``axis`` with vectors a, b (in axis order)."""
    if axis == 0:
        return (M @ b) @ a
    if axis == 1:
        return a @ (M @ b)
    return b @ (a @ M.reshape(len(a), -1)).reshape(len(b), -1)


def _marginal_error(F, M, u, v, w):
    err_t = np.abs(u * _contract(M, v, w, 0) - F[0]).max()
    err_r = np.abs(v * _contract(M, u, w, 1) - F[1]).max()
    err_p = np.abs(w * _contract(M, u, v, 2) - F[2]).max()
    return max(err_t, err_r, err_p)


def _iterate(F, M, u, v, w, max_iter, tol):
    """Cyclic scaling updates; returns (u, v, w, iterations, converged)."""
    f_t, f_r, f_p = F
    it = 0
    converged = False
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        while it < max_iter:
            it += 1
            u = f_t / _contract(M, v, w, 0)
            v = f_r / _contract(M, u, w, 1)
            w = f_p / _contract(M, u, v, 2)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
                raise NumericError("tripartite Sinkhorn produced non-finite scalings; "
                                   "increase eps")
            # w is exact after its own update; check the other two marginals
            err_t = np.abs(u * _contract(M, v, w, 0) - f_t).max()
            err_r = np.abs(v * _contract(M, u, w, 1) - f_r).max()
            if max(err_t, err_r) < tol:
                converged = True
                break
    return u, v, w, it, converged


def _newton(F, LM, u, v, w, max_iter, tol):
    """Damped Newton ascent on the dual in log potentials, started from scalings.

    Used only when the cyclic updates stall: near-degenerate couplings can
    need thousands of cycles, while Newton finishes in a handful of steps.
    """
    k = LM.shape[0]
    with np.errstate(divide="ignore"):
        x = np.concatenate([np.log(u), np.log(v), np.log(w)])
    if not np.all(np.isfinite(x)):
        raise NumericError("scalings underflowed before Newton polishing; increase eps")
    f = np.concatenate(F)

    def plan_of(x):
        with np.errstate(over="ignore"):
            return np.exp(LM + x[:k, None, None] + x[None, k:2 * k, None] + x[None, None, 2 * k:])

    def dual(x, P):
        return f @ x - P.sum()

    P = plan_of(x)
    it = 0
    while it < max_iter:
        marg = np.concatenate([P.sum(axis=(1, 2)), P.sum(axis=(0, 2)), P.sum(axis=(0, 1))])
        g = f - marg
        if np.abs(g).max() < tol:
            break
        it += 1
        Pab, Pac, Pbc = P.sum(axis=2), P.sum(axis=1), P.sum(axis=0)
        H = np.block([[np.diag(marg[:k]), Pab, Pac],
                      [Pab.T, np.diag(marg[k:2 * k]), Pbc],
                      [Pac.T, Pbc.T, np.diag(marg[2 * k:])]])
        # H is singular along the two gauge directions; least squares picks the minimal step
        step = np.linalg.lstsq(H, g, rcond=1e-14)[0]
        base = dual(x, P)
        t = 1.0
        while t > 1e-12:
            xn = x + t * step
            Pn = plan_of(xn)
            if np.all(np.isfinite(Pn)) and dual(xn, Pn) >= base + 1e-4 * t * (g @ step):
                break
            t *= 0.5
        else:
            break
        x, P = xn, Pn
    u, v, w = np.exp(x[:k]), np.exp(x[k:2 * k]), np.exp(x[2 * k:])
    return u, v, w, it


def _solve(F, M, LM, u, v, w, max_iter, tol, newton_after):
    u, v, w, it, converged = _iterate(F, M, u, v, w, min(max_iter, newton_after or max_iter), tol)
    if not converged and newton_after is not None and it < max_iter:
        u, v, w, extra = _newton(F, LM, u, v, w, max_iter - it, tol)
        it += extra
        converged = _marginal_error(F, M, u, v, w) < tol
    return u, v, w, it, converged


def tripartite_sinkhorn(F, C, eps=0.05, max_iter=500, tol=1e-6, init=None, newton_after=100):
    """Entropic three-marginal transport plan and its cost <C, plan>.

    Runs the cyclic u, v, w scaling updates. If they have not met ``tol``
    after ``newton_after`` cycles, the remaining budget goes to Newton steps
    on the same dual (``newton_after=None`` keeps pure cyclic updates).
    Every cycle or Newton step counts as one iteration.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    C = np.asarray(C, dtype=np.float64)
    kappa = C.shape[0]
    if C.shape != (kappa, kappa, kappa):
        raise ContractViolation(f"cost tensor must be cubic, got {C.shape}")
    margs = F.as_list() if isinstance(F, Marginals) else [np.asarray(f, dtype=np.float64) for f in F]
    if any(len(f) != kappa for f in margs):
        raise ContractViolation("marginal size does not match cost tensor")
    LM = -(C - C.min()) / eps
    M = np.exp(LM)
    if init is None:
        u = v = w = np.full(kappa, 1.0 / kappa)
    else:
        u, v, w = (np.array(x, dtype=np.float64) for x in init)
    u, v, w, it, converged = _solve(margs, M, LM, u, v, w, max_iter, tol, newton_after)
    plan = u[:, None, None] * v[None, :, None] * w[None, None, :] * M
    if not np.all(np.isfinite(plan)):
        raise NumericError("tripartite Sinkhorn plan is non-finite; increase eps")
    return TransportPlan(plan=plan, d_w=float((C * plan).sum()), iterations=it,
                         converged=converged, eps=eps, tol=tol, scalings=(u, v, w))


def differentiable_twd(codebook, F, eps=0.05, mode="cos", max_iter=500, tol=1e-6,
                       unroll=25, init=None, newton_after=100):
    """d_w as an ndiff scalar with gradients reaching ``codebook`` through C.

    Iterations before the last ``unroll`` run untracked; the final ones are
    recorded. Marginals are constants.
    """
    Z = nd.as_tensor(codebook)
    kappa = Z.shape[0]
    margs = F.as_list()
    pair = nd.pairwise_cosine(Z)
    if mode == "1-cos":
        pair = 1.0 - pair
    elif mode != "cos":
        raise ContractViolation(f"unknown cost mode {mode!r}")
    C = pair[:, :, None] + pair[None, :, :] + pair[:, None, :]
    shift = float(C.data.min())
    M = nd.exp((C - shift) * (-1.0 / eps))
    if init is None:
        u = v = w = np.full(kappa, 1.0 / kappa)
    else:
        u, v, w = init
    lead = max(max_iter - unroll, 0)
    LM = -(C.data - shift) / eps
    u, v, w, it, _ = _solve(margs, M.data, LM, u, v, w, lead, tol, newton_after)
    u_t, v_t, w_t = nd.Tensor(u), nd.Tensor(v), nd.Tensor(w)
    # matrix-product form of the three contractions (scalings as column vectors)
    k = kappa
    M_flat = M.reshape((k, k * k))
    f_t, f_r, f_p = (f.reshape(k, 1) for f in margs)
    u_c, v_c, w_c = (x.reshape((k, 1)) for x in (u_t, v_t, w_t))
    for _ in range(unroll):
        Mw = (M @ w_c).reshape((k, k))  # [i, j]
        u_c = f_t / (Mw @ v_c)
        v_c = f_r / (u_c.reshape((1, k)) @ Mw).reshape((k, 1))
        uM = (u_c.reshape((1, k)) @ M_flat).reshape((k, k))  # [j, k]
        w_c = f_p / (v_c.reshape((1, k)) @ uM).reshape((k, 1))
    u_t, v_t, w_t = (x.reshape((k,)) for x in (u_c, v_c, w_c))
    plan = nd.einsum("i,j,k,ijk->ijk", u_t, v_t, w_t, M)
    d_w = nd.sum(plan * C)
    err = max(np.abs(plan.data.sum(axis=(1, 2)) - margs[0]).max(),
              np.abs(plan.data.sum(axis=(0, 2)) - margs[1]).max(),
              np.abs(plan.data.sum(axis=(0, 1)) - margs[2]).max())
    tp = TransportPlan(plan=plan.data.copy(), d_w=float(d_w.data), iterations=it + unroll,
                       converged=bool(err < tol), eps=eps, tol=tol,
                       scalings=(u_t.data.copy(), v_t.data.copy(), w_t.data.copy()))
    return d_w, tp


class Conditional(NamedTuple):
    probs: np.ndarray
    fallback: bool


def _axis(modality):
    if isinstance(modality, int):
        return modality
    try:
        return MODALITIES.index(modality)
    except ValueError:
        raise ContractViolation(f"unknown modality {modality!r}") from None


def conditional_plan(plan, known, unknown=None):
    """Distribution over ``unknown``'s codebook indices given known (modality, index) pairs.

    A modality that is neither known nor the target is summed out. With
    several known tokens the per-combination conditionals are averaged.
    """
    P = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    kappa = P.shape[0]
    by_axis = {}
    for modality, idx in known:
        idx = int(idx)
        if not 0 <= idx < kappa:
            raise ContractViolation(f"known index {idx} outside codebook of size {kappa}")
        by_axis.setdefault(_axis(modality), []).append(idx)
    free = [a for a in range(3) if a not in by_axis]
    if unknown is None:
        if len(free) != 1:
            raise ContractViolation("exactly one unknown modality is required")
        target = free[0]
    else:
        target = _axis(unknown)
        if target in by_axis:
            raise ContractViolation("the unknown modality also appears among known tokens")
    if not by_axis:
        raise ContractViolation("conditional_plan needs at least one known token")
    summed = [a for a in free if a != target]
    Q = P.sum(axis=tuple(summed), keepdims=True) if summed else P
    marginal = P.sum(axis=tuple(a for a in range(3) if a != target))
    marginal = marginal / marginal.sum()

    axes = sorted(by_axis)
    combos = [[]]
    for a in axes:
        combos = [c + [i] for c in combos for i in by_axis[a]]
    total = np.zeros(kappa)
    fallback = False
    for combo in combos:
        index = [slice(None)] * 3
        for a, i in zip(axes, combo):
            index[a] = i
        for a in summed:
            index[a] = 0
        sl = Q[tuple(index)]
        s = sl.sum()
        if s > 0 and np.isfinite(s):
            total += sl / s
        else:
            total += marginal
            fallback = True
    probs = total / len(combos)
    return Conditional(probs / probs.sum(), fallback)


# ---------------------------------------------------------------- export

PLAN_MAGIC = b"UMTP"
PLAN_VERSION = 1


def save_plan(tp, path):
    """Header {kappa, eps, tol, converged, d_w} then kappa^3 little-endian float64."""
    header = json.dumps({"kappa": tp.kappa, "eps": tp.eps, "tol": tp.tol,
                         "converged": bool(tp.converged), "d_w": tp.d_w,
                         "iterations": tp.iterations}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PLAN_MAGIC + struct.pack("<II", PLAN_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(tp.plan, dtype="<f8").tobytes())


def load_plan(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PLAN_MAGIC or len(raw) < 12:
        raise FormatError("not a transport plan file", "byte 0")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != PLAN_VERSION:
        raise VersionError(f"plan file version {version} unsupported")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    k = header["kappa"]
    body = raw[12 + hlen:]
    if len(body) != 8 * k**3:
        raise FormatError("plan file truncated", f"byte {12 + hlen + len(body)}")
    plan = np.frombuffer(body, dtype="<f8").reshape(k, k, k).astype(np.float64)
    return TransportPlan(plan=plan, d_w=header["d_w"], iterations=header["iterations"],
                         converged=header["converged"], eps=header["eps"], tol=header["tol"])
