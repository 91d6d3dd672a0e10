"""Topology quality, condition fidelity and prediction error metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation, MetricInapplicable
from .geometry import centroid, find_corners, frame_edge_vectors, pair_corners


def f_sym(X):
    """Mean over nodes of the closest node-pair midpoint distance to the centroid."""
    X = np.asarray(X, dtype=np.float64)
    c = centroid(X)
    mid = 0.5 * (X[:, None, :] + X[None, :, :])
    return float(np.linalg.norm(mid - c, axis=-1).min(axis=1).mean())


def f_per(X):
    """Mean deviation of the 12 frame edges from their axis averages."""
    X = np.asarray(X, dtype=np.float64)
    pairing = pair_corners(X, find_corners(X))
    edges = frame_edge_vectors(X, pairing)
    axes = edges.mean(axis=1, keepdims=True)
    return float(np.linalg.norm(edges - axes, axis=-1).sum() / 12.0)


def f_qua(sym, per):
    if sym < 0 or per < 0:
        raise ContractViolation("f_qua inputs must be nonnegative")
    if sym + per == 0:
        return 0.0
    return 2.0 * sym * per / (sym + per)


def f_cond(X, X_gt):
    """One-sided chamfer distance from generated nodes to ground-truth nodes."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(X_gt, dtype=np.float64)
    if len(X) == 0 or len(Y) == 0:
        raise ContractViolation("f_cond needs non-empty point sets")
    d = np.linalg.norm(X[:, None, :] - Y[None, :, :], axis=-1)
    return float(d.min(axis=1).mean())


def nrmse(pred, gt, mode="pp"):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(f"nrmse: shapes differ {pred.shape} vs {gt.shape}")
    if mode == "pp":
        if gt.ndim == 1:
            gt, pred = gt[:, None], pred[:, None]
        sq = ((pred - gt) ** 2).sum(axis=1)
    elif mode == "cc":
        sq = (pred.reshape(-1) - gt.reshape(-1)) ** 2
    else:
        raise ContractViolation(f"nrmse: unknown mode {mode!r}")
    span = float(gt.max() - gt.min())
    if span <= 0:
        raise ContractViolation("nrmse: ground truth has zero range")
    return float(np.sqrt(sq.mean()) / span)


def topology_quality(X):
    """(F_sym, F_per, F_qua); raises MetricInapplicable when n < 8."""
    sym = f_sym(X)
    per = f_per(X)
    return sym, per, f_qua(sym, per)


@dataclass
class EvalReport:
    f_sym: list = field(default_factory=list)
    f_per: list = field(default_factory=list)
    f_qua: list = field(default_factory=list)
    f_cond: list = field(default_factory=list)
    nrmse_pp: float | None = None
    nrmse_cc: float | None = None
    inapplicable: int = 0
    notes: dict = field(default_factory=dict)

    def add_generation(self, X, X_gt):
        try:
            sym, per, qua = topology_quality(X)
        except MetricInapplicable:
            self.inapplicable += 1
            sym = per = qua = None
        self.f_sym.append(sym)
        self.f_per.append(per)
        self.f_qua.append(qua)
        self.f_cond.append(f_cond(X, X_gt))

    def aggregates(self):
        def avg(vals):
            vals = [v for v in vals if v is not None]
            return float(np.mean(vals)) if vals else None

        return {
            "f_sym": avg(self.f_sym),
            "f_per": avg(self.f_per),
            "f_qua": avg(self.f_qua),
            "f_cond": avg(self.f_cond),
            "nrmse_pp": self.nrmse_pp,
            "nrmse_cc": self.nrmse_cc,
            "inapplicable": self.inapplicable,
        }

    def to_dict(self):
        d = asdict(self)
        d["aggregates"] = self.aggregates()
        return d

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "aggregates"}
        return cls(**d)
