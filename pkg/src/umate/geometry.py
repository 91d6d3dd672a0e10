"""Unit-cell topology model and the geometric procedures built on it.

Conventions: ``coords`` is (n, 3); ``lattice`` stores the three cell axes
as rows; ``adjacency`` is a symmetric 0/1 matrix with an empty diagonal.
Rotations act on row vectors as ``x @ R.T``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .errors import ContractViolation, FormatError, MetricInapplicable

PLANE_TOL = 1e-9
TIE_TOL = 1e-9  # relative; distances this close count as ties


@dataclass
class Topology:
    lattice: np.ndarray
    coords: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        self.lattice = np.asarray(self.lattice, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.int8)
        self.validate()

    @property
    def n(self):
        return self.coords.shape[0]

    def validate(self):
        X, A, L = self.coords, self.adjacency, self.lattice
        if X.ndim != 2 or X.shape[1] != 3:
            raise ContractViolation(f"coords must be (n, 3), got {X.shape}")
        if X.shape[0] < 2:
            raise ContractViolation("a topology needs at least 2 nodes")
        if L.shape != (3, 3):
            raise ContractViolation(f"lattice must be 3x3, got {L.shape}")
        if A.shape != (X.shape[0], X.shape[0]):
            raise ContractViolation(f"adjacency shape {A.shape} does not match {X.shape[0]} nodes")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(L))):
            raise ContractViolation("coordinates and lattice must be finite")
        if not np.array_equal(A, A.T):
            raise ContractViolation("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise ContractViolation("adjacency must not contain self-loops")
        if np.any((A != 0) & (A != 1)):
            raise ContractViolation("adjacency must be binary")

    def edges(self):
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return np.stack([i, j], axis=1)

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (np.array_equal(self.lattice, other.lattice)
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.adjacency, other.adjacency))


@dataclass
class MTR:
    """One metamaterial sample: topology, relative density, property vector."""

    topology: Topology
    density: float
    properties: np.ndarray
    base_id: int = 0
    rotation_id: int = 0
    nonphysical: bool = False

    def __post_init__(self):
        self.density = float(self.density)
        self.properties = np.asarray(self.properties, dtype=np.float64).reshape(-1)
        if not (0.0 < self.density):
            raise ContractViolation(f"density must be positive, got {self.density}")
        if self.density > 1.0:
            # kept, but flagged: the validator records it instead of rejecting
            self.nonphysical = True
        if not np.all(np.isfinite(self.properties)):
            raise ContractViolation("property vector must be finite")

    def __eq__(self, other):
        if not isinstance(other, MTR):
            return NotImplemented
        return (self.topology == other.topology and self.density == other.density
                and np.array_equal(self.properties, other.properties)
                and self.base_id == other.base_id and self.rotation_id == other.rotation_id)


@dataclass
class CornerPairing:
    corners: list
    anchor: int
    pairs: list
    labels: dict = field(default_factory=dict)

    @property
    def positives(self):
        return [self.labels[k] for k in ("2", "3", "4")]

    @property
    def negatives(self):
        return [self.labels[k] for k in ("2'", "3'", "4'")]


def centroid(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractViolation("centroid of an empty point set")
    return X.mean(axis=0)


def find_corners(X):
    """Indices of the 8 nodes farthest from the centroid, farthest first."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 8:
        raise MetricInapplicable(f"need at least 8 nodes to find cell corners, got {X.shape[0]}")
    dist = np.linalg.norm(X - centroid(X), axis=1)
    return _tie_order(-dist, range(len(dist)), _tie_tol(dist))[:8]


def _tie_tol(values):
    return TIE_TOL * max(1.0, float(np.max(np.abs(values))))


def _tie_order(keys, ids, tol):
    """ids sorted by ascending key; keys within ``tol`` of the current minimum tie, lowest id first.

    Exact float comparison would let rounding noise (e.g. from rotating a cube)
    pick a different anchor or partner for geometrically tied corners.
    """
    keys = [float(k) for k in keys]
    left = list(zip(keys, [int(i) for i in ids]))
    out = []
    while left:
        lo = min(k for k, _ in left)
        pick = min(i for k, i in left if k <= lo + tol)
        out.append(pick)
        left = [(k, i) for k, i in left if i != pick]
    return out


def _farthest(X, src, candidates):
    d = np.linalg.norm(X[candidates] - X[src], axis=1)
    return _tie_order(-d, candidates, _tie_tol(d))[0]


def pair_corners(X, corners):
    X = np.asarray(X, dtype=np.float64)
    corners = [int(c) for c in corners]
    if len(corners) != 8 or len(set(corners)) != 8:
        raise ContractViolation("pair_corners needs 8 distinct corner indices")
    anchor = corners[0]
    unpaired = list(corners)
    pairs = []
    while unpaired:
        c = unpaired.pop(0)
        partner = _farthest(X, c, unpaired)
        unpaired.remove(partner)
        pairs.append((c, partner))

    labels = {"1": anchor, "1'": pairs[0][1]}
    xa = X[anchor]
    tol = _tie_tol(np.linalg.norm(X[corners] - xa, axis=1))
    partner = {}
    dist = {}
    for a, b in pairs[1:]:
        pos = _tie_order([np.linalg.norm(X[a] - xa), np.linalg.norm(X[b] - xa)], (a, b), tol)[0]
        partner[pos] = b if pos == a else a
        dist[pos] = np.linalg.norm(X[pos] - xa)
    ordered = _tie_order([dist[p] for p in dist], list(dist), tol)
    for label, pos in zip(("2", "3", "4"), ordered):
        labels[label] = pos
        labels[label + "'"] = partner[pos]
    return CornerPairing(corners=corners, anchor=anchor, pairs=pairs, labels=labels)


# Frame edges grouped by axis, written as (head, tail) for e_{head - tail}.
# The third group uses e_{2'-3}; the l3 average and the periodicity sum agree
# on it, and it is the edge parallel to the other three on a cube.
FRAME_EDGES = (
    (("2", "1"), ("4'", "3"), ("1'", "2'"), ("3'", "4")),
    (("3", "1"), ("4'", "2"), ("1'", "3'"), ("2'", "4")),
    (("4", "1"), ("3'", "2"), ("2'", "3"), ("1'", "4'")),
)


def frame_edge_vectors(X, pairing):
    """(3, 4, 3) array: for each axis its four frame edge vectors."""
    X = np.asarray(X, dtype=np.float64)
    lab = pairing.labels
    return np.array([[X[lab[h]] - X[lab[t]] for h, t in group] for group in FRAME_EDGES])


def lattice_axes(X):
    """Rows l1, l2, l3: each the mean of the four frame edges along that axis."""
    X = np.asarray(X, dtype=np.float64)
    pairing = pair_corners(X, find_corners(X))
    return frame_edge_vectors(X, pairing).mean(axis=1)


def _cell_frame(X):
    pairing = pair_corners(X, find_corners(X))
    axes = frame_edge_vectors(X, pairing).mean(axis=1)
    return X[pairing.anchor], axes, set(pairing.corners)


def classify_edges(topology):
    """Label each edge 'inner', 'face' or 'frame' against the cell spanned by the corners.

    Topologies with fewer than 8 nodes have no recoverable cell; all their
    edges are treated as inner.
    """
    X = topology.coords
    edges = topology.edges()
    if topology.n < 8:
        return edges, ["inner"] * len(edges)
    origin, axes, corners = _cell_frame(X)
    if abs(np.linalg.det(axes)) < 1e-12:
        raise ContractViolation("degenerate unit cell: lattice axes are coplanar")
    frac = np.linalg.solve(axes.T, (X - origin).T).T
    at0 = np.abs(frac) <= PLANE_TOL
    at1 = np.abs(frac - 1.0) <= PLANE_TOL
    kinds = []
    for i, j in edges:
        shared_plane = np.any(at0[i] & at0[j]) or np.any(at1[i] & at1[j])
        if i in corners and j in corners and shared_plane:
            # adjacent corners differ in exactly one fractional coordinate
            on_wire = int(np.sum(np.abs(frac[i] - frac[j]) > PLANE_TOL)) == 1
            kinds.append("frame" if on_wire else "face")
        elif shared_plane:
            kinds.append("face")
        else:
            kinds.append("inner")
    return edges, kinds


EDGE_WEIGHTS = {"inner": 1.0, "face": 0.5, "frame": 0.25}


def equivalent_edge_length(topology):
    """Inner edges count fully, face edges half, frame edges a quarter."""
    edges, kinds = classify_edges(topology)
    X = topology.coords
    total = 0.0
    for (i, j), kind in zip(edges, kinds):
        length = float(np.linalg.norm(X[i] - X[j]))
        if length == 0.0:
            raise ContractViolation(f"edge ({i}, {j}) has zero length")
        total += EDGE_WEIGHTS[kind] * length
    return total


class Converted(NamedTuple):
    value: float
    nonphysical: bool


def density_radius_convert(value, l_equ, direction):
    """Convert between strut radius and relative density via d = pi r^2 l_equ."""
    if value <= 0 or l_equ <= 0:
        raise ContractViolation("radius/density and l_equ must be positive")
    if direction == "radius->density":
        d = math.pi * value * value * l_equ
        return Converted(d, d > 1.0)
    if direction == "density->radius":
        return Converted(math.sqrt(value / (math.pi * l_equ)), value > 1.0)
    raise ContractViolation(f"unknown conversion direction {direction!r}")


def check_rotation(R, tol=1e-10):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0):
        raise ContractViolation("rotation must be a 3x3 orthonormal matrix")
    if np.linalg.det(R) < 0:
        raise ContractViolation("rotation must be proper (det = +1)")
    return R


def random_rotation(rng):
    """Haar-uniform proper rotation."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q = -q
    return q


PropertyRule = Callable[[np.ndarray, np.ndarray], np.ndarray]


def scalar_properties(p, R):
    """Default rule: (E, G, nu) summaries are left unchanged by rotation."""
    return np.array(p, dtype=np.float64)


def rotate_mtr(sample, rotation, property_rule: PropertyRule = scalar_properties):
    R = check_rotation(rotation)
    topo = sample.topology
    rotated = Topology(lattice=topo.lattice @ R.T, coords=topo.coords @ R.T,
                       adjacency=topo.adjacency.copy())
    return replace(sample, topology=rotated, properties=property_rule(sample.properties, R))


# ---------------------------------------------------------------- interchange


def topology_to_record(topology):
    return {
        "lattice": topology.lattice.tolist(),
        "coords": topology.coords.tolist(),
        "edges": topology.edges().tolist(),
    }


def topology_from_record(rec, position=None):
    try:
        coords = np.asarray(rec["coords"], dtype=np.float64)
        lattice = np.asarray(rec["lattice"], dtype=np.float64)
        edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad topology record: {exc}", position) from None
    n = coords.shape[0] if coords.ndim == 2 else 0
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise FormatError("edge index out of range", position)
    A = np.zeros((n, n), dtype=np.int8)
    A[edges[:, 0], edges[:, 1]] = 1
    A[edges[:, 1], edges[:, 0]] = 1
    return Topology(lattice=lattice, coords=coords, adjacency=A)


def save_topology(topology, path, extra=None):
    rec = topology_to_record(topology)
    if extra:
        rec.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rec, fh, indent=1)
        fh.write("\n")


def load_topology(path):
    with open(path, encoding="utf-8") as fh:
        try:
            rec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid topology file: {exc.msg}", f"line {exc.lineno}") from None
    return topology_from_record(rec)


def export_obj(topology, path):
    """Wavefront mesh with vertices and line elements, for viewers."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in topology.coords:
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for i, j in topology.edges():
            fh.write(f"l {i + 1} {j + 1}\n")
