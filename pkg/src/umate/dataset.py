"""Synthetic MTR datasets: generation, rotation augmentation, splits, persistence.

Properties come from ``surrogate_properties``, a smooth stand-in for
homogenization. Files written by other tools with real simulated
properties load through the same reader.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError, VersionError
from .geometry import (
    MTR,
    Topology,
    random_rotation,
    rotate_mtr,
    topology_from_record,
    topology_to_record,
)

log = logging.getLogger(__name__)

FILE_VERSION = 1
PROPERTY_NAMES = ("E", "G", "nu")
DENSITY_RANGE = (0.05, 0.6)


def surrogate_properties(topology, density):
    """Stiffness-like (E, G, nu) from edge orientations and density.

    E averages, over the three lattice axes, the length-weighted cos^4
    alignment of the struts with that axis, scaled by density. G = E / 2.6
    and nu = 0.3 (1 - density / 2). Physically inspired, not a simulation.
    """
    if not (0.0 < density <= 1.0):
        raise ContractViolation(f"density must lie in (0, 1], got {density}")
    X = topology.coords
    edges = topology.edges()
    vec = X[edges[:, 1]] - X[edges[:, 0]]
    lengths = np.linalg.norm(vec, axis=1)
    total = lengths.sum()
    if total <= 0:
        raise ContractViolation("surrogate_properties: zero total edge length")
    axes = topology.lattice / np.linalg.norm(topology.lattice, axis=1, keepdims=True)
    cos = (vec / lengths[:, None]) @ axes.T
    per_axis = density * ((lengths / total)[:, None] * cos**4).sum(axis=0)
    E = per_axis.mean()
    return np.array([E, E / 2.6, 0.3 * (1.0 - density / 2.0)])


# ---------------------------------------------------------------- generator

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)


def random_truss(rng, max_nodes=20):
    """Cubic cell: full frame plus random face/body members, centrally symmetric."""
    nodes = [tuple(c) for c in _CORNERS]
    edges = set()

    def add_edge(a, b):
        if a != b:
            edges.add((min(a, b), max(a, b)))

    def node(p):
        p = tuple(float(v) for v in p)
        if p not in nodes:
            nodes.append(p)
        return nodes.index(p)

    for a in range(8):
        for b in range(a + 1, 8):
            if np.abs(_CORNERS[a] - _CORNERS[b]).sum() == 1:
                add_edge(a, b)

    face_centers = []
    for axis in range(3):
        # opposite faces get the same pattern so the cell stays periodic
        style = rng.integers(0, 4)
        for side in (0.0, 1.0):
            face = [i for i in range(8) if _CORNERS[i, axis] == side]
            diag_pairs = [(a, b) for a in face for b in face
                          if a < b and np.abs(_CORNERS[a] - _CORNERS[b]).sum() == 2]
            if style == 1:
                # same-ordered pair on both sides: translated copy of one diagonal
                add_edge(*diag_pairs[0])
            elif style == 2:
                for a, b in diag_pairs:
                    add_edge(a, b)
            elif style == 3:
                c = np.full(3, 0.5)
                c[axis] = side
                fc = node(c)
                face_centers.append(fc)
                for a in face:
                    add_edge(fc, a)

    body = rng.integers(0, 4)
    if body == 1:
        for a in range(4):
            add_edge(a, 7 - a)
    elif body >= 2:
        bc = node((0.5, 0.5, 0.5))
        if body == 2 or not face_centers:
            for a in range(8):
                add_edge(bc, a)
        else:
            for fc in face_centers:
                add_edge(bc, fc)
            # octahedral inner nodes on the body axes, each tied to the center
            t = float(rng.choice([0.25, 0.3]))
            for axis in range(3):
                for sgn in (-1.0, 1.0):
                    if len(nodes) >= max_nodes:
                        break
                    p = np.full(3, 0.5)
                    p[axis] += sgn * t
                    q = node(p)
                    add_edge(bc, q)
                    for fc in face_centers:
                        if np.abs(np.array(nodes[fc]) - p).sum() < 0.5 + 1e-9:
                            add_edge(q, fc)

    n = len(nodes)
    A = np.zeros((n, n), dtype=np.int8)
    for a, b in edges:
        A[a, b] = A[b, a] = 1
    return Topology(lattice=np.eye(3), coords=np.array(nodes), adjacency=A)


@dataclass
class SplitSpec:
    fractions: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        f = tuple(float(x) for x in self.fractions)
        if len(f) != 3 or min(f) <= 0 or abs(sum(f) - 1.0) > 1e-9:
            raise ContractViolation(f"split fractions must be three positives summing to 1, got {f}")
        self.fractions = f


@dataclass
class Dataset:
    samples: list
    m: int = 3
    seed: int | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.samples:
            if s.properties.shape != (self.m,):
                raise ContractViolation(f"sample property length {s.properties.shape} != m={self.m}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def normalization(self):
        if not self.samples:
            raise ContractViolation("normalization of an empty dataset")
        P = np.array([s.properties for s in self.samples])
        rho = np.array([s.density for s in self.samples])
        return {
            "prop_min": P.min(axis=0).tolist(),
            "prop_max": P.max(axis=0).tolist(),
            "density_min": float(rho.min()),
            "density_max": float(rho.max()),
        }

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], m=self.m, seed=self.seed,
                       notes=dict(self.notes))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.m == other.m and self.seed == other.seed and len(self) == len(other)
                and all(a == b for a, b in zip(self.samples, other.samples)))


def generate_dataset(n_topologies, densities_per, seed, max_nodes=20):
    if n_topologies < 1 or densities_per < 1:
        raise ContractViolation("need at least one topology and one density per topology")
    if max_nodes < 8:
        raise ContractViolation("max_nodes must be at least 8 (the cell corners)")
    samples = []
    for t in range(n_topologies):
        rng = np.random.default_rng([seed, t])
        topo = random_truss(rng, max_nodes=max_nodes)
        while topo.n > max_nodes:  # face/body centres can exceed small caps; redraw
            topo = random_truss(rng, max_nodes=max_nodes)
        lo, hi = DENSITY_RANGE
        for rho in rng.uniform(lo, hi, size=densities_per):
            samples.append(MTR(topo, rho, surrogate_properties(topo, rho), base_id=t))
    return Dataset(samples, m=3, seed=seed,
                   notes={"source": "synthetic cubic truss family", "properties": "surrogate"})


def augment_rotations(ds, k, seed):
    """Add ``k`` uniformly random rotations of every sample; originals kept first."""
    if k < 0:
        raise ContractViolation("rotation count must be >= 0")
    if k == 0:
        return Dataset(list(ds.samples), m=ds.m, seed=ds.seed, notes=dict(ds.notes))
    out = []
    for i, s in enumerate(ds.samples):
        rng = np.random.default_rng([seed, i])
        out.append(s)
        for r in range(1, k + 1):
            rotated = rotate_mtr(s, random_rotation(rng))
            rotated.rotation_id = r
            out.append(rotated)
    notes = dict(ds.notes)
    notes["augmented"] = {"rotations": k, "seed": seed}
    return Dataset(out, m=ds.m, seed=ds.seed, notes=notes)


def split(ds, spec):
    """Seeded train/val/test split that keeps every base topology in one split."""
    groups = {}
    for i, s in enumerate(ds.samples):
        groups.setdefault(s.base_id, []).append(i)
    keys = sorted(groups)
    rng = np.random.default_rng(spec.seed)
    order = [keys[i] for i in rng.permutation(len(keys))]
    n = len(ds)
    targets = [round(spec.fractions[0] * n), round(spec.fractions[1] * n)]
    parts = [[], [], []]
    slot = 0
    for key in order:
        while slot < 2 and len(parts[slot]) >= targets[slot]:
            slot += 1
        parts[slot].extend(groups[key])
    for name, part in zip(("train", "validation", "test"), parts):
        if not part:
            raise ContractViolation(f"{name} split received no samples")
    return tuple(ds.subset(sorted(p)) for p in parts)


# ---------------------------------------------------------------- filters

_CLAUSE = re.compile(r"^\s*(\w+)\s*(<=|>=|==|<|>)\s*(q\d+(?:\.\d+)?|[-+0-9.eE]+)\s*$")


def filter_samples(ds, expr, property_names=PROPERTY_NAMES):
    """Keep samples matching e.g. ``"density<0.35 && E>q75"``; ``qNN`` is a percentile."""
    def field_values(name):
        if name == "density":
            return np.array([s.density for s in ds.samples])
        if name in property_names:
            k = property_names.index(name)
        elif re.fullmatch(r"p\d+", name):
            k = int(name[1:])
        else:
            raise ContractViolation(f"unknown filter field {name!r}")
        return np.array([s.properties[k] for s in ds.samples])

    keep = np.ones(len(ds), dtype=bool)
    for clause in expr.split("&&"):
        m = _CLAUSE.match(clause)
        if not m:
            raise ContractViolation(f"cannot parse filter clause {clause!r}")
        name, op, raw = m.groups()
        vals = field_values(name)
        thr = float(np.percentile(vals, float(raw[1:]))) if raw.startswith("q") else float(raw)
        keep &= {"<": vals < thr, "<=": vals <= thr, ">": vals > thr,
                 ">=": vals >= thr, "==": vals == thr}[op]
    return ds.subset(np.nonzero(keep)[0])


# ---------------------------------------------------------------- persistence


def sample_to_record(s):
    rec = topology_to_record(s.topology)
    rec.update(density=s.density, properties=s.properties.tolist(),
               base_id=int(s.base_id), rotation_id=int(s.rotation_id))
    return rec


def sample_from_record(rec, position=None):
    topo = topology_from_record(rec, position)
    try:
        return MTR(topo, float(rec["density"]), rec["properties"],
                   base_id=int(rec.get("base_id", 0)), rotation_id=int(rec.get("rotation_id", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad sample record: {exc}", position) from None


def save_dataset(ds, path):
    """One JSON header line, then one record per line; written atomically."""
    header = {"version": FILE_VERSION, "m": ds.m, "norm": ds.normalization(), "seed": ds.seed,
              "count": len(ds), "notes": ds.notes}
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".umate-ds-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for s in ds.samples:
                fh.write(json.dumps(sample_to_record(s)) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty dataset file", "line 1")

    def parse(line, lineno):
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", f"line {lineno}") from None

    header = parse(lines[0], 1)
    if not isinstance(header, dict) or "version" not in header:
        raise FormatError("missing dataset header", "line 1")
    if header["version"] != FILE_VERSION:
        raise VersionError(f"dataset file version {header['version']} is not supported "
                           f"(expected {FILE_VERSION})")
    m = int(header.get("m", 3))
    samples = []
    warnings = []
    for lineno, line in enumerate(lines[1:], start=2):
        sample = sample_from_record(parse(line, lineno), f"line {lineno}")
        if sample.properties.shape != (m,):
            raise FormatError(f"property length {sample.properties.size} != m={m}", f"line {lineno}")
        if sample.nonphysical:
            warnings.append(f"line {lineno}: density {sample.density} > 1 is non-physical")
        samples.append(sample)
    if "count" in header and header["count"] != len(samples):
        raise FormatError(f"expected {header['count']} records, found {len(samples)} (truncated?)",
                          f"line {len(lines) + 1}")
    notes = dict(header.get("notes") or {})
    if warnings:
        notes["warnings"] = warnings
        for w in warnings:
            log.warning(w)
    return Dataset(samples, m=m, seed=header.get("seed"), notes=notes)
