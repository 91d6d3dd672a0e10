"""Model container, training loop, the three inference tasks, evaluation, checkpoints."""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import ndiff as nd
from .align import (TransportPlan, conditional_plan, cost_kernel, differentiable_twd,
                    token_frequencies, tripartite_sinkhorn)
from .config import Config
from .dataset import SplitSpec, split
from .diffuse import (Backbone, DiffusionSchedule, batch_noise_mask, denoise_chain, generation_loss,
                      padded_layout, total_loss)
from .errors import CapacityError, ContractViolation, FormatError, NumericError, VersionError
from .geometry import Topology
from .metrics import EvalReport, nrmse
from .tokenizer import (Tokenizer, alignment_loss, alignment_residuals, decode_topology_arrays,
                        init_codebook, quantize, round_tokens)

log = logging.getLogger("umate")

SEG_ID = {"topology": 0, "density": 1, "property": 2}


class Model:
    """Everything a checkpoint holds: both parameter sets, config, statistics, plan."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0]) if rng is None else rng
        self.tok = Tokenizer(cfg, rng)
        self.bb = Backbone(cfg, rng)
        self.schedule = DiffusionSchedule.from_config(cfg)
        self.plan = None
        self.n_hist = np.zeros(cfg.n_max + 1)
        self.step = 0
        self.epoch = 0

    def named_params(self):
        return list(self.tok.ps.items()) + list(self.bb.ps.items())

    def params(self):
        return [t for _, t in self.named_params()]

    def state(self):
        return {k: t.data.copy() for k, t in self.named_params()}

    def phi(self, key_mask):
        return lambda M, sigma=None: self.bb(M, sigma, key_mask=key_mask)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    X: np.ndarray  # (B, n_max, 3)
    A: np.ndarray  # (B, n_max, n_max)
    node_mask: np.ndarray  # (B, n_max)
    rho: np.ndarray  # (B,)
    P: np.ndarray  # (B, m) raw
    P_norm: np.ndarray  # (B, m)
    row_mask: np.ndarray  # (B, h_max)

    @property
    def size(self):
        return len(self.rho)


def collate(samples, model):
    cfg = model.cfg
    B = len(samples)
    X = np.zeros((B, cfg.n_max, 3))
    A = np.zeros((B, cfg.n_max, cfg.n_max))
    mask = np.zeros((B, cfg.n_max), dtype=bool)
    for b, s in enumerate(samples):
        n = s.topology.n
        if n > cfg.n_max:
            raise CapacityError(f"sample with {n} nodes exceeds n_max = {cfg.n_max}")
        X[b, :n] = s.topology.coords
        A[b, :n, :n] = s.topology.adjacency
        mask[b, :n] = True
    rho = np.array([s.density for s in samples], dtype=np.float64)
    P = np.array([s.properties for s in samples], dtype=np.float64).reshape(B, -1)
    if P.shape[1] != cfg.m:
        raise ContractViolation(f"samples carry {P.shape[1]} properties, config expects m = {cfg.m}")
    row_mask = np.concatenate([mask, np.ones((B, 1 + cfg.m), dtype=bool)], axis=1)
    return Batch(X, A, mask, rho, P, model.tok.normalize_properties(P), row_mask)


# ---------------------------------------------------------------- training


def forward_losses(model, batch, rng, identity_round=False, twd_init=None):
    """One training forward pass: encode, round, transport, decode, noise + denoise.

    Returns (total loss Tensor, dict of named scalar terms, transport plan).
    Reconstruction and the denoising chain both start from the same rounded tokens.
    """
    cfg, tok = model.cfg, model.tok
    Z = tok.codebook
    X_tok = tok.encode_topology(batch.X, batch.A, batch.node_mask)
    rho_tok = tok.encode_density(batch.rho)
    P_tok = tok.encode_property(batch.P)
    qX = quantize(X_tok, Z, identity_round)
    qr = quantize(rho_tok, Z, identity_round)
    qP = quantize(P_tok, Z, identity_round)

    if identity_round or (cfg.alpha_w == 0 and cfg.lambda_align == 0):
        d_w, tp = nd.Tensor(0.0), None
    else:
        F = token_frequencies(qX.indices[batch.node_mask], qr.indices, qP.indices, cfg.kappa)
        d_w, tp = differentiable_twd(Z, F, eps=cfg.ot_eps, mode=cfg.cost_mode, max_iter=cfg.ot_max_iter,
                                     tol=cfg.ot_tol, unroll=cfg.ot_unroll, init=twd_init)

    decoded = tok.decode_topology(qX.st, batch.node_mask)
    rho_hat = tok.decode_density(qr.st)
    p_hat = tok.decode_property(qP.st)
    # Rounding residuals train the prototypes; on the encoder side they are
    # detached, so the unsquared norms cannot pull every token onto one prototype.
    enc = (X_tok, rho_tok, P_tok)
    if cfg.detach_encoder_residual:
        enc = tuple(t.detach() for t in enc)
    res = alignment_residuals(batch.X, batch.A, batch.rho, batch.P_norm, *enc,
                              qX.rounded, qr.rounded, qP.rounded, decoded, rho_hat, p_hat,
                              node_mask=batch.node_mask)
    L_align = alignment_loss(res, d_w, cfg.alpha_T, cfg.alpha_rho, cfg.alpha_p, cfg.alpha_w)

    M_round = nd.concat([qX.st, qr.st, qP.st], axis=1)
    if cfg.detach_gen_tokens:
        # the denoiser learns on the current tokens without reshaping them
        M_round = M_round.detach()
    _, un = batch_noise_mask(cfg.n_max, cfg.m, rng, batch.size)
    noise = cfg.train_noise * rng.standard_normal(M_round.shape) * un[..., None]
    M_T = denoise_chain(M_round + noise, un, model.schedule, model.phi(batch.row_mask), rng,
                        literal=cfg.literal_update, truncate=cfg.grad_truncate)
    L_gen = generation_loss(M_round, M_T, batch.row_mask)
    total = total_loss(L_align, L_gen, cfg.lambda_align, cfg.lambda_gen)

    terms = {k: float(v.data) for k, v in res.items()}
    terms.update(d_w=float(d_w.data), align=float(L_align.data), gen=float(L_gen.data), total=float(total.data))
    for k, v in terms.items():
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss term {k!r}")
    return total, terms, tp


def encode_tokens(model, samples, chunk=64):
    """Unrounded encoder outputs of every real token of every sample, per modality."""
    out = {"topology": [], "density": [], "property": []}
    with nd.no_grad():
        for s in range(0, len(samples), chunk):
            b = collate(samples[s:s + chunk], model)
            out["topology"].append(model.tok.encode_topology(b.X, b.A, b.node_mask).data[b.node_mask])
            out["density"].append(model.tok.encode_density(b.rho).data.reshape(-1, model.cfg.d))
            out["property"].append(model.tok.encode_property(b.P).data.reshape(-1, model.cfg.d))
    return {k: np.concatenate(v) for k, v in out.items()}


def encode_indices(model, samples):
    """Codebook indices of every real token of every sample, per modality."""
    Z = model.tok.codebook.data
    return {k: round_tokens(v, Z)[1] for k, v in encode_tokens(model, samples).items()}


def restart_dead_prototypes(model, samples, rng):
    """Move prototypes that no token selects onto encoder outputs.

    Dead prototypes are dealt round-robin to the three modalities and placed on
    randomly chosen encoder outputs of that modality, so every modality gains
    resolution.  Returns the number of prototypes moved.
    """
    toks = encode_tokens(model, samples)
    Z = model.tok.codebook.data
    used = np.zeros(len(Z), dtype=bool)
    for v in toks.values():
        used[round_tokens(v, Z)[1]] = True
    dead = np.flatnonzero(~used)
    if len(dead) == 0:
        return 0
    Z = Z.copy()
    segs = list(toks)
    for j, k in enumerate(dead):
        pool = toks[segs[j % len(segs)]]
        Z[k] = pool[rng.integers(len(pool))]
    # exact copies of one token would tie; a tiny jitter keeps prototypes distinct
    Z[dead] += 1e-6 * np.linalg.norm(Z[dead], axis=1, keepdims=True) * rng.standard_normal((len(dead), Z.shape[1]))
    model.tok.codebook.data = Z
    return len(dead)


def refresh_plan(model, samples):
    """Transport plan between the modality token histograms of ``samples``."""
    cfg = model.cfg
    idx = encode_indices(model, samples)
    F = token_frequencies(idx["topology"], idx["density"], idx["property"], cfg.kappa)
    C, _ = cost_kernel(model.tok.codebook.data, cfg.ot_eps, cfg.cost_mode)
    model.plan = tripartite_sinkhorn(F, C, eps=cfg.ot_eps, max_iter=cfg.ot_max_iter, tol=cfg.ot_tol)
    return model.plan


def initialize_model(train_ds, cfg):
    """Fresh parameters, property normalization, node-count histogram, codebook scale."""
    if len(train_ds) == 0:
        raise ContractViolation("training set is empty")
    model = Model(cfg)
    norm = train_ds.normalization()
    model.tok.set_normalization(norm["prop_min"], norm["prop_max"])
    model.tok.set_density_range(norm["density_min"], norm["density_max"])
    counts = np.bincount([s.topology.n for s in train_ds], minlength=cfg.n_max + 1)
    if len(counts) > cfg.n_max + 1:
        raise CapacityError(f"training data has topologies above n_max = {cfg.n_max}")
    model.n_hist = counts.astype(np.float64)
    warm = collate(list(train_ds.samples[:cfg.batch_size]), model)
    with nd.no_grad():
        toks = [model.tok.encode_topology(warm.X, warm.A, warm.node_mask).data[warm.node_mask],
                model.tok.encode_density(warm.rho).data.reshape(-1, cfg.d),
                model.tok.encode_property(warm.P).data.reshape(-1, cfg.d)]
    init_codebook(model.tok, np.concatenate(toks), np.random.default_rng([cfg.seed, 2]))
    return model


@dataclass
class History:
    total: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def to_dict(self):
        return {"total": self.total, "terms": self.terms, "seconds": self.seconds}


def train(train_ds, cfg, model=None, epochs=None, progress=None):
    """Adam on the combined loss; returns (model, History).

    ``model`` continues training an existing model; otherwise one is initialized
    from ``train_ds``.  The transport plan used at inference is recomputed from
    the whole training set after every epoch.
    """
    if len(train_ds) == 0:
        raise ContractViolation("training set is empty")
    model = initialize_model(train_ds, cfg) if model is None else model
    rng = np.random.default_rng([cfg.seed, 1, model.epoch])
    opt = getattr(model, "opt", None) or nd.OptimizerState(lr=cfg.lr)
    model.opt = opt
    params = model.params()
    samples = list(train_ds.samples)
    history = History()
    twd_init = None
    for _ in range(cfg.epochs if epochs is None else epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        sums, count = {}, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = collate([samples[i] for i in order[s:s + cfg.batch_size]], model)
            loss, terms, tp = forward_losses(model, batch, rng, twd_init=twd_init)
            if tp is not None and tp.converged:
                twd_init = tp.scalings
            grads = nd.backward(loss, params)
            nd.adam_step(params, grads, opt)
            model.step += 1
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * batch.size
            count += batch.size
        model.epoch += 1
        if cfg.restart_dead:
            restart_dead_prototypes(model, samples, rng)
        refresh_plan(model, samples)
        means = {k: v / count for k, v in sums.items()}
        history.total.append(means["total"])
        history.terms.append(means)
        history.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.5f (%.1fs)", model.epoch, means["total"], history.seconds[-1])
        if progress is not None:
            progress(model.epoch, means)
    return model, history


# ---------------------------------------------------------------- inference


def _check_density(rho):
    if not (0 < rho <= 1):
        raise ContractViolation(f"density must lie in (0, 1], got {rho}")


def _check_topology(model, topology):
    if not isinstance(topology, Topology):
        raise ContractViolation("expected a Topology")
    if topology.n > model.cfg.n_max:
        raise CapacityError(f"topology has {topology.n} nodes; this model handles at most {model.cfg.n_max}")


def _known_tokens(model, topology=None, density=None, properties=None):
    """Rounded tokens and codebook indices of the given modalities."""
    tok, Z = model.tok, model.tok.codebook.data
    out = {}
    with nd.no_grad():
        if topology is not None:
            t = tok.encode_topology(topology.coords, topology.adjacency).data
            out["topology"] = round_tokens(t, Z)
        if density is not None:
            out["density"] = round_tokens(tok.encode_density(np.asarray(density, dtype=np.float64)).data, Z)
        if properties is not None:
            out["property"] = round_tokens(tok.encode_property(np.asarray(properties, dtype=np.float64)).data, Z)
    return out


def init_probs(model, known, target):
    """Prototype distribution for the rows of ``target`` given known indices."""
    if model.plan is None:
        return np.full(model.cfg.kappa, 1.0 / model.cfg.kappa)
    pairs = [(seg, int(i)) for seg, (_, idx) in known.items() for i in np.ravel(idx)]
    if not pairs:
        P = model.plan.plan
        axes = tuple(a for a in range(3) if a != SEG_ID[target])
        marg = P.sum(axis=axes)
        return marg / marg.sum()
    return conditional_plan(model.plan, pairs, unknown=target).probs


def infill(model, known, target, n, rng):
    """Generate the ``target`` segment's rows with every other segment frozen.

    Unknown rows start at prototypes drawn from the transport-plan conditional
    plus N(0, train_noise²) (the same corruption the chain sees in training),
    run through the denoising chain, and are rounded to the codebook.
    Returns (rounded rows, indices).
    """
    cfg = model.cfg
    seg_of_row, h = padded_layout(cfg.n_max, cfg.m)
    Z = model.tok.codebook.data
    M0 = np.zeros((1, h, cfg.d))
    starts = {"topology": 0, "density": cfg.n_max, "property": cfg.n_max + 1}
    sizes = {"topology": n, "density": 1, "property": cfg.m}
    for seg, (rows, _) in known.items():
        M0[0, starts[seg]:starts[seg] + sizes[seg]] = rows
    probs = init_probs(model, known, target)
    k = sizes[target]
    idx0 = rng.choice(cfg.kappa, size=k, p=probs)
    sl = slice(starts[target], starts[target] + k)
    M0[0, sl] = Z[idx0] + cfg.train_noise * rng.standard_normal((k, cfg.d))
    row_mask = np.ones((1, h), dtype=bool)
    row_mask[0, n:cfg.n_max] = False
    un = np.zeros((1, h), dtype=bool)
    un[0, sl] = True
    with nd.no_grad():
        M_T = denoise_chain(M0, un, model.schedule, model.phi(row_mask), rng, literal=cfg.literal_update)
    return round_tokens(M_T.data[0, sl], Z)


@dataclass
class Generation:
    topology: Topology
    coords: np.ndarray
    adjacency_raw: np.ndarray
    lattice_recovered: bool
    indices: np.ndarray


def _decode_generation(model, rows, idx):
    X_hat, A_raw, A_bin, L_hat = decode_topology_arrays(model.tok, rows)
    lattice = L_hat if L_hat is not None else np.eye(3)
    return Generation(Topology(lattice, X_hat, A_bin.astype(np.int8)), X_hat, A_raw, L_hat is not None, idx)


def sample_node_count(model, rng):
    hist = model.n_hist
    if hist.sum() <= 0:
        return model.cfg.n_max
    return int(rng.choice(len(hist), p=hist / hist.sum()))


def task_generate(model, density, properties, rng, n=None):
    """Topology for a target density and property vector."""
    _check_density(density)
    properties = np.asarray(properties, dtype=np.float64).reshape(-1)
    if len(properties) != model.cfg.m:
        raise ContractViolation(f"expected {model.cfg.m} properties, got {len(properties)}")
    n = sample_node_count(model, rng) if n is None else int(n)
    if not 2 <= n <= model.cfg.n_max:
        raise CapacityError(f"node count {n} outside [2, {model.cfg.n_max}]")
    known = _known_tokens(model, density=density, properties=properties)
    rows, idx = infill(model, known, "topology", n, rng)
    return _decode_generation(model, rows, idx)


def decode_random_prototypes(model, n, rng):
    """Ablation baseline: n uniformly drawn prototypes decoded without any denoising."""
    idx = rng.integers(model.cfg.kappa, size=n)
    return _decode_generation(model, model.tok.codebook.data[idx], idx)


def task_predict(model, topology, density, rng):
    """Property vector (raw units) for a topology at a density."""
    _check_topology(model, topology)
    _check_density(density)
    known = _known_tokens(model, topology=topology, density=density)
    rows, _ = infill(model, known, "property", topology.n, rng)
    with nd.no_grad():
        p = model.tok.decode_property(rows).data
    return model.tok.denormalize_properties(p)


def task_confirm(model, topology, properties, rng):
    """Relative density in (0, 1) compatible with a topology and target properties."""
    _check_topology(model, topology)
    properties = np.asarray(properties, dtype=np.float64).reshape(-1)
    if len(properties) != model.cfg.m:
        raise ContractViolation(f"expected {model.cfg.m} properties, got {len(properties)}")
    known = _known_tokens(model, topology=topology, properties=properties)
    rows, _ = infill(model, known, "density", topology.n, rng)
    with nd.no_grad():
        return float(model.tok.decode_density(rows).data)


# ---------------------------------------------------------------- evaluation


def report_from_outputs(samples, gen_coords, pred_props, pred_density):
    """EvalReport from per-sample task outputs against ground truth."""
    report = EvalReport()
    for s, X in zip(samples, gen_coords):
        report.add_generation(X, s.topology.coords)
    gt_P = np.array([s.properties for s in samples], dtype=np.float64)
    gt_rho = np.array([s.density for s in samples], dtype=np.float64)
    report.nrmse_pp = nrmse(np.asarray(pred_props, dtype=np.float64), gt_P, "pp")
    report.nrmse_cc = nrmse(np.asarray(pred_density, dtype=np.float64), gt_rho, "cc")
    return report


def evaluate(model, samples, seed=0):
    """All three tasks on every sample; the generator's node count is the sample's."""
    samples = list(samples)
    if not samples:
        raise ContractViolation("evaluation set is empty")
    gen, pp, cc = [], [], []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, i])
        gen.append(task_generate(model, s.density, s.properties, rng, n=s.topology.n).coords)
        pp.append(task_predict(model, s.topology, s.density, rng))
        cc.append(task_confirm(model, s.topology, s.properties, rng))
    report = report_from_outputs(samples, gen, pp, cc)
    report.notes = {"seed": seed, "count": len(samples), "version": __version__}
    return report


def split_for_model(ds, cfg):
    """(train, validation, test) with the configured fractions and seed."""
    return split(ds, SplitSpec(tuple(cfg.split), cfg.seed))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"UMCK"
CKPT_VERSION = 1


def _atomic_write(path, chunks):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path):
    """Magic, <II (version, header length), JSON header, then raw little-endian float64 blobs."""
    blobs, directory, offset = [], [], 0
    arrays = [(k, t.data) for k, t in model.named_params()]
    if model.plan is not None:
        arrays.append(("plan", model.plan.plan))
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "umate-checkpoint",
        "version": CKPT_VERSION,
        "package_version": __version__,
        "config": model.cfg.to_dict(),
        "step": model.step,
        "epoch": model.epoch,
        "p_min": model.tok.p_min.tolist(),
        "p_span": model.tok.p_span.tolist(),
        "rho_min": model.tok.rho_min,
        "rho_span": model.tok.rho_span,
        "n_hist": model.n_hist.tolist(),
        "plan": None if model.plan is None else {
            "d_w": model.plan.d_w, "iterations": model.plan.iterations,
            "converged": bool(model.plan.converged), "eps": model.plan.eps, "tol": model.plan.tol},
        "tensors": directory,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    _atomic_write(path, [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hb)), hb] + blobs)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a umate checkpoint", position=0)
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", position=len(raw))
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})", position=12) from None
    base = 12 + hlen
    try:
        cfg = Config.from_dict(header["config"])
    except (ContractViolation, TypeError, KeyError) as exc:
        raise VersionError(f"{path}: configuration incompatible with this build: {exc}") from None
    model = Model(cfg)
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise FormatError(f"{path}: tensor {entry['name']} truncated", position=len(raw))
        arr = np.frombuffer(raw, dtype="<f8", count=entry["nbytes"] // 8, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    plan = tensors.pop("plan", None)
    try:
        model.tok.ps.load_state({k: v for k, v in tensors.items() if k in model.tok.ps})
        model.bb.ps.load_state({k: v for k, v in tensors.items() if k in model.bb.ps})
    except (KeyError, ValueError) as exc:
        raise VersionError(f"{path}: parameters do not match the stored configuration: {exc}") from None
    model.tok.p_min = np.asarray(header["p_min"], dtype=np.float64)
    model.tok.p_span = np.asarray(header["p_span"], dtype=np.float64)
    model.tok.rho_min = float(header["rho_min"])
    model.tok.rho_span = float(header["rho_span"])
    model.n_hist = np.asarray(header["n_hist"], dtype=np.float64)
    model.step = header["step"]
    model.epoch = header["epoch"]
    if plan is not None:
        meta = header["plan"]
        model.plan = TransportPlan(plan, meta["d_w"], meta["iterations"], meta["converged"],
                                   meta["eps"], meta["tol"])
    return model
