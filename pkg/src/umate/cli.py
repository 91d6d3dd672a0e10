"""Command-line entry point: ``umate <command> ...``.

Exit codes: 0 success, 2 contract violation, 3 numeric error, 4 format/version error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys

import numpy as np

from . import __version__
from .config import load_config
from .dataset import augment_rotations, filter_samples, generate_dataset, load_dataset, save_dataset
from .errors import ContractViolation, UmateError
from .geometry import export_obj, load_topology, save_topology
from .align import save_plan
from . import pipeline as pl

log = logging.getLogger("umate")


def _floats(text, what):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ContractViolation(f"cannot parse {what} {text!r}; expected comma-separated numbers") from None


def _file_digest(path):
    h = hashlib.sha1()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]


def _provenance(cfg=None, seed=None, ckpt=None):
    out = {"umate_version": __version__}
    if cfg is not None:
        out["config"] = cfg.to_dict()
    if seed is not None:
        out["seed"] = seed
    if ckpt is not None:
        out["checkpoint"] = ckpt
        out["checkpoint_sha1"] = _file_digest(ckpt)
    return out


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_dataset_gen(args):
    ds = generate_dataset(args.topologies, args.densities_per, args.seed, max_nodes=args.max_nodes)
    if args.augment:
        ds = augment_rotations(ds, args.augment, args.seed)
    if args.filter:
        ds = filter_samples(ds, args.filter)
    save_dataset(ds, args.out)
    _emit({"samples": len(ds), "out": args.out, **_provenance(seed=args.seed)})


def cmd_train(args):
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    ds = load_dataset(args.data)
    if args.filter:
        ds = filter_samples(ds, args.filter)
    train_ds, _, _ = pl.split_for_model(ds, cfg)
    model, history = pl.train(train_ds, cfg)
    pl.save_checkpoint(model, args.out)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as fh:
            json.dump(history.to_dict(), fh, indent=1)
    _emit({"epochs": len(history.total), "final_loss": history.total[-1] if history.total else None,
           "out": args.out, **_provenance(cfg, cfg.seed)})


def cmd_generate(args):
    model = pl.load_checkpoint(args.ckpt)
    rng = np.random.default_rng(args.seed)
    gen = pl.task_generate(model, args.density, _floats(args.property, "property"), rng, n=args.nodes)
    prov = _provenance(seed=args.seed, ckpt=args.ckpt)
    save_topology(gen.topology, args.out, extra={"lattice_recovered": gen.lattice_recovered, **prov})
    if args.obj:
        export_obj(gen.topology, args.obj)
    _emit({"out": args.out, "nodes": gen.topology.n, "edges": int(len(gen.topology.edges())), **prov})


def cmd_predict(args):
    model = pl.load_checkpoint(args.ckpt)
    p = pl.task_predict(model, load_topology(args.topology), args.density, np.random.default_rng(args.seed))
    _emit({"properties": p.tolist(), **_provenance(seed=args.seed, ckpt=args.ckpt)})


def cmd_confirm(args):
    model = pl.load_checkpoint(args.ckpt)
    rho = pl.task_confirm(model, load_topology(args.topology), _floats(args.property, "property"),
                          np.random.default_rng(args.seed))
    _emit({"density": rho, **_provenance(seed=args.seed, ckpt=args.ckpt)})


def cmd_eval(args):
    model = pl.load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    samples = ds.samples
    if args.split != "all":
        parts = dict(zip(("train", "val", "test"), pl.split_for_model(ds, model.cfg)))
        samples = parts[args.split].samples
    if args.limit:
        samples = samples[:args.limit]
    report = pl.evaluate(model, samples, seed=args.seed)
    report.notes.update(_provenance(model.cfg, args.seed, args.ckpt))
    report.save(args.report)
    _emit({"report": args.report, **report.aggregates()})


def cmd_inspect(args):
    model = pl.load_checkpoint(args.ckpt)
    info = {"step": model.step, "epoch": model.epoch, "kappa": model.cfg.kappa, "d": model.cfg.d,
            "parameters": int(sum(t.data.size for t in model.params())),
            **_provenance(model.cfg, ckpt=args.ckpt)}
    if model.plan is not None:
        info["plan"] = {"d_w": model.plan.d_w, "converged": model.plan.converged,
                        "iterations": model.plan.iterations}
        if args.plan:
            save_plan(model.plan, args.plan)
            info["plan"]["out"] = args.plan
    elif args.plan:
        raise ContractViolation("checkpoint holds no transport plan")
    _emit(info)


def build_parser():
    p = argparse.ArgumentParser(prog="umate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"umate {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset utilities")
    dsub = ds.add_subparsers(dest="dataset_command", required=True)
    g = dsub.add_parser("gen", help="generate a synthetic truss dataset")
    g.add_argument("--topologies", type=int, required=True)
    g.add_argument("--densities-per", type=int, default=3)
    g.add_argument("--augment", type=int, default=0, help="random rotations per sample")
    g.add_argument("--max-nodes", type=int, default=20)
    g.add_argument("--filter", help='e.g. "density<0.35 && E>q75"')
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="YAML or JSON config file")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--filter")
    t.add_argument("--history", help="write per-epoch losses here")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="topology from density and properties")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--density", type=float, required=True)
    g.add_argument("--property", required=True, help='comma-separated, e.g. "0.1,0.04,0.25"')
    g.add_argument("--nodes", type=int, help="node count (default: sampled)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--obj", help="also write a wavefront .obj")
    g.set_defaults(func=cmd_generate)

    g = sub.add_parser("predict", help="properties of a topology at a density")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--topology", required=True)
    g.add_argument("--density", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_predict)

    g = sub.add_parser("confirm", help="density for a topology and target properties")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--topology", required=True)
    g.add_argument("--property", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_confirm)

    g = sub.add_parser("eval", help="run all three tasks and write a report")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--report", required=True)
    g.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    g.add_argument("--limit", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("inspect", help="checkpoint summary; optionally dump the transport plan")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--plan", help="write the plan tensor here")
    g.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UmateError as exc:
        print(f"umate: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"umate: error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
