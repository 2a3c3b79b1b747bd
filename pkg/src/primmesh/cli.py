"""Command-line interface.

Every command validates its configuration and inputs before touching the
filesystem; ``--dry-run`` prints the validated plan as JSON and stops. On
failure a single ``error: {json}`` line goes to stderr and the exit code is
nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import PROFILES, RUNS_ENV, Config, load_config
from .data import CATEGORIES, generate_synthetic_dataset, ingest_external, load_dataset
from .estimators import MeshAgent, PrimAgent
from .expert import generate_demonstrations
from .geometry import ContractError, Cuboid, EdgeLoop, loft_mesh
from .io import FormatError, export_obj, read_pfm, read_voxg
from .env_mesh import assign_edge_loops, canonical_sort
from .pipeline import evaluate, model_shape, read_metrics, write_metrics
from .replay import write_archive
from .training import SCHEMES, prim_env_factory, run_scheme

log = logging.getLogger("primmesh")

EXIT_USAGE = 2
EXIT_FAILURE = 1
PRIM_CKPT = "checkpoints/prim.qnet"
MESH_CKPT = "checkpoints/mesh.qnet"


class CommandError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------

def _run_dir(config: Config, name: str) -> Path:
    if not name or "/" in name or name in (".", ".."):
        raise ContractError(f"bad run name {name!r}")
    return config.runs_root() / name


def _dataset(config: Config, path: Optional[str]):
    path = path or config.dataset
    if not path:
        raise ContractError("no dataset given (use --data or [paths] dataset)")
    manifest = Path(path) / "manifest.json"
    if not manifest.is_file():
        raise ContractError(f"{path} is not a dataset directory (missing manifest.json)")
    return Path(path)


def _split(config: Config, shapes):
    d = config.data
    if len(shapes) < 2:
        raise ContractError("the benchmark split needs at least two shapes")
    n_demo = min(d.demo_shapes, len(shapes) - 1)
    return shapes[:n_demo], shapes[: min(d.train_shapes, len(shapes))], shapes[n_demo:]


def _snapshot(config: Config, run: Path) -> None:
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.ini").write_text(config.to_ini())


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ContractError(f"missing {what}: {path}")
    return path


def _load_agents(run: Path):
    prim = PrimAgent.load(_require(run / PRIM_CKPT, "Prim-Agent checkpoint"))
    mesh = MeshAgent.load(_require(run / MESH_CKPT, "Mesh-Agent checkpoint"))
    return prim, mesh


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args, config: Config):
    categories = args.category or list(CATEGORIES)
    for c in categories:
        if c not in CATEGORIES:
            raise ContractError(f"unknown category {c!r}; expected one of {CATEGORIES}")
    count = args.count or config.data.shapes
    if count < 1:
        raise ContractError("count must be at least 1")
    seed = config.data.seed if args.seed is None else args.seed
    plan = {"command": "gen-data", "out": args.out, "count": count, "categories": categories, "seed": seed,
            "resolution": config.resolution}
    if args.dry_run:
        return plan
    generate_synthetic_dataset(count, args.out, categories, seed, config.resolution)
    return plan


def cmd_ingest(args, config: Config):
    for f in args.files:
        if not Path(f).is_file():
            raise ContractError(f"no such file: {f}")
    plan = {"command": "ingest", "files": len(args.files), "out": args.out, "resolution": args.resolution}
    if args.dry_run:
        for f in args.files:
            read_voxg(f)
        return plan
    ingest_external(args.files, args.out, args.resolution)
    return plan


def cmd_demo(args, config: Config):
    data = _dataset(config, args.data)
    plan = {"command": "demo", "data": str(data), "out": args.out, "limit": args.limit,
            "steps": config.env.prim_steps}
    if args.dry_run:
        return plan
    shapes = load_dataset(data)[: args.limit or None]
    records = generate_demonstrations([(s.target, s.reference) for s in shapes], shapes[0].target.resolution,
                                      "prim", config.env.prim_steps)
    write_archive(records, args.out)
    plan["records"] = len(records)
    return plan


def _train_plan(args, config: Config, agent: str):
    data = _dataset(config, args.data)
    run = _run_dir(config, args.run)
    if args.scheme not in SCHEMES:
        raise ContractError(f"unknown scheme {args.scheme!r}")
    return data, run, {"command": f"train-{agent}", "data": str(data), "run": str(run), "scheme": args.scheme,
                       "training": config.training.__dict__}


def cmd_train_prim(args, config: Config):
    data, run, plan = _train_plan(args, config, "prim")
    if args.dry_run:
        return plan
    shapes = load_dataset(data)
    demo, train, _ = _split(config, shapes)
    agent = PrimAgent(args.scheme, config.training, len(demo), config.env.prim_steps, config.training.seed)
    agent.fit(train)
    _snapshot(config, run)
    (run / "checkpoints").mkdir(exist_ok=True)
    agent.save(run / PRIM_CKPT)
    plan["seconds"] = round(agent.fit_seconds_, 1)
    return plan


def cmd_train_mesh(args, config: Config):
    data, run, plan = _train_plan(args, config, "mesh")
    _require(run / PRIM_CKPT, "Prim-Agent checkpoint (train-prim first)")
    if args.dry_run:
        return plan
    shapes = load_dataset(data)
    demo, train, _ = _split(config, shapes)
    prim = PrimAgent.load(run / PRIM_CKPT)
    agent = MeshAgent(prim, args.scheme, config.training, len(demo), config.env.mesh_steps, config.training.seed)
    agent.fit(train)
    _snapshot(config, run)
    agent.save(run / MESH_CKPT)
    plan["seconds"] = round(agent.fit_seconds_, 1)
    return plan


def cmd_run_scheme(args, config: Config):
    data = _dataset(config, args.data)
    run = _run_dir(config, args.run)
    modes = list(SCHEMES) if args.mode == "all" else [args.mode]
    for m in modes:
        if m not in SCHEMES:
            raise ContractError(f"unknown scheme {m!r}; expected one of {SCHEMES} or 'all'")
    plan = {"command": "run-scheme", "data": str(data), "run": str(run), "modes": modes}
    if args.dry_run:
        return plan
    shapes = load_dataset(data)
    demo, train, held_out = _split(config, shapes)
    factory = prim_env_factory(shapes[0].target.resolution, config.env.prim_steps)
    _snapshot(config, run)
    rows: List[dict] = []
    for m in modes:
        result = run_scheme(m, factory, demo, train, held_out, config.training, chamfer=not args.no_chamfer)
        rows.extend(result.metrics)
        log.info("%s: %.1fs", m, result.seconds)
    write_metrics(rows, run / "metrics.csv")
    plan["metrics"] = [r for r in rows if r["category"] == "all"]
    return plan


def cmd_model(args, config: Config):
    run = _run_dir(config, args.run)
    if not (args.grid or args.depth):
        raise ContractError("model needs --grid and/or --depth")
    target = read_voxg(args.grid) if args.grid else None
    reference = read_pfm(args.depth) if args.depth else None
    prim, mesh = _load_agents(run)
    if target is not None and target.resolution != prim.resolution_:
        raise ContractError(f"grid resolution {target.resolution} != trained resolution {prim.resolution_}")
    out = Path(args.out) if args.out else run / "models"
    name = args.name or Path(args.grid or args.depth).stem
    plan = {"command": "model", "run": str(run), "out": str(out), "name": name}
    if args.dry_run:
        return plan
    res = model_shape(prim.net_, mesh.net_, reference, target, prim.resolution_, prim.n_steps, mesh.n_steps,
                      config.env.alpha1, config.env.alpha2, config.env.merge_thresholds)
    res.write(out, name)
    (out / f"{name}.loops.json").write_text(json.dumps(
        [{"axis": l.axis, "v_l": l.v_l, "v_l_prime": l.v_l_prime, "owner": l.owner} for l in res.loops]) + "\n")
    plan.update({"primitives": len(res.merged), "triangles": int(len(res.mesh.triangles)),
                 "iou": res.iou, "chamfer": res.chamfer})
    return plan


def cmd_eval(args, config: Config):
    data = _dataset(config, args.data)
    run = _run_dir(config, args.run)
    prim, mesh = _load_agents(run)
    plan = {"command": "eval", "data": str(data), "run": str(run)}
    if args.dry_run:
        return plan
    shapes = load_dataset(data)
    if args.held_out:
        shapes = _split(config, shapes)[2]
    rows = evaluate(prim.net_, mesh.net_, shapes, args.mode, prim.n_steps, mesh.n_steps)
    write_metrics(rows, run / "metrics.csv")
    plan["metrics"] = read_metrics(run / "metrics.csv")
    return plan


def cmd_export_obj(args, config: Config):
    src = Path(args.input)
    try:
        items = json.loads(src.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read {src}: {exc}") from None
    if not isinstance(items, list) or not items:
        raise ContractError(f"{src}: expected a non-empty JSON list")
    try:
        if "axis" in items[0]:
            loops = [EdgeLoop(int(d["axis"]), d["v_l"], d["v_l_prime"], int(d.get("owner", 0))) for d in items]
        else:
            cuboids = [Cuboid(tuple(d["v"]), tuple(d["v_prime"]), bool(d.get("deleted", False))) for d in items]
            loops = canonical_sort(assign_edge_loops(cuboids))
    except (KeyError, TypeError) as exc:
        raise ContractError(f"{src}: malformed entry ({exc})") from None
    mesh = loft_mesh(loops)
    plan = {"command": "export-obj", "input": str(src), "out": args.out, "loops": len(loops),
            "triangles": int(len(mesh.triangles))}
    if args.dry_run:
        return plan
    export_obj(mesh, args.out)
    return plan


COMMANDS = {
    "gen-data": cmd_gen_data,
    "ingest": cmd_ingest,
    "demo": cmd_demo,
    "train-prim": cmd_train_prim,
    "train-mesh": cmd_train_mesh,
    "run-scheme": cmd_run_scheme,
    "model": cmd_model,
    "eval": cmd_eval,
    "export-obj": cmd_export_obj,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="primmesh", description="Two-stage primitive / mesh shape modeling agents.")
    p.add_argument("--version", action="version", version=f"primmesh {__version__}")
    p.add_argument("--config", help="INI file layered over the profile")
    p.add_argument("--profile", choices=PROFILES, default="desk")
    p.add_argument("--runs", help=f"run-directory root (default: ${RUNS_ENV} or [paths] runs)")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write a synthetic box-assembly dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--category", action="append", help="repeatable; default: all categories")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("ingest", help="validate external VOXG grids into a dataset")
    s.add_argument("files", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=int)

    s = sub.add_parser("demo", help="virtual-expert Prim-Agent rollouts to a PMXP archive")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--limit", type=int, default=0)

    for name in ("train-prim", "train-mesh"):
        s = sub.add_parser(name, help=f"train the {name[6:].capitalize()}-Agent into a run directory")
        s.add_argument("--data")
        s.add_argument("--run", required=True)
        s.add_argument("--scheme", default="full", choices=SCHEMES)

    s = sub.add_parser("run-scheme", help="train and evaluate learning schemes on the benchmark split")
    s.add_argument("--data")
    s.add_argument("--run", required=True)
    s.add_argument("--mode", default="all")
    s.add_argument("--no-chamfer", action="store_true")

    s = sub.add_parser("model", help="model one shape end to end: OBJ, traces, loops")
    s.add_argument("--run", required=True)
    s.add_argument("--grid", help="target VOXG (also gives IoU / Chamfer)")
    s.add_argument("--depth", help="reference PFM; rendered from --grid when omitted")
    s.add_argument("--out")
    s.add_argument("--name")

    s = sub.add_parser("eval", help="metrics table for a trained run")
    s.add_argument("--run", required=True)
    s.add_argument("--data")
    s.add_argument("--mode", default="model", help="label for the mode column")
    s.add_argument("--held-out", action="store_true", help="only shapes outside the demo split")

    s = sub.add_parser("export-obj", help="loft a loops or primitives JSON list into an OBJ")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    return p


def _fail(kind: str, message: str, command: Optional[str], code: int) -> int:
    print("error: " + json.dumps({"command": command, "type": kind, "message": message}, sort_keys=True),
          file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = load_config(args.config, args.profile)
        if args.runs:
            config.runs_override = args.runs
        result = COMMANDS[command](args, config)
    except CommandError as exc:
        return _fail("UsageError", str(exc), command, EXIT_USAGE)
    except FormatError as exc:
        return _fail("FormatError", str(exc), command, EXIT_FAILURE)
    except ContractError as exc:
        return _fail("ContractError", str(exc), command, EXIT_FAILURE)
    except OSError as exc:
        return _fail("OSError", f"{exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), command, EXIT_FAILURE)
    if args.dry_run:
        result["dry_run"] = True
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
