"""Command-line batch workflows: ``calibrate``, ``price``, ``sensitivity`` and ``validate``.

Every command writes its outputs plus ``manifest.json`` into ``--out-dir``.
Exit codes: 0 success, 2 malformed input, 4 infeasible calibration or a
model failing ``validate``, 5 Monte Carlo standard error above ``--max-stderr``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (SensitivityGrid, correlation_sensitivity, emit_report,
                       nonlinear_dependence_sensitivity)
from .calibration import CalibrationConfig, MarketCorrelations, calibrate, parse_model_name
from .errors import LevyModelError
from .exotics import WPContract, price_wp
from .models import AssetEconomy, convolution_residuals, model_from_dict, model_to_dict, validate_domain
from .optimize import INFEASIBLE
from .simulation import resolve_seed
from .vanilla import VolSurface

EXIT_OK, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_STDERR = 0, 2, 4, 5
ECONOMY_SCHEMA = "mvlevy.economy/1"
MANIFEST_SCHEMA = "mvlevy.manifest/1"


class InputError(Exception):
    """Malformed input file; the message carries the path (and line when known)."""


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    command: list
    config_hash: str
    inputs: dict
    seed: Optional[int]
    version: str = __version__
    wall_time: float = 0.0
    outputs: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)  # e.g. calibration ladder stages

    def to_dict(self) -> dict:
        return {"schema": MANIFEST_SCHEMA, "command": self.command, "config_hash": self.config_hash,
                "inputs": self.inputs, "seed": self.seed, "version": self.version,
                "wall_time": self.wall_time, "outputs": self.outputs, "notes": self.notes}

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["command"], d["config_hash"], d["inputs"], d["seed"], d["version"], d["wall_time"],
                   d.get("outputs", {}), d.get("notes", []))

    def verify_inputs(self) -> list:
        """Input paths whose current digest differs from the recorded one."""
        return [p for p, dig in self.inputs.items() if not os.path.exists(p) or file_digest(p) != dig]


# ---------------------------------------------------------------------------
# input loaders
# ---------------------------------------------------------------------------


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def load_economy(path) -> AssetEconomy:
    d = _read_json(path)
    if d.get("schema", ECONOMY_SCHEMA) != ECONOMY_SCHEMA:
        raise InputError(f"{path}: unsupported economy schema {d.get('schema')!r}")
    try:
        return AssetEconomy(tuple(d["spots"]), float(d.get("rate", 0.0)), d.get("dividends"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed economy ({exc})") from None


def economy_to_dict(economy: AssetEconomy) -> dict:
    return {"schema": ECONOMY_SCHEMA, "spots": list(economy.spots), "rate": economy.rate,
            "dividends": list(economy.dividends)}


def load_model(path):
    d = _read_json(path)
    try:
        return model_from_dict(d.get("model", d))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed model ({exc})") from None


def _load(loader, path):
    try:
        return loader(path)
    except InputError:
        raise
    except (KeyError, TypeError, ValueError, LevyModelError) as exc:
        msg = str(exc)
        raise InputError(msg if msg.startswith(str(path)) else f"{path}: {msg}") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _write_json(path, obj) -> str:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _finish(args, manifest: RunManifest, outputs: list, t0: float) -> None:
    manifest.outputs = {os.path.basename(p): file_digest(p) for p in outputs}
    manifest.wall_time = time.perf_counter() - t0
    _write_json(os.path.join(args.out_dir, "manifest.json"), manifest.to_dict())


def _inputs(*paths) -> dict:
    return {p: file_digest(p) for p in paths if p}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    t0 = time.perf_counter()
    family, variant = parse_model_name(args.model)
    if args.procedure == "two-step" and not variant.startswith("c"):
        raise InputError(f"joint required for unconstrained model {args.model}")
    surfaces = [_load(VolSurface.load, p) for p in args.surfaces]
    corr = _load(MarketCorrelations.load, args.corr)
    if corr.n_assets != len(surfaces):
        raise InputError(f"{args.corr}: {corr.n_assets} assets but {len(surfaces)} surfaces given")
    cfg = _load(CalibrationConfig.load, args.config) if args.config else CalibrationConfig()
    seed = resolve_seed(args.seed if args.seed is not None else (cfg.de.seed if args.config else None))
    de = replace(cfg.de, seed=seed, workers=args.threads or cfg.de.workers)
    cfg = replace(cfg, de=de, epsilon=args.epsilon if args.epsilon is not None else cfg.epsilon)

    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    res = calibrate(surfaces, corr, args.model, cfg, args.procedure, log=log)

    diag = res.diagnostics()
    diag.pop("wall_time")
    outputs = [_write_json(os.path.join(args.out_dir, "model.json"), model_to_dict(res.model)),
               _write_json(os.path.join(args.out_dir, "diagnostics.json"), diag)]
    manifest = RunManifest(["mvlevy"] + args.argv, _canonical_hash(cfg.to_dict()),
                           _inputs(*args.surfaces, args.corr, args.config), seed, notes=list(res.flags))
    _finish(args, manifest, outputs, t0)
    print(f"{res.procedure}: status={res.status} marginal_rmse="
          f"{','.join(f'{r:.3g}' for r in res.marginal_rmse)} correlation_rmse={res.correlation_rmse:.3g}")
    for flag in res.flags:
        print(f"  {flag}")
    return EXIT_INFEASIBLE if res.status == INFEASIBLE else EXIT_OK


def cmd_price(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.model)
    contract = _load(WPContract.load, args.contract)
    economy = load_economy(args.economy)
    seed = resolve_seed(args.seed)
    res = price_wp(model, contract, economy, args.paths, seed)
    out = dict(res.to_dict(), variant=contract.variant)
    outputs = [_write_json(os.path.join(args.out_dir, "price.json"), out)]
    cfg = {"paths": args.paths, "max_stderr": args.max_stderr}
    manifest = RunManifest(["mvlevy"] + args.argv, _canonical_hash(cfg),
                           _inputs(args.model, args.contract, args.economy), seed)
    _finish(args, manifest, outputs, t0)
    print(f"{contract.variant} price {res.price:.6f} (stderr {res.stderr:.2e}, {res.n_paths} paths, seed {seed})")
    if args.max_stderr is not None and res.stderr > args.max_stderr:
        print(f"warning: stderr {res.stderr:.3g} exceeds --max-stderr {args.max_stderr:g}", file=sys.stderr)
        return EXIT_STDERR
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.model)
    contract = _load(WPContract.load, args.contract)
    economy = load_economy(args.economy)
    grid = _load(SensitivityGrid.load, args.grid)
    seed = resolve_seed(args.seed)
    workers = args.threads or 1
    tables = []
    if args.study in ("correlation", "both"):
        tables.append(correlation_sensitivity(contract, economy, grid, model, args.paths, seed, workers=workers))
    if args.study in ("nonlinear", "both"):
        tables.append(nonlinear_dependence_sensitivity(contract, economy, grid, model, args.paths, seed,
                                                       workers=workers))
    outputs = emit_report(tables, args.out_dir)
    cfg = {"paths": args.paths, "study": args.study, "grid": grid.to_dict()}
    manifest = RunManifest(["mvlevy"] + args.argv, _canonical_hash(cfg),
                           _inputs(args.model, args.contract, args.economy, args.grid), seed)
    _finish(args, manifest, outputs, t0)
    for tab in tables:
        print(f"{tab.name}: {len(tab.rows)} priced, {len(tab.skipped)} skipped")
    return EXIT_OK


def cmd_validate(args) -> int:
    t0 = time.perf_counter()
    model = load_model(args.model)
    violations = [str(v) for v in validate_domain(model)]
    report = {"model": model.name, "violations": violations}
    if model.family == "BB" and model.constrained:
        res = convolution_residuals(model)
        report["residual_norms"] = [float(v) for v in np.linalg.norm(res, axis=1)]
    for v in violations:
        print(f"violation: {v}")
    if not violations:
        print("domain: ok")
    for j, r in enumerate(report.get("residual_norms", [])):
        print(f"convolution residual norm asset {j}: {r:.3e}")
    if args.out_dir:
        outputs = [_write_json(os.path.join(args.out_dir, "validation.json"), report)]
        manifest = RunManifest(["mvlevy"] + args.argv, _canonical_hash({}), _inputs(args.model), None)
        _finish(args, manifest, outputs, t0)
    return EXIT_INFEASIBLE if violations else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvlevy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out-dir", required=out_required, help="directory for outputs and manifest.json")
        p.add_argument("--seed", type=int, help="master seed; drawn and recorded when absent")
        p.add_argument("--threads", type=_positive_int, help="worker cap for internal parallelism")

    p = sub.add_parser("calibrate", help="fit a model to vol surfaces and correlation targets")
    p.add_argument("--model", required=True, help="model name, e.g. cls-vg or ubb-nig")
    p.add_argument("--surfaces", nargs="+", required=True, help="one surface file per asset, in asset order")
    p.add_argument("--corr", required=True, help="correlation targets (JSON)")
    p.add_argument("--config", help="calibration config (JSON); flags override it")
    p.add_argument("--epsilon", type=float, help="maximum correlation gap for joint calibration")
    p.add_argument("--procedure", choices=("auto", "two-step", "joint"), default="auto")
    p.add_argument("-v", "--verbose", action="store_true", help="log ladder stages to stderr")
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("price", help="Monte Carlo price of a WP note")
    p.add_argument("--model", required=True, help="model file (JSON)")
    p.add_argument("--contract", required=True, help="contract file (JSON)")
    p.add_argument("--economy", required=True, help="economy file (JSON)")
    p.add_argument("--paths", type=_positive_int, default=100_000)
    p.add_argument("--max-stderr", type=float, help="warn (exit 5) above this standard error")
    common(p)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("sensitivity", help="correlation and nonlinear-dependence studies")
    p.add_argument("--model", required=True, help="constrained LS template model (JSON)")
    p.add_argument("--contract", required=True)
    p.add_argument("--economy", required=True)
    p.add_argument("--grid", required=True, help="sensitivity grid (JSON)")
    p.add_argument("--study", choices=("correlation", "nonlinear", "both"), default="both")
    p.add_argument("--paths", type=_positive_int, default=100_000)
    common(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("validate", help="report domain violations and convolution residuals")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", help="optionally write validation.json and a manifest here")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        if getattr(args, "out_dir", None):
            os.makedirs(args.out_dir, exist_ok=True)
        return args.func(args)
    except (InputError, ValueError, LevyModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
