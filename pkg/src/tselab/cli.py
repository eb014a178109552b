"""Command-line front end: ``tselab <command> [flags]``.

Precedence of settings: built-in defaults < ``--config`` file (flat
``key = value`` lines, keys named like the long flags) < command-line flags.
Output goes to ``--out`` or, failing that, ``$TSELAB_OUT_DIR`` or the
current directory. Exit codes: 0 success, 1 invalid input or failed oracle,
2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConvergenceError, TselabError
from .experiments import (
    ExperimentName,
    ExperimentSpec,
    default_spec,
    oracle_results,
    run_experiment,
    write_csv,
    write_json,
)
from .matcore import RngStream, sample_gaussian, sample_uniform_scaled
from .spectral import check_row_stochastic, spectral_report
from .transformer import BlockConfig, Placement, Variant, softmax_attention

OUT_ENV = "TSELAB_OUT_DIR"

COMMANDS = {
    "escalate": ExperimentName.ESCALATION,
    "fixed-input": ExperimentName.FIXED_INPUT,
    "prenorm": ExperimentName.PRENORM,
    "deescalate": ExperimentName.DEESCALATE,
    "eta": ExperimentName.ETA_CONCENTRATION,
    "oracle": ExperimentName.ORACLE_EXPECTED_XI,
}

_HELP = {
    "escalate": "post-norm stack: similarity and xi ratio per block and step",
    "fixed-input": "Monte-Carlo rate at fixed block inputs against the estimates",
    "prenorm": "pre-norm stack: norm growth and similarity",
    "deescalate": "post-norm stack with partial mean removal, per tau",
    "eta": "concentration of eta near a rank-one input",
    "oracle": "Monte-Carlo E[xi] against the closed form",
}

# config-file key -> converter; keys mirror the long flags
_CONFIG_KEYS = {
    "n": int,
    "d": int,
    "heads": int,
    "alpha": float,
    "tau": str,
    "depth": int,
    "trials": int,
    "seed": int,
    "out": str,
    "format": str,
    "placement": str,
    "trajectories": int,
}


class UsageError(TselabError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    spec: dict
    version: str
    seed: int
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(vars(self), indent=1) + "\n", encoding="utf-8")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def read_config(path) -> dict:
    out = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{i}: unknown key {key!r}")
        try:
            out[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{i}: bad value for {key}: {value!r}") from exc
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, help="sequence length")
    p.add_argument("--d", type=int, help="model width")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--alpha", type=float, help="self-attention weight")
    p.add_argument("--tau", help="de-escalation strength; comma list for deescalate")
    p.add_argument("--depth", type=int, help="number of blocks")
    p.add_argument("--trials", type=int, help="independent trials (or draws)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), help="table format (default csv)")
    p.add_argument("--config", help="flat key = value settings file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tselab", description="Token-similarity escalation laboratory.")
    parser.add_argument("--version", action="version", version=f"tselab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        _common(p)
        if name == "deescalate":
            p.add_argument("--placement", choices=[e.value for e in Placement])
        if name == "fixed-input":
            p.add_argument("--trajectories", type=int)
    sp = sub.add_parser("spectral", help="delta, |lambda_2| and gap of one attention matrix")
    sp.add_argument("input", nargs="?", help="CSV file holding an n x n row-stochastic matrix")
    sp.add_argument("--random", action="store_true", help="use a softmax attention matrix instead")
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    return parser


def _settings(args) -> dict:
    merged = read_config(args.config) if getattr(args, "config", None) else {}
    for key in _CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    return merged


def _taus(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in str(raw).split(","))
    except ValueError as exc:
        raise UsageError(f"--tau expects numbers, got {raw!r}") from exc


def build_spec(command: str, s: dict) -> ExperimentSpec:
    name = COMMANDS[command]
    cfg_kw = {}
    for key, field_ in (("n", "n"), ("d", "d"), ("heads", "h"), ("alpha", "alpha"), ("seed", "seed")):
        if key in s:
            cfg_kw[field_] = s[key]
    taus = _taus(s["tau"]) if "tau" in s else None
    extra: dict = {}
    if name is ExperimentName.DEESCALATE:
        cfg_kw["variant"] = Variant.POST_NORM_DEESCALATED
        if "placement" in s:
            cfg_kw["deesc_placement"] = s["placement"]
        if taus:
            extra["taus"] = taus
            cfg_kw["tau"] = taus[0]
    elif taus:
        if len(taus) != 1:
            raise UsageError("only deescalate accepts a list of tau values")
        cfg_kw["tau"] = taus[0]
    if name is ExperimentName.FIXED_INPUT and "trajectories" in s:
        extra["trajectories"] = s["trajectories"]
    if name is ExperimentName.ETA_CONCENTRATION:
        if "n" in s:
            extra["n"] = cfg_kw.pop("n")
        if "d" in s:
            extra["d_values"] = (cfg_kw.pop("d"),)
        cfg_kw.pop("h", None)
    if name is ExperimentName.ORACLE_EXPECTED_XI:
        for key, ek in (("n", "n_values"), ("d", "d_values"), ("h", "heads"), ("alpha", "alphas")):
            if key in cfg_kw:
                extra[ek] = (cfg_kw.pop(key),)
    cfg = BlockConfig(**cfg_kw)
    return default_spec(name, cfg=cfg, depth=s.get("depth", 20), trials=s.get("trials"), **extra)


def _out_dir(s: dict) -> Path:
    return Path(s.get("out") or os.environ.get(OUT_ENV) or ".")


def cmd_run(command: str, args) -> int:
    s = _settings(args)
    spec = build_spec(command, s)
    fmt = s.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise UsageError(f"format must be csv or json, got {fmt!r}")
    out = _out_dir(s)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(spec=spec.to_dict(), version=__version__, seed=spec.cfg.seed, started=_now())
    table = run_experiment(spec)
    path = out / f"{spec.name.value}.{fmt}"
    (write_csv if fmt == "csv" else write_json)(table, path)
    manifest.outputs.append(str(path))
    status = 0
    if spec.name is ExperimentName.ORACLE_EXPECTED_XI:
        results = oracle_results(table)
        failed = [r for r in results if not r[4]]
        for q, mc, se, closed, ok in results:
            print(f"{'pass' if ok else 'FAIL'} {q} mc={mc!r} closed={closed!r} se={se!r}")
        status = 1 if failed else 0
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    print(f"wrote {path}")
    return status


def _random_attention(n: int, d: int, seed: int) -> np.ndarray:
    s = RngStream(seed, 0)
    x = sample_gaussian(s.child("x"), n, d, 1.0)
    scale = 1.0 / math.sqrt(d)
    wq = sample_uniform_scaled(s.child("wq"), d, d, scale)
    wk = sample_uniform_scaled(s.child("wk"), d, d, scale)
    return softmax_attention(x, wq, wk, d).p


def cmd_spectral(args) -> int:
    if args.random == (args.input is not None):
        raise UsageError("give exactly one of an input file or --random")
    if args.random:
        p = _random_attention(args.n, args.d, args.seed)
    else:
        try:
            p = np.loadtxt(args.input, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read {args.input}: {exc}") from exc
    p = check_row_stochastic(p)
    rep = spectral_report(p)
    dev = float(np.max(np.abs(p.sum(axis=1) - 1.0)))
    print(f"n = {p.shape[0]}")
    print(f"row_sum_max_deviation = {dev!r}")
    print("row_stochastic = yes")
    print(f"delta = {rep.delta!r}")
    print(f"lambda2_modulus = {rep.lambda2_modulus!r}")
    print(f"spectral_gap_sym = {rep.spectral_gap_sym!r}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "spectral":
            return cmd_spectral(args)
        return cmd_run(args.command, args)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TselabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
