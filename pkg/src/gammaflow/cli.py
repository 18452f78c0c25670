"""
Batch runner: ``gammaflow CONFIG [--output-dir DIR] [--workers N] [--seed-override S]``.

Config grammar (INI sections, ``key = value``, ``;`` or ``#`` comments)::

    [experiment]
    id = heat_minimality        ; required, see --list
    seed = 0
    workers = 1
    output_dir = results/heat   ; relative to the config file

    [grid]                      ; cells, extent, t_final, dt, levels
    cells = 512, 512
    extent = -1, 1; -1, 1       ; lo, hi per axis, axes separated by ';'

    [sweep]
    eps = 0.25, 0.125           ; strictly decreasing

    [tolerances]                ; positive reals, keys depend on the experiment
    [params]                    ; experiment-specific keys

Only keys known to the chosen experiment are accepted.  Exit status: 0 all
assertions pass, 2 an assertion failed, 3 a solver failed, 4 the config is
invalid.
"""

from __future__ import annotations

import argparse
import configparser
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import experiments as ex
from .flows import FlowSolverError

EXIT_OK, EXIT_ASSERTION, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
SECTIONS = ("experiment", "grid", "sweep", "tolerances", "params")
EXPERIMENT_KEYS = {"id": str, "seed": int, "workers": int, "output_dir": str}


class ConfigError(ValueError):
    def __init__(self, message: str, line=None, path=None):
        loc = f"{path or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{loc}: {message}")
        self.line = line


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    workers: int = 1
    output_dir: Path = None
    params: dict = field(default_factory=dict)
    source: Path = None

    def resolved(self) -> dict:
        return {**self.params, "seed": self.seed}


def _key_lines(text: str) -> dict:
    """``(section, key) -> line number`` by scanning the raw text."""
    where, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), n)
            continue
        m = re.match(r"^([^=:;#\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def _convert(raw: str, default):
    """Parse ``raw`` with the type of ``default``."""
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str):
        return raw
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            axes = [a for a in raw.split(";") if a.strip()]
            out = tuple(tuple(float(v) for v in a.split(",")) for a in axes)
            if any(len(a) != 2 or not a[0] < a[1] for a in out):
                raise ValueError("each axis needs 'lo, hi' with lo < hi")
            return out
        items = [v for v in raw.split(",") if v.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(v) for v in items)
    raise ValueError(f"unsupported value {raw!r}")


def parse_config(path) -> ExperimentConfig:
    """Read and validate a config file; raises :class:`ConfigError` with line numbers."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any section", exc.lineno, path) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(exc.message.split(": ", 1)[-1] if hasattr(exc, "message") else str(exc),
                          getattr(exc, "lineno", None), path) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line, path) from None
    lines = _key_lines(text)

    def err(msg, section, key=None):
        return ConfigError(msg, lines.get((section, key)) or lines.get((section, None)), path)

    for sec in cp.sections():
        if sec.lower() not in SECTIONS:
            raise err(f"unknown section [{sec}]", sec.lower())
    if not cp.has_option("experiment", "id"):
        raise ConfigError("missing [experiment] id", lines.get(("experiment", None)), path)
    exp_id = cp.get("experiment", "id").strip()
    if exp_id not in ex.EXPERIMENTS:
        raise err(f"unknown experiment id {exp_id!r}; known: {', '.join(ex.EXPERIMENTS)}", "experiment", "id")
    exp = ex.EXPERIMENTS[exp_id]

    cfg = ExperimentConfig(exp_id, source=path)
    for key, raw in cp.items("experiment") if cp.has_section("experiment") else []:
        if key not in EXPERIMENT_KEYS:
            raise err(f"unknown key {key!r} in [experiment]", "experiment", key)
        try:
            val = EXPERIMENT_KEYS[key](raw.strip())
        except ValueError:
            raise err(f"invalid value {raw!r} for {key}", "experiment", key) from None
        if key == "workers" and val < 1:
            raise err("workers must be >= 1", "experiment", key)
        if key == "output_dir":
            val = (path.parent / val).resolve()
        if key != "id":
            setattr(cfg, key, val)

    params = {}
    for sec in SECTIONS[1:]:
        defaults = exp.defaults.get(sec, {})
        params.update(defaults)
        if not cp.has_section(sec):
            continue
        for key, raw in cp.items(sec):
            if key not in defaults:
                raise err(f"unknown key {key!r} in [{sec}] for experiment {exp_id}", sec, key)
            try:
                val = _convert(raw, defaults[key])
            except ValueError as exc:
                raise err(f"invalid value for {key}: {exc}", sec, key) from None
            if sec == "tolerances" and not (val > 0 and math.isfinite(val)):
                raise err(f"tolerance {key} must be positive", sec, key)
            if key == "eps":
                if not val or any(e <= 0 for e in val):
                    raise err("eps values must be positive", sec, key)
                if any(b >= a for a, b in zip(val, val[1:])):
                    raise err("eps list must be strictly decreasing", sec, key)
            if key in ("cells", "levels", "refine_cells") and any(v < 1 for v in (val if isinstance(val, tuple) else (val,))):
                raise err(f"{key} must be positive", sec, key)
            params[key] = val
    if "cells" in params and "extent" in params:
        if len(params["extent"]) not in (1, len(params["cells"])):
            raise err("extent needs one 'lo, hi' pair per axis", "grid", "extent")
    cfg.params = params
    if cfg.output_dir is None:
        cfg.output_dir = (path.parent / "results" / exp_id).resolve()
    return cfg


def run(config_path, output_dir=None, workers=None, seed_override=None, stream=None) -> int:
    """Run one experiment and return its exit status."""
    stream = sys.stdout if stream is None else stream
    try:
        cfg = parse_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if seed_override is not None:
        cfg.seed = int(seed_override)
    if workers is not None:
        if workers < 1:
            print("config error: --workers must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        cfg.workers = workers
    out = ex.ArtifactWriter(Path(output_dir) if output_dir else cfg.output_dir)
    exp = ex.EXPERIMENTS[cfg.experiment]
    try:
        result = exp.run(cfg.resolved(), out, cfg.workers)
    except (FlowSolverError, FloatingPointError, ArithmeticError) as exc:
        result = ex.ExperimentResult(cfg.experiment, solver_failures=[f"{type(exc).__name__}: {exc}"])
    except ValueError as exc:
        # parameters that parse but are rejected by the numerics
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.json("config_resolved.json", {"experiment": cfg.experiment, "seed": cfg.seed, "workers": cfg.workers,
                                      "params": cfg.params})
    report = result.report()
    out.text("report.txt", report)
    out.write_manifest()
    stream.write(report)
    if result.solver_failures:
        return EXIT_SOLVER
    return EXIT_OK if result.passed else EXIT_ASSERTION


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gammaflow", description="Run a gradient-flow experiment from a config file.")
    ap.add_argument("config", nargs="?", help="experiment config file")
    ap.add_argument("--output-dir", help="directory for artifacts (overrides the config)")
    ap.add_argument("--workers", type=int, help="worker threads for sweep members and slack evaluation")
    ap.add_argument("--seed-override", type=int, help="replace the config seed")
    ap.add_argument("--list", action="store_true", help="print the experiment catalog and exit")
    args = ap.parse_args(argv)
    if args.list:
        sys.stdout.write(ex.list_experiments())
        return EXIT_OK
    if not args.config:
        ap.print_usage(sys.stderr)
        print("gammaflow: error: a config path is required unless --list is given", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.config, args.output_dir, args.workers, args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
