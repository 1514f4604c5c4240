"""Configuration resolution, artifacts and worker pools shared by the experiments."""

from __future__ import annotations

import copy
import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

EXPERIMENTS = ("portfolio", "kinematics", "timeseries", "random-suite", "custom")
TOP_LEVEL = ("experiment", "seed", "output_dir", "params")


class ConfigError(ValueError):
    """Unknown key, bad value or malformed override."""


def _check_keys(given: dict, reference: dict, where: str) -> None:
    for key, val in given.items():
        if key not in reference:
            raise ConfigError(f"unknown key {where}{key!r}")
        ref = reference[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            _check_keys(val, ref, f"{where}{key}.")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split ``a.b.c=value``; the value is read as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def resolve_config(
    experiment: str,
    defaults: dict,
    file_cfg: dict | None = None,
    overrides: Sequence[str] = (),
    seed: int | None = None,
    output_dir: str | None = None,
) -> dict:
    """Fully resolved configuration.

    Precedence, lowest first: experiment defaults, the config file, ``--set``
    overrides, then the explicit ``seed`` / ``output_dir`` arguments.  Override
    keys not naming a top-level field are taken relative to ``params``.
    """
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    reference = {"experiment": experiment, "seed": 0, "output_dir": f"runs/{experiment}", "params": defaults}
    cfg = copy.deepcopy(reference)
    if file_cfg:
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        _check_keys(file_cfg, reference, "")
        if file_cfg.get("experiment", experiment) != experiment:
            raise ConfigError(f"config file is for experiment {file_cfg['experiment']!r}")
        cfg = _merge(cfg, file_cfg)
    for text in overrides:
        parts, value = parse_override(text)
        if parts[0] not in TOP_LEVEL:
            parts = ["params", *parts]
        node, ref = cfg, reference
        for p in parts[:-1]:
            if not isinstance(ref, dict) or p not in ref or not isinstance(ref[p], dict):
                raise ConfigError(f"unknown key {'.'.join(parts)!r}")
            node, ref = node[p], ref[p]
        if parts[-1] not in ref:
            raise ConfigError(f"unknown key {'.'.join(parts)!r}")
        if isinstance(ref[parts[-1]], dict):
            raise ConfigError(f"{'.'.join(parts)!r} is a section, not a value")
        node[parts[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    if cfg["experiment"] != experiment:
        raise ConfigError("the experiment id cannot be overridden")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    return cfg


@dataclass
class RunArtifact:
    """Output of one experiment run."""

    config: dict
    out_dir: Path
    summary: dict = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def to_jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def prepare_output(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "config.json").open("w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def finish(art: RunArtifact, started: float) -> RunArtifact:
    """Write ``summary.json``; wall time is recorded only here."""
    body = {
        "experiment": art.config["experiment"],
        "seed": art.config["seed"],
        "passed": art.passed,
        "checks": art.checks,
        "results": art.summary,
        "files": sorted(p.name for p in art.files),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    with (art.out_dir / "summary.json").open("w", encoding="utf-8") as fh:
        json.dump(to_jsonable(body), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return art


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """CSV with ``repr`` floats so identical inputs give identical bytes."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def worker_count(jobs: int) -> int:
    """Worker cap from ``ROBUST_DP_THREADS`` (default: CPU count)."""
    raw = os.environ.get("ROBUST_DP_THREADS")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        cap = 1
    return max(1, min(cap, jobs))


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map over a process pool; results do not depend on the worker count."""
    items = list(items)
    workers = worker_count(len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def seed_seq(seed: int, *tags: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *tags])


def rel_err(P, P_ref) -> float:
    return float(np.linalg.norm(np.asarray(P) - P_ref) / np.linalg.norm(P_ref))
