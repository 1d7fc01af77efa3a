"""Batch experiment runner: configuration, per-seed jobs, CSV and manifest output."""
from __future__ import annotations

import csv
import datetime
import functools
import json
import logging
import platform
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from ._util import AuditError, fmt_cell
from .garnet import GarnetSpec, generate_garnet
from .generative import GenerativeModel
from .mdp import (ConvergenceError, Reference, TabularMdp, evaluate_policy_exact, load_mdp, reference_solution,
                  two_state_chain, validate_mdp, value_iteration)
from .prox import check_pairing, d0_bound, parse_geometry, parse_regularizer
from .svmd import run_svmd, run_svmd_sc, sc_schedule, svmd_schedule
from .vmd import run_vmd, vmd_schedule

log = logging.getLogger(__name__)

ALGORITHMS = ("vi", "vmd", "svmd", "svmd_sc")
ORACLE_EPSILON = 1e-9
EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class MdpSource:
    """Either a JSON file or a named generator ("garnet" or "chain").

    With ``per_seed`` a Garnet instance is regenerated for every run seed
    (the run seed replaces ``seed``); otherwise all seeds share one MDP.
    """

    file: str | None = None
    generator: str | None = None
    states: int = 0
    actions: int = 0
    branch: int = 1
    seed: int = 0
    per_seed: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    mdp: MdpSource
    algorithm: str = "vmd"
    geometry: str = "kl"
    regularizer: str = "zero"
    gamma: float | None = None  # overrides the MDP's own discount when set
    epsilon: float = 1e-3
    delta: float = 0.1
    scale: float = 1.0
    seeds: tuple[int, ...] = (0,)
    audit: bool = True
    out: str = "results"
    workers: int = 1
    record_iterations: bool = True

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"field 'algorithm': {self.algorithm!r} is not one of {', '.join(ALGORITHMS)}")
        try:
            geom = parse_geometry(self.geometry)
        except ValueError as exc:
            raise ConfigError(f"field 'geometry': {exc}") from None
        try:
            reg = parse_regularizer(self.regularizer)
        except ValueError as exc:
            raise ConfigError(f"field 'regularizer': {exc}") from None
        try:
            check_pairing(geom, reg)
        except ValueError as exc:
            raise ConfigError(f"fields 'geometry'/'regularizer': {exc}") from None
        if self.algorithm == "svmd_sc" and (reg.mu <= 0 or geom.kind != "kl"):
            raise ConfigError("algorithm 'svmd_sc' needs regularizer negentropy with mu > 0 and geometry kl")
        if not self.epsilon > 0:
            raise ConfigError("field 'epsilon': must be positive")
        if self.algorithm in ("svmd", "svmd_sc"):
            if not self.epsilon < 1:
                raise ConfigError("field 'epsilon': must lie in (0, 1) for the stochastic methods")
            if not 0 < self.delta < 1:
                raise ConfigError("field 'delta': must lie in (0, 1)")
        if not 0 < self.scale <= 1:
            raise ConfigError("field 'scale': must lie in (0, 1]")
        if self.gamma is not None and not 0 < self.gamma < 1:
            raise ConfigError("field 'gamma': must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("field 'seeds': at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("field 'seeds': duplicate seeds")
        if self.workers < 1:
            raise ConfigError("field 'workers': must be at least 1")
        src = self.mdp
        if (src.file is None) == (src.generator is None):
            raise ConfigError("field 'mdp': give exactly one of 'file' or 'generator'")
        if src.generator not in (None, "garnet", "chain"):
            raise ConfigError(f"field 'mdp.generator': unknown generator {src.generator!r}")
        if src.generator == "garnet":
            try:
                GarnetSpec(src.states, src.actions, src.branch, src.seed)
            except ValueError as exc:
                raise ConfigError(f"field 'mdp': {exc}") from None
        if src.per_seed and src.generator != "garnet":
            raise ConfigError("field 'mdp.per_seed': only Garnet instances can be regenerated per seed")


# --------------------------------------------------------------------------- parsing

_FIELD_TYPES = {
    "algorithm": str, "geometry": str, "regularizer": str, "gamma": float, "epsilon": float,
    "delta": float, "scale": float, "seeds": list, "audit": bool, "out": str, "workers": int,
    "record_iterations": bool,
}
_MDP_TYPES = {"file": str, "generator": str, "states": int, "actions": int, "branch": int, "seed": int,
              "per_seed": bool}


def _coerce(value, kind, where):
    if kind is float:
        # YAML 1.1 reads "1e-3" as a string
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return str(value)
    return value


def parse_seeds(value, where="field 'seeds'") -> tuple[int, ...]:
    """Seeds from a list, a single integer, or a string like "0,1,2" or "0-19"."""
    if isinstance(value, int) and not isinstance(value, bool):
        return (value,)
    if isinstance(value, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in value):
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a list of integers")
    out = []
    for part in value.split(","):
        lo, sep, hi = part.strip().partition("-")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise ConfigError(f"{where}: cannot read {part.strip()!r} as a seed or seed range") from None
    return tuple(out)


def _key_lines(node) -> dict[str, int]:
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def _sub_node(node, key):
    for k, v in node.value:
        if k.value == key:
            return v
    return None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse YAML into a flat field dict; errors name the file, line and field."""
    try:
        root = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if doc is None:
        doc, root = {}, None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: the config must be a mapping of fields")
    lines = _key_lines(root)
    fields = {}
    for key, value in doc.items():
        where = f"{source}:{lines.get(key, '?')}: field {key!r}"
        if key == "mdp":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            sub_lines = _key_lines(_sub_node(root, "mdp"))
            mdp = {}
            for sk, sv in value.items():
                swhere = f"{source}:{sub_lines.get(sk, '?')}: field 'mdp.{sk}'"
                if sk not in _MDP_TYPES:
                    raise ConfigError(f"{swhere}: unknown field")
                mdp[sk] = _coerce(sv, _MDP_TYPES[sk], swhere)
            fields["mdp"] = mdp
        elif key in _FIELD_TYPES:
            kind = _FIELD_TYPES[key]
            if key == "seeds":
                fields[key] = parse_seeds(value, where)
            elif value is None and key == "gamma":
                fields[key] = None
            else:
                fields[key] = _coerce(value, kind, where)
        else:
            raise ConfigError(f"{where}: unknown field")
    return fields


def build_config(fields: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Merge with precedence overrides > file fields > defaults, then validate."""
    merged = dict(fields)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    if "mdp" not in merged:
        raise ConfigError("field 'mdp': required")
    mdp = merged.pop("mdp")
    cfg = ExperimentConfig(mdp=MdpSource(**mdp) if isinstance(mdp, dict) else mdp, **merged)
    cfg.validate()
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    fields = parse_config_text(text, str(path))
    try:
        return build_config(fields, overrides)
    except ConfigError as exc:
        raise ConfigError(_locate(str(exc), text, str(path), overrides)) from None


def _locate(message: str, text: str, source: str, overrides: dict | None) -> str:
    """Prefix ``source:line`` when the offending field was set in the file rather than by a flag."""
    m = re.match(r"field '([\w.]+)'", message)
    if m is None:
        return f"{source}: {message}"
    top, _, sub = m.group(1).partition(".")
    if (overrides or {}).get(top) is not None:
        return message
    root = yaml.compose(text)
    lines = _key_lines(root)
    if sub and top in lines:
        lines = _key_lines(_sub_node(root, top)) or lines
        key = sub if sub in lines else None
    else:
        key = top
    line = lines.get(key) if key is not None else None
    return f"{source}:{line}: {message}" if line is not None else f"{source}: {message}"


# --------------------------------------------------------------------------- jobs


def build_mdp(cfg: ExperimentConfig, seed: int | None = None) -> TabularMdp:
    src = cfg.mdp
    if src.file is not None:
        mdp = load_mdp(src.file)
    elif src.generator == "chain":
        mdp = two_state_chain(0.5 if cfg.gamma is None else cfg.gamma)
    else:
        gseed = seed if src.per_seed else src.seed
        mdp = generate_garnet(GarnetSpec(src.states, src.actions, src.branch, gseed))
    if cfg.gamma is not None and mdp.gamma != cfg.gamma:
        mdp = TabularMdp(kernel=mdp.kernel, cost=mdp.cost, gamma=cfg.gamma)
    return mdp


def _schedule_for(cfg, mdp, reg, geom):
    S, A, gamma = mdp.n_states, mdp.n_actions, mdp.gamma
    hbar = reg.hbar(A)
    if cfg.algorithm == "vmd":
        s = vmd_schedule(mdp, reg, geom, cfg.epsilon)
        return s, {"variant": "vmd", "K": s.K, "T": s.T, "eta": s.eta[:, 0].tolist(), "u": s.u.tolist(),
                   "D0": s.D0, "epsilon": s.epsilon}
    if cfg.algorithm == "svmd":
        s = svmd_schedule(S, A, gamma, hbar, geom, cfg.epsilon, cfg.delta, cfg.scale)
        return s, s.to_dict()
    if cfg.algorithm == "svmd_sc":
        D0 = d0_bound(geom, A) if A > 1 else 1.0
        s = sc_schedule(S, A, gamma, hbar, reg.mu, D0, cfg.epsilon, cfg.delta, cfg.scale)
        return s, s.to_dict()
    return None, {"variant": "vi", "epsilon": cfg.epsilon}


VI_COLUMNS = ("iter", "sup_gap_value", "sup_gap_policy")


def _write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt_cell(row.get(c)) for c in columns])


def run_seed(cfg: ExperimentConfig, seed: int, reference: Reference | None = None) -> dict:
    """Run one seed, write its CSV and return a summary dict."""
    mdp = build_mdp(cfg, seed)
    problems = validate_mdp(mdp)
    if problems:
        raise ConfigError("invalid MDP: " + "; ".join(problems))
    reg = parse_regularizer(cfg.regularizer)
    geom = parse_geometry(cfg.geometry)
    ref = reference if reference is not None else reference_solution(mdp, reg, ORACLE_EPSILON)
    path = Path(cfg.out) / f"seed_{seed}.csv"
    schedule, schedule_doc = _schedule_for(cfg, mdp, reg, geom)
    summary = {"seed": seed, "violations": [], "samples_total": 0, "schedule": schedule_doc}
    try:
        if cfg.algorithm == "vi":
            v, pi, k = value_iteration(mdp, reg, cfg.epsilon)
            row = {"iter": k, "sup_gap_value": float(np.max(np.abs(v - ref.v_star))),
                   "sup_gap_policy": float(np.max(np.abs(evaluate_policy_exact(mdp, reg, pi) - ref.v_star)))}
            _write_rows(path, VI_COLUMNS, [row])
            summary.update(final_gap_policy=row["sup_gap_policy"], final_gap_value=row["sup_gap_value"])
        elif cfg.algorithm == "vmd":
            _, _, trace = run_vmd(mdp, reg, geom, schedule, audit=cfg.audit, v_star=ref.v_star)
            trace.write_csv(path)
            summary["violations"] = list(trace.violations)
            last = trace.epochs[-1]
            summary.update(final_gap_policy=last["sup_gap_policy"], final_gap_value=last["sup_gap_value"],
                           epoch_gaps=[e["sup_gap_policy"] for e in trace.epochs])
        else:
            model = GenerativeModel(mdp, master_seed=seed)
            runner = run_svmd if cfg.algorithm == "svmd" else run_svmd_sc
            _, record = runner(model, reg, geom, schedule, audit=cfg.audit, reference=ref,
                               record_iterations=cfg.record_iterations)
            record.write_csv(path)
            summary["violations"] = list(record.violations)
            summary.update(final_gap_policy=record.final_gap_policy,
                           final_gap_value=record.epochs[-1]["sup_gap_value"],
                           final_bregman=record.final_bregman, samples_total=record.samples_total,
                           expected_samples=record.expected_samples, epoch_gaps=record.epoch_gaps)
    except (AuditError, ConvergenceError) as exc:
        summary["violations"].append(str(exc))
    return summary


# --------------------------------------------------------------------------- aggregation

AGGREGATE_COLUMNS = ("metric", "n", "median", "q10", "q25", "q75", "q90", "min", "max")
QUANTILES = (0.1, 0.25, 0.75, 0.9)
_FINAL_METRICS = ("sup_gap_policy", "sup_gap_value", "bregman_to_opt", "samples_total")


def final_row_metrics(csv_path) -> dict[str, float]:
    """Final-row metrics of one per-seed CSV (the last epoch's summary)."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    last = rows[-1] if rows else {}
    return {m: float(last[m]) for m in _FINAL_METRICS if last.get(m) not in (None, "")}


def aggregate(per_seed: list[dict[str, float]]) -> list[dict]:
    out = []
    names = [m for m in _FINAL_METRICS if any(m in d for d in per_seed)]
    for name in names:
        x = np.array([d[name] for d in per_seed if name in d], dtype=float)
        q = np.quantile(x, QUANTILES)
        out.append({"metric": f"final_{name}", "n": len(x), "median": float(np.median(x)),
                    "q10": float(q[0]), "q25": float(q[1]), "q75": float(q[2]), "q90": float(q[3]),
                    "min": float(x.min()), "max": float(x.max())})
    return out


def write_aggregate(rows: list[dict], path) -> None:
    _write_rows(path, AGGREGATE_COLUMNS, rows)


# --------------------------------------------------------------------------- driver


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run every seed, write per-seed CSVs, aggregate.csv, schedule.json and manifest.json.

    Returns 0 when no audited invariant failed and 1 otherwise.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reference = None
    if not cfg.mdp.per_seed:
        mdp = build_mdp(cfg)
        problems = validate_mdp(mdp)
        if problems:
            raise ConfigError("invalid MDP: " + "; ".join(problems))
        reference = reference_solution(mdp, parse_regularizer(cfg.regularizer), ORACLE_EPSILON)
    job = functools.partial(run_seed, cfg, reference=reference)
    if cfg.workers == 1:
        summaries = [job(seed) for seed in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            summaries = list(pool.map(job, cfg.seeds))
    for s in summaries:
        log.info("seed %d: final gap %.3e, %d violations", s["seed"], s.get("final_gap_policy", float("nan")),
                 len(s["violations"]))
    per_seed = [final_row_metrics(out / f"seed_{s['seed']}.csv") for s in summaries
                if (out / f"seed_{s['seed']}.csv").exists()]
    write_aggregate(aggregate(per_seed), out / "aggregate.csv")
    with open(out / "schedule.json", "w") as fh:
        json.dump(summaries[0]["schedule"], fh, indent=2, sort_keys=True)
    failed = any(s["violations"] for s in summaries)
    manifest = {
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "config": _config_doc(cfg),
        "exit_status": EXIT_INVARIANT if failed else EXIT_OK,
        "seeds": [{k: v for k, v in s.items() if k != "schedule"} for s in summaries],
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=float)
    return EXIT_INVARIANT if failed else EXIT_OK


def _config_doc(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc["seeds"] = list(cfg.seeds)
    return doc


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    new = replace(cfg, **kw)
    new.validate()
    return new
