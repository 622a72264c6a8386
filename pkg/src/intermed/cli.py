"""Batch command-line front end: ``intermed run config.json``.

The config is one JSON document. Every run needs an integer ``seed``; all
randomness derives from it. Outputs go to ``output`` (a directory,
relative paths resolve against the config file) and carry the config
hash and library version. Exit status: 0 success, 1 estimation failure,
2 configuration or data error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from pathlib import Path

from . import __version__
from .dataset import VariableSchema, load_csv, standardize_column
from .duplication import weight_diagnostics
from .effects import EffectModelSpec, Level, permutation_sensitivity
from .errors import ConfigError, DataError, MediationError, SchemaError
from .estimators import METHODS, EstimatorConfig, estimate, iw_duplicated
from .inference import bootstrap
from .rng import KeyedStream
from .simharness import StudyConfig, run_study, write_table

COMMANDS = ("analyze", "bootstrap", "sensitivity", "simulate", "diagnose-weights")
EXIT_OK, EXIT_ESTIMATION, EXIT_CONFIG = 0, 1, 2


class ConfigFileError(ConfigError):
    pass


def _req(section: dict, key: str, prefix: str):
    if not isinstance(section, dict) or key not in section:
        raise ConfigError(f"missing required field {prefix}{key}", f"{prefix}{key}")
    return section[key]


def _section(cfg: dict, key: str, required: bool = True) -> dict:
    if key not in cfg:
        if required:
            raise ConfigError(f"missing required field {key}", key)
        return {}
    val = cfg[key]
    if not isinstance(val, dict):
        raise ConfigError(f"field {key} must be an object", key)
    return val


def _int(val, name: str) -> int:
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"field {name} must be an integer", name)
    return val


def parse_schema(data_cfg: dict) -> VariableSchema:
    sch = _req(data_cfg, "schema", "data.")
    p = "data.schema."
    try:
        return VariableSchema(
            outcome_name=_req(sch, "outcome", p),
            exposure_name=_req(sch, "exposure", p),
            mediator_names=tuple(_req(sch, "mediators", p)),
            outcome_kind=sch.get("outcome_kind", "continuous"),
            mediator_kinds=sch.get("mediator_kinds"),
            covariate_names=tuple(sch.get("covariates", ())),
            moderator_names=tuple(sch.get("moderators", ())),
        )
    except SchemaError as e:
        raise ConfigError(str(e), "data.schema") from e


def parse_effect_spec(cfg: dict, schema: VariableSchema) -> EffectModelSpec:
    em = _section(cfg, "effect_model", required=False)
    return EffectModelSpec(
        link=em.get("link", "logit" if schema.outcome_kind == "binary" else "identity"),
        t=schema.t,
        moderators=tuple(em.get("moderators", schema.moderator_names)),
        confounder_mains=tuple(em.get("confounders", schema.covariate_names)),
        include_j_by_covariate=bool(em.get("j_by_covariate", False)),
        alt_decomposition=bool(em.get("alt_decomposition", False)),
    )


def parse_levels(cfg: dict, spec: EffectModelSpec):
    raw = cfg.get("levels")
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("levels must map a label suffix to moderator values", "levels")
    out = []
    for label, vals in raw.items():
        if not isinstance(vals, dict) or any(k not in spec.moderators for k in vals):
            raise ConfigError(f"levels[{label!r}] must set declared moderators only",
                              "levels")
        out.append(Level(label, {k: float(v) for k, v in vals.items()}))
    return tuple(out)


def _outcome_plan(raw):
    if isinstance(raw, dict):
        return {int(k): v for k, v in raw.items()}
    return raw


def parse_estimator(cfg: dict, schema: VariableSchema, method: str, seed: int,
                    force: bool) -> EstimatorConfig:
    est = _section(cfg, "estimator")
    spec = parse_effect_spec(cfg, schema)
    return EstimatorConfig(
        method=method,
        effect_spec=spec,
        propensity_terms=est.get("propensity_terms"),
        chain_order=tuple(est["chain_order"]) if est.get("chain_order") else None,
        chain_term_plan=est.get("chain_term_plan"),
        marginal_term_plan=est.get("marginal_term_plan"),
        outcome_term_plan=_outcome_plan(est.get("outcome_term_plan")),
        draws=_int(est.get("draws", 100), "estimator.draws"),
        marginal_method=est.get("marginal_method", "auto"),
        marginal_draws=_int(est.get("marginal_draws", 2000), "estimator.marginal_draws"),
        truncation=est.get("truncation"),
        force=force or bool(est.get("force", False)),
        separation=est.get("separation", "raise"),
        aliased=est.get("aliased", "error"),
        seed=seed,
        levels=parse_levels(cfg, spec),
    )


def _methods(cfg: dict) -> list:
    m = _req(_section(cfg, "estimator"), "method", "estimator.")
    methods = [m] if isinstance(m, str) else list(m)
    for x in methods:
        if x not in METHODS:
            raise ConfigError(f"unknown method {x!r}", "estimator.method")
    return methods


def load_config(path) -> tuple:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigFileError(f"cannot read config: {e}", "config") from e
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"config is not valid JSON: {e}", "config") from e
    if not isinstance(cfg, dict):
        raise ConfigFileError("config must be a JSON object", "config")
    command = _req(cfg, "command", "")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}", "command")
    _int(_req(cfg, "seed", ""), "seed")
    _req(cfg, "output", "")
    return cfg, hashlib.sha256(raw).hexdigest()


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _load_data(cfg: dict, base: Path):
    d = _section(cfg, "data")
    schema = parse_schema(d)
    try:
        data = load_csv(_resolve(base, _req(d, "path", "data.")), schema)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    for name in d.get("standardize", ()):
        data = standardize_column(data, name)
    return data


def _clean(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


class Writer:
    """Output files stamped with the config hash and library version."""

    def __init__(self, outdir: Path, config_hash: str):
        self.outdir = outdir
        self.provenance = {"config_sha256": config_hash, "version": __version__}
        outdir.mkdir(parents=True, exist_ok=True)
        self.written = []

    @property
    def stamp(self) -> str:
        return f"config_sha256={self.provenance['config_sha256']} version={__version__}"

    def json(self, name: str, payload: dict) -> Path:
        path = self.outdir / name
        body = {"provenance": self.provenance, **payload}
        path.write_text(json.dumps(_clean(body), indent=2, sort_keys=True) + "\n")
        self.written.append(str(path))
        return path

    def csv(self, name: str, header, rows) -> Path:
        path = self.outdir / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.stamp}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        self.written.append(str(path))
        return path


def _cell(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return v


def _estimates_payload(res, cfg: EstimatorConfig) -> dict:
    coefs = res.params.as_dict()
    eff_cols = cfg.effect_spec.effect_columns()
    return {
        "method": cfg.method,
        "coefficients": coefs,
        "effect_parameters": {k: coefs[k] for k in eff_cols},
        "effects": res.derived,
        "diagnostics": res.diagnostics,
    }


def cmd_analyze(cfg, base, out: Writer, seed, force, threads) -> None:
    data = _load_data(cfg, base)
    results = {}
    rows = []
    for m in _methods(cfg):
        ecfg = parse_estimator(cfg, data.schema, m, seed, force)
        res = estimate(data, ecfg, KeyedStream(seed, ("estimate",)))
        results[m] = _estimates_payload(res, ecfg)
        rows += [(m, k, v) for k, v in res.quantities().items()]
    out.json("estimates.json", {"results": results})
    out.csv("estimates.csv", ("method", "quantity", "value"), rows)


def cmd_bootstrap(cfg, base, out: Writer, seed, force, threads) -> None:
    data = _load_data(cfg, base)
    bs = _section(cfg, "bootstrap")
    B = _int(_req(bs, "B", "bootstrap."), "bootstrap.B")
    level = float(bs.get("level", 0.95))
    reports = {}
    rows = []
    for m in _methods(cfg):
        ecfg = parse_estimator(cfg, data.schema, m, seed, force)
        rep = bootstrap(data, ecfg, B, level=level, seed=seed, threads=threads)
        reports[m] = rep.to_dict()
        rows += [(m, nm, rep.point[nm], rep.ci[nm][0], rep.ci[nm][1]) for nm in rep.names]
    out.json("bootstrap.json", {"results": reports})
    out.csv("bootstrap.csv", ("method", "quantity", "point", "lower", "upper"), rows)


def cmd_sensitivity(cfg, base, out: Writer, seed, force, threads) -> None:
    data = _load_data(cfg, base)
    bs = _section(cfg, "bootstrap", required=False)
    B = _int(bs.get("B", 0), "bootstrap.B")
    level = float(bs.get("level", 0.95))
    payload = {}
    rows = []
    for m in _methods(cfg):
        ecfg = parse_estimator(cfg, data.schema, m, seed, force)
        res = permutation_sensitivity(data, ecfg, B=B, level=level, seed=seed, threads=threads)
        payload[m] = {
            "table": res["table"],
            "runs": [{"order": r["order"], "effects": r["estimates"].derived, "ci": r["ci"]}
                     for r in res["runs"]],
        }
        for r in res["table"]:
            rows.append((m, r["effect"], r["min"], r["max"], r.get("lower_min", ""),
                         r.get("lower_max", ""), r.get("upper_min", ""), r.get("upper_max", "")))
    out.json("sensitivity.json", {"results": payload})
    out.csv("sensitivity.csv", ("method", "effect", "min", "max", "lower_min", "lower_max",
                                "upper_min", "upper_max"), rows)


def cmd_simulate(cfg, base, out: Writer, seed, force, threads) -> None:
    sim = _section(cfg, "simulate")
    p = "simulate."
    try:
        sc = StudyConfig(
            study=_int(_req(sim, "study", p), "simulate.study"),
            n=_int(_req(sim, "n", p), "simulate.n"),
            params=tuple(_req(sim, "params", p)),
            replicates=_int(sim.get("replicates", 200), "simulate.replicates"),
            seed=seed,
            estimators=tuple(sim.get("estimators", ("iw", "mc"))),
            bootstrap=_int(sim.get("bootstrap", 0), "simulate.bootstrap"),
            level=float(sim.get("level", 0.95)),
            draws=_int(sim.get("draws", 100), "simulate.draws"),
            truth_n=_int(sim.get("truth_n", 50000), "simulate.truth_n"),
            threads=threads,
            weights=bool(sim.get("weights", False)),
            paper_scale=bool(sim.get("paper_scale", False)),
            tolerant=bool(sim.get("tolerant", True)),
            l2_prob=float(sim.get("l2_prob", 0.1)),
        )
    except ConfigError as e:
        raise ConfigError(str(e), f"simulate.{e.field}" if e.field else "simulate") from e
    res = run_study(sc, sim.get("effects"))
    write_table(res.rows, out.outdir / "study.csv", out.stamp)
    out.written.append(str(out.outdir / "study.csv"))
    payload = {"truth": res.truth, "rows": res.rows, "custom": sc.custom,
               "replicates": sc.replicates}
    if sc.weights:
        payload["weight_sd"] = res.weight_sd()
        payload["log10_weight_sd"] = res.weight_sd(log10=True)
    out.json("study.json", payload)


def cmd_diagnose(cfg, base, out: Writer, seed, force, threads) -> None:
    data = _load_data(cfg, base)
    diag = _section(cfg, "diagnose", required=False)
    ecfg = parse_estimator(cfg, data.schema, "iw", seed, force)
    dup = iw_duplicated(data, ecfg, KeyedStream(seed, ("estimate",)))
    summ = weight_diagnostics(dup, threshold=float(diag.get("threshold", 10.0)),
                              bins=_int(diag.get("bins", 40), "diagnose.bins"))
    cols = ("position", "mean", "sd", "sd_all", "max", "n_positive", "n_above", "log10_sd")
    out.csv("weights_summary.csv", cols, [[p[c] for c in cols] for p in summ["positions"]])
    edges = summ["bin_edges"]
    hist = []
    for p in summ["positions"]:
        for b, cnt in enumerate(p["histogram"]):
            hist.append((p["position"], edges[b], edges[b + 1], cnt))
    out.csv("weights_histogram.csv", ("position", "log10_lo", "log10_hi", "count"), hist)
    out.json("weights.json", summ)
    if diag.get("export_duplicated"):
        dup.to_csv(out.outdir / "duplicated.csv", out.stamp)
        out.written.append(str(out.outdir / "duplicated.csv"))


HANDLERS = {
    "analyze": cmd_analyze,
    "bootstrap": cmd_bootstrap,
    "sensitivity": cmd_sensitivity,
    "simulate": cmd_simulate,
    "diagnose-weights": cmd_diagnose,
}


def _error(kind: str, message: str, field=None) -> str:
    return json.dumps({"error": {"type": kind, "message": message, "field": field}},
                      sort_keys=True)


def run(config_path, force: bool = False, threads: int | None = None,
        stderr=None) -> int:
    stderr = stderr or sys.stderr
    try:
        cfg, digest = load_config(config_path)
        base = Path(config_path).resolve().parent
        if threads is None:
            threads = _int(cfg.get("threads", os.cpu_count() or 1), "threads")
        if threads < 1:
            raise ConfigError("threads must be positive", "threads")
        out = Writer(_resolve(base, str(cfg["output"])), digest)
        HANDLERS[cfg["command"]](cfg, base, out, int(cfg["seed"]), force, threads)
    except ConfigError as e:
        print(_error(type(e).__name__, str(e), e.field), file=stderr)
        return EXIT_CONFIG
    except (SchemaError, DataError) as e:
        print(_error(type(e).__name__, str(e)), file=stderr)
        return EXIT_CONFIG
    except MediationError as e:
        print(_error(type(e).__name__, str(e)), file=stderr)
        return EXIT_ESTIMATION
    except (OSError, ValueError, TypeError, KeyError) as e:
        print(_error(type(e).__name__, str(e)), file=stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="intermed",
                                 description="Interventional effects through multiple mediators.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="execute a JSON run configuration")
    r.add_argument("config")
    r.add_argument("--force", action="store_true",
                   help="proceed despite the unstable-weights check")
    r.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: config value, else all cores)")
    args = ap.parse_args(argv)
    return run(args.config, force=args.force, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
