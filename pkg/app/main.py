# app/main.py
"""
CLI del laboratorio MLS: muestreo, ajuste y evaluación MLS, experimentos de
tasas, proyección Manifold-MLS, reportes y calibración.
Incluye logging diario con retención de 60 días y trazabilidad de cada corrida.

Uso:
    python -m app.main sample --n 10 --seed 7 --out out/sample
    python -m app.main rates --target fill --set lab.trials=5
    python -m app.main mmls --samples s.csv --probes p.csv --d 1 --degree 2
"""

import argparse
import logging
import os
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from app import __version__
from app.modules import reporting
from app.modules.config import SCHEMA, RunConfig, load_config, parse_assignments
from app.modules.errors import ArgumentError, ConfigError, IllConditionedError, InsufficientDataError, MlsLabError
from app.modules.geometry import MultiIndex, PointCloud
from app.modules.mls_engine import DifferentialOperator, local_fit, mls_eval_many
from app.modules.mmls import mmls_rate_experiment, reconstruct_manifold
from app.modules.sampling import derive_stream, experiment_id, sample_iid, sample_manifold
from app.modules.stochastic_lab import (
    NeighborCountReport,
    RateReport,
    calibrate,
    default_aggregation,
    named_function,
    run_experiment,
    summarize,
)
from app.modules.trazabilidad import list_recent, log_exec, prune_old_records

logger = logging.getLogger("mlslab")

Artifacts = List[Path]


# --- Logging (rotación diaria + stdout) ---
def setup_logging(level: int = logging.INFO) -> logging.Logger:
    """Instala los handlers una sola vez (idempotente)."""
    log_dir = Path(os.getenv("LOG_DIR", "logs"))
    log_dir.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s - %(message)s", "%Y-%m-%d %H:%M:%S")
    logger.setLevel(level)
    if not any(isinstance(h, TimedRotatingFileHandler) for h in logger.handlers):
        file_handler = TimedRotatingFileHandler(filename=log_dir / "mlslab.log", when="midnight", interval=1,
                                                backupCount=60, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        sh = logging.StreamHandler(sys.stdout)
        sh.setFormatter(formatter)
        logger.addHandler(sh)
    return logger


# ============================================================================
# Subcomandos
# ============================================================================
def _out(cfg: RunConfig) -> Path:
    return Path(cfg["run.output_dir"])


def _require(cfg: RunConfig, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(key, f"required by '{cfg.command}'")
    return cfg[key]


def _load_model(cfg: RunConfig):
    points, _ = reporting.read_points_csv(_require(cfg, "io.points"))
    values = reporting.read_values_csv(_require(cfg, "io.values"))
    cloud = PointCloud(points, cfg.domain())
    return cfg.model(cloud, values)


def _queries(cfg: RunConfig, model) -> np.ndarray:
    if cfg["io.queries"]:
        return reporting.read_points_csv(cfg["io.queries"])[0]
    return np.array(model.cloud.points)


def cmd_sample(cfg: RunConfig) -> Tuple[Artifacts, Dict]:
    """Muestra i.i.d. del dominio (más valores f) o de una variedad de referencia."""
    n, seed = cfg["sampling.n"], cfg["run.seed"]
    stream = derive_stream(seed, experiment_id("sample"), n, 0)
    out = _out(cfg)
    manifold = cfg.manifold("sampling")
    if manifold is not None:
        cloud = sample_manifold(manifold, n, stream)
        return [reporting.write_points_csv(out / "points.csv", cloud.points, cloud.parameters)], {"manifold": manifold.kind}
    cloud = sample_iid(cfg.density(), cfg.domain(), n, stream)
    f = named_function(cfg["lab.function"])
    arts = [
        reporting.write_points_csv(out / "points.csv", cloud.points),
        reporting.write_values_csv(out / "values.csv", f(cloud.points)),
    ]
    return arts, {"n": n}


def cmd_fit(cfg: RunConfig) -> Tuple[Artifacts, Dict]:
    """Diagnóstico del ajuste local en cada consulta: λ_min, vecinos, ridge, falla."""
    model = _load_model(cfg)
    queries = _queries(cfg, model)
    rows, failures = [], 0
    for x in queries:
        try:
            fit = local_fit(model, x)
            value = float(fit.shape_values @ model.values[fit.neighbor_indices])
            rows.append(list(x) + [value, fit.lambda_min, fit.neighbor_indices.size, fit.ridge_used, ""])
        except (InsufficientDataError, IllConditionedError) as e:
            failures += 1
            rows.append(list(x) + [np.nan, getattr(e, "lambda_min", np.nan), getattr(e, "neighbor_count", 0), False, str(e)])
    header = [f"x{j}" for j in range(model.dim)] + ["value", "lambda_min", "neighbors", "ridge_used", "failure"]
    art = reporting.write_table(_out(cfg) / "fit.csv", header, rows)
    return [art], {"h": model.h, "basis_size": model.basis_size, "failures": failures, "queries": len(queries)}


def _operator(cfg: RunConfig, d: int) -> DifferentialOperator:
    spec = cfg["io.alpha"].strip()
    try:
        if not spec:
            return DifferentialOperator.identity(d)
        if ":" not in spec and ";" not in spec and spec[0].isdigit():
            return DifferentialOperator(((MultiIndex.parse(spec), 1.0),))
        return DifferentialOperator.parse(spec, d)
    except MlsLabError as e:
        raise ConfigError("io.alpha", str(e)) from None


def cmd_eval(cfg: RunConfig) -> Tuple[Artifacts, Dict]:
    """s^MLS (columna value) o Q s^MLS (columna d_alpha) en las consultas."""
    model = _load_model(cfg)
    queries = _queries(cfg, model)
    Q = _operator(cfg, model.dim)
    values, failures = mls_eval_many(model, queries, Q)
    column = "value" if cfg["io.alpha"].strip() in ("", "id", "identity") else "d_alpha"
    header = [f"x{j}" for j in range(model.dim)] + [column]
    rows = [list(q) + [v] for q, v in zip(queries, values)]
    art = reporting.write_table(_out(cfg) / "eval.csv", header, rows)
    return [art], {"operator": str(Q), "failures": len(failures), "queries": len(queries)}


def _emit_rate(cfg: RunConfig, report: RateReport) -> Artifacts:
    out = _out(cfg)
    arts = [
        reporting.write_raw_csv(out / "raw.csv", report.target, report.records),
        reporting.write_summary_csv(out / "summary.csv", report),
    ]
    if cfg["lab.plot"]:
        try:
            arts.append(reporting.emit_plot(report, out / "plot.svg"))
        except ArgumentError as e:
            logger.warning("[cli] plot skipped: %s", e)
    return arts


def _rate_results(report: RateReport) -> Dict:
    return {
        "target": report.target,
        "aggregation": report.aggregation,
        "x_axis": report.x_axis,
        "slope": report.slope,
        "intercept": report.intercept,
        "stderr": report.stderr,
        "residual_max": report.residual_max,
        "normalized": {str(k): v for k, v in report.normalized.items()},
        "auxiliary": {k: list(v) for k, v in report.auxiliary.items()},
        "checks": report.checks,
        "failures": report.failures,
        "total_fits": report.total_fits,
    }


def cmd_rates(cfg: RunConfig) -> Tuple[Artifacts, Dict]:
    plan = cfg.plan()
    result = run_experiment(plan)
    if isinstance(result, NeighborCountReport):
        report = summarize("neighbor-count", result.records, "median", "n", plan.rounding_floor)
        report.checks = result.checks
        extra = _rate_results(report)
        extra.update({
            "gamma_window": [result.gamma_low, result.gamma_high],
            "expected": {f"{n}:{k}": v for (n, k), v in result.expected.items()},
            "mean_counts": {f"{n}:{k}": v for (n, k), v in result.mean_counts.items()},
            "probes": result.probes,
        })
    else:
        report = result
        extra = _rate_results(report)
    return _emit_rate(cfg, report), extra


def cmd_mmls(cfg: RunConfig) -> Tuple[Artifacts, Dict]:
    """
    Con io.points: proyecta io.probes (o las propias muestras) y escribe
    projected.csv + diagnostics.jsonl. Sin io.points: experimento de tasa sobre mmls.manifold.
    """
    out = _out(cfg)
    if cfg["io.points"]:
        samples = PointCloud(reporting.read_points_csv(cfg["io.points"])[0])
        probes = PointCloud(reporting.read_points_csv(cfg["io.probes"])[0]) if cfg["io.probes"] else samples
        rec = reconstruct_manifold(samples, probes, cfg.mmls_config())
        arts = [
            reporting.write_points_csv(out / "projected.csv", rec.cloud.points),
            reporting.write_jsonl(out / "diagnostics.jsonl", (
                {"probe": d.index, "iterations": d.iterations, "residual": d.residual, "failure": d.failure}
                for d in rec.diagnostics
            )),
        ]
        return arts, {"projected": len(rec.cloud), "failures": rec.failures}
    manifold = cfg.manifold("mmls")
    if manifold is None:
        raise ConfigError("io.points", "mmls needs io.points or a reference mmls.manifold")
    mcfg = cfg.mmls_config(volume=manifold.volume())
    report = mmls_rate_experiment(manifold, mcfg, cfg["lab.n_grid"], cfg["lab.trials"], cfg["run.seed"],
                                  probes=cfg["mmls.probes"], rounding_floor=cfg["lab.rounding_floor"])
    return _emit_rate(cfg, report), _rate_results(report)


def cmd_report(cfg: RunConfig, raw: Optional[str] = None, recent: int = 0,
               prune: bool = False) -> Tuple[Artifacts, Dict]:
    """Re-renderiza summary.csv/plot.svg desde un raw.csv, lista corridas recientes y/o poda la traza."""
    if not (raw or recent or prune):
        raise ConfigError("--raw", "report needs --raw, --recent or --prune")
    arts: Artifacts = []
    extra: Dict = {}
    if prune:
        extra["pruned"] = prune_old_records()
        logger.info("[trace] pruned %d old runs", extra["pruned"])
    if raw:
        target, records = reporting.read_raw_csv(raw)
        aggregation, x_axis = default_aggregation(target, cfg["lab.quantile"])
        report = summarize(target, records, aggregation, x_axis, cfg["lab.rounding_floor"])
        out = _out(cfg)
        arts.append(reporting.write_summary_csv(out / "summary.csv", report))
        if cfg["lab.plot"]:
            try:
                arts.append(reporting.emit_plot(report, out / "plot.svg"))
            except ArgumentError as e:
                logger.warning("[cli] plot skipped: %s", e)
        extra["slope"] = report.slope
    if recent:
        rows = list_recent(recent)
        for r in rows:
            print(f"{r['id']:>5} {r['ts']} {r['command']:<9} ok={int(r['ok'])} code={r['code']} {r['message']}")
        extra["recent"] = len(rows)
    return arts, extra


def cmd_calibrate(cfg: RunConfig) -> Tuple[Artifacts, Dict]:
    """Piloto de conteo de vecinos y λ_min; escribe calibration.json."""
    result = calibrate(cfg.plan("neighbor-count"), cfg.plan("lambda-min"))
    art = reporting.write_json(_out(cfg) / "calibration.json", result)
    return [art], result


HANDLERS: Dict[str, Callable[[RunConfig], Tuple[Artifacts, Dict]]] = {
    "sample": cmd_sample,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "rates": cmd_rates,
    "mmls": cmd_mmls,
    "calibrate": cmd_calibrate,
}


def run(config: RunConfig, **options) -> int:
    """
    Entrada:
        - config (RunConfig): configuración validada; options: extras de 'report'.
    Qué hace:
        - Despacha al subcomando, escribe los artefactos y el manifest (versión, semilla,
          configuración resuelta y sha256), y registra la corrida en la traza.
    Salida esperada:
        - Código de salida: 0 ok, 1 error de módulo o de E/S, 2 error de configuración.
    """
    action = config["lab.target"] if config.command == "rates" else None
    try:
        if config.command == "report":
            artifacts, extra = cmd_report(config, **options)
        else:
            artifacts, extra = HANDLERS[config.command](config)
        if artifacts:
            artifacts.append(reporting.write_manifest(_out(config), config.as_dict(), __version__,
                                                      config["run.seed"], config.command, artifacts, extra))
        message = f"{len(artifacts)} artifacts in {_out(config)}"
        logger.info("[cli] %s ok: %s", config.command, message)
        code = 0
    except ConfigError as e:
        logger.error("[cli] %s", e)
        message, code = str(e), 2
    except (MlsLabError, OSError) as e:
        logger.error("[cli] %s failed: %s", config.command, e)
        message, code = str(e), 1
    log_exec(command=config.command, action=action, params=config.as_dict(), ok=code == 0,
             code=code, message=message, output_dir=str(_out(config)))
    return code


# ============================================================================
# argparse
# ============================================================================
def _flag(parser: argparse.ArgumentParser, name: str, key: str, **kw) -> None:
    """--name escribe directamente la clave de configuración `key`."""
    parser.add_argument(name, dest=key, default=argparse.SUPPRESS, help=SCHEMA[key].help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlslab", description="MLS approximation and convergence-rate lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    _flag(common, "--seed", "run.seed")
    _flag(common, "--out", "run.output_dir")
    _flag(common, "--workers", "run.workers")

    p = subs.add_parser("sample", parents=[common], help="draw a seeded i.i.d. sample")
    _flag(p, "--n", "sampling.n")
    _flag(p, "--dim", "geometry.dim")
    _flag(p, "--domain", "geometry.domain")
    _flag(p, "--manifold", "sampling.manifold")

    for name in ("fit", "eval"):
        p = subs.add_parser(name, parents=[common], help=f"MLS {name} on a points/values pair")
        _flag(p, "--points", "io.points")
        _flag(p, "--values", "io.values")
        _flag(p, "--queries", "io.queries")
        _flag(p, "--degree", "mls.degree")
        _flag(p, "--dim", "geometry.dim")
        if name == "eval":
            _flag(p, "--alpha", "io.alpha")

    p = subs.add_parser("rates", parents=[common], help="run a convergence-rate experiment")
    _flag(p, "--target", "lab.target")
    _flag(p, "--trials", "lab.trials")
    _flag(p, "--n-grid", "lab.n_grid")
    _flag(p, "--dim", "geometry.dim")

    p = subs.add_parser("mmls", parents=[common], help="Manifold-MLS projection or rate experiment")
    _flag(p, "--samples", "io.points")
    _flag(p, "--probes", "io.probes")
    _flag(p, "--d", "mmls.dim")
    _flag(p, "--ambient", "mmls.ambient_dim")
    _flag(p, "--degree", "mmls.degree")
    _flag(p, "--mu-factor", "mmls.mu_factor")
    _flag(p, "--manifold", "mmls.manifold")

    p = subs.add_parser("report", parents=[common], help="re-render a summary or list recent runs")
    p.add_argument("--raw", help="raw.csv to re-summarize")
    p.add_argument("--recent", type=int, default=0, help="print the N most recent runs")
    p.add_argument("--prune", action="store_true", help="drop trace rows older than TRACE_RETENTION_DAYS")

    p = subs.add_parser("calibrate", parents=[common], help="pilot gamma window and lambda_min floor")
    _flag(p, "--n-grid", "lab.n_grid")
    _flag(p, "--trials", "lab.trials")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    ns = vars(args)
    overrides = {k: v for k, v in ns.items() if k in SCHEMA}
    options = {}
    if args.command == "report":
        options = {"raw": args.raw, "recent": args.recent, "prune": args.prune}
    try:
        overrides.update(parse_assignments(args.set))
        cfg = load_config(args.command, args.config, overrides)
    except ConfigError as e:
        logger.error("[cli] %s", e)
        log_exec(command=args.command, ok=False, code=2, message=str(e))
        return 2
    return run(cfg, **options)


if __name__ == "__main__":
    sys.exit(main())
