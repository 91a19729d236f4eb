# app/modules/stochastic_lab.py
"""
Laboratorio estocástico: convierte las cotas O_P / Ω_P en pendientes medibles.

Cada experimento corre ensayos independientes (n, t) con su propio flujo
aleatorio derivado, junta los resultados en orden (n, t) y ajusta la
pendiente log-log del agregado por n. Las reglas de agregación siguen la
dirección de cada cota: mediana para h_n y errores, cuantil bajo para δ_n,
mínimo para λ_min.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from .errors import ArgumentError, ExperimentError, IllConditionedError, InsufficientDataError
from .geometry import (
    Domain,
    MultiIndex,
    PointCloud,
    fill_distance,
    range_query,
    separation,
    unit_ball_volume,
)
from .mls_engine import (
    Bandwidth,
    DifferentialOperator,
    MlsModel,
    WeightFunction,
    evaluate_derivatives,
    local_fit,
    mls_eval_operator,
)
from .sampling import Density, derive_stream, experiment_id, sample_iid

logger = logging.getLogger("mlslab.lab")

LAB_TARGETS = (
    "fill",
    "separation",
    "neighbor-count",
    "lambda-min",
    "error-rate",
    "smoothness",
    "mesh-ratio",
)

MIN_SLOPE_POINTS = 4

# Umbrales de los chequeos de cordura de los reportes
NORMALIZED_RATIO_MAX = 3.0
QUASI_UNIFORMITY_GROWTH = 4.0
SMOOTHNESS_RATIO_MAX = 2.0
SMOOTHNESS_COARSENING = 4
SMOOTHNESS_DD_TOL = 1e-3

# Tope de puntos por eje de la malla de fill distance (≈ 2^21 candidatos)
_GRID_MAX_LOG2 = 21


# ---------------------- Funciones de prueba ----------------------
@dataclass(frozen=True)
class SmoothFunction:
    """Función suave con derivadas cerradas de cualquier orden."""

    name: str
    derivative: Callable[[np.ndarray, MultiIndex], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        return self.derivative(pts, MultiIndex.zero(pts.shape[1]))

    def apply(self, Q: DifferentialOperator, x: np.ndarray) -> np.ndarray:
        """Q f evaluada por filas."""
        pts = np.atleast_2d(x)
        return sum(q * self.derivative(pts, a) for a, q in Q.terms)


def _sine_derivative(x: np.ndarray, alpha: MultiIndex) -> np.ndarray:
    # ∂^a sin(2πx) = (2π)^a sin(2πx + aπ/2)
    out = np.ones(x.shape[0])
    for j, a in enumerate(alpha.entries):
        out = out * (2.0 * math.pi) ** a * np.sin(2.0 * math.pi * x[:, j] + a * math.pi / 2.0)
    return out


def _exp_derivative(x: np.ndarray, alpha: MultiIndex) -> np.ndarray:
    return np.exp(np.sum(x, axis=1))


def _quadratic_derivative(x: np.ndarray, alpha: MultiIndex) -> np.ndarray:
    # 1 + Σx_j + Σx_j²
    if alpha.order == 0:
        return 1.0 + np.sum(x, axis=1) + np.sum(x * x, axis=1)
    if alpha.order == 1:
        j = alpha.entries.index(1)
        return 1.0 + 2.0 * x[:, j]
    if alpha.order == 2 and max(alpha.entries) == 2:
        return np.full(x.shape[0], 2.0)
    return np.zeros(x.shape[0])


NAMED_FUNCTIONS: Dict[str, SmoothFunction] = {
    "sine": SmoothFunction("sine", _sine_derivative),
    "exp": SmoothFunction("exp", _exp_derivative),
    "quadratic": SmoothFunction("quadratic", _quadratic_derivative),
}


def named_function(name: str) -> SmoothFunction:
    try:
        return NAMED_FUNCTIONS[name]
    except KeyError:
        raise ArgumentError(f"unknown test function '{name}', expected one of {sorted(NAMED_FUNCTIONS)}") from None


# ---------------------- Plan y reportes ----------------------
@dataclass(frozen=True)
class ExperimentPlan:
    """
    Plan de un experimento de tasas.

    - n_grid: tamaños de muestra estrictamente crecientes.
    - trials: ensayos por n (≥ 1).
    - master_seed: semilla maestra de 64 bits.
    - resolution: puntos por eje de la malla de fill distance (0 = automático).
    - workers: hilos para los ensayos; no cambia los resultados.
    """

    target: str
    n_grid: Tuple[int, ...]
    trials: int = 20
    master_seed: int = 0
    domain: Domain = field(default_factory=lambda: Domain.unit_cube(1))
    density: Density = field(default_factory=Density.uniform)
    degree: int = 2
    weight: WeightFunction = field(default_factory=WeightFunction)
    bandwidth: Bandwidth = field(default_factory=Bandwidth)
    normalization: str = "per-count"
    ridge: float = 0.0
    lambda_floor: float = 1e-10
    quantile: float = 0.1
    max_failure_fraction: float = 0.01
    probes: int = 8
    boundary_probes: bool = False
    function: str = "sine"
    operator: str = "id"
    max_order: int = 2
    grid_step: float = 1e-4
    inject_duplicate: bool = False
    rounding_floor: float = 1e-10
    resolution: int = 0
    workers: int = 1
    lambda_check: float = 1e-4
    gamma_ratio_max: float = 8.0

    def __post_init__(self):
        if self.target not in LAB_TARGETS:
            raise ArgumentError(f"unknown experiment target '{self.target}', expected one of {LAB_TARGETS}")
        grid = tuple(int(n) for n in self.n_grid)
        if not grid:
            raise ArgumentError("n_grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ArgumentError(f"n_grid must be strictly increasing, got {grid}")
        if grid[0] < 2:
            raise ArgumentError(f"sample sizes must be >= 2, got {grid[0]}")
        if int(self.trials) < 1:
            raise ArgumentError(f"trials must be >= 1, got {self.trials}")
        if not 0.0 < self.quantile < 1.0:
            raise ArgumentError(f"quantile must lie in (0, 1), got {self.quantile}")
        if not 0.0 <= self.max_failure_fraction <= 1.0:
            raise ArgumentError(f"max failure fraction must lie in [0, 1], got {self.max_failure_fraction}")
        object.__setattr__(self, "n_grid", grid)
        object.__setattr__(self, "trials", int(self.trials))

    def require_slope_grid(self) -> None:
        if len(self.n_grid) < MIN_SLOPE_POINTS:
            raise ArgumentError(f"slope fits need at least {MIN_SLOPE_POINTS} sample sizes, got {len(self.n_grid)}")

    def stream(self, n: int, trial: int) -> np.random.SeedSequence:
        return derive_stream(self.master_seed, experiment_id(self.target), n, trial)

    def sample(self, n: int, trial: int) -> PointCloud:
        return sample_iid(self.density, self.domain, n, self.stream(n, trial))

    def model(self, cloud: PointCloud, values) -> MlsModel:
        return MlsModel(cloud, values, self.degree, self.weight, self.bandwidth,
                        self.normalization, self.ridge, self.lambda_floor)

    def probe_points(self) -> np.ndarray:
        pts = self.domain.interior_probes(self.probes)
        if self.boundary_probes:
            pts = np.concatenate([pts, self.domain.boundary_probes()], axis=0)
        return pts

    def fill_resolution(self, n: int) -> int:
        return self.resolution if self.resolution >= 2 else auto_resolution(n, self.domain.dim)

    def differential_operator(self) -> DifferentialOperator:
        return DifferentialOperator.parse(self.operator, self.domain.dim)


@dataclass
class TrialRecord:
    """Estadístico crudo de un ensayo (n, trial)."""

    n: int
    trial: int
    statistic: float
    h_measured: float = math.nan
    failures: int = 0
    fits: int = 0
    degenerate: bool = False
    auxiliary: Dict[str, float] = field(default_factory=dict)


@dataclass
class RateReport:
    """
    Reporte de tasa: registros crudos por ensayo, agregados por n y la
    recta ajustada log(agregado) = slope·log(x) + intercept.
    """

    target: str
    aggregation: str
    x_axis: str
    records: List[TrialRecord]
    points: List[Tuple[int, float, float]] = field(default_factory=list)
    slope: Optional[float] = None
    intercept: Optional[float] = None
    stderr: Optional[float] = None
    residual_max: Optional[float] = None
    normalized: Dict[int, float] = field(default_factory=dict)
    auxiliary: Dict[str, Tuple[float, float, float]] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    failures: int = 0
    total_fits: int = 0

    def aggregate_at(self, n: int) -> float:
        for m, _, y in self.points:
            if m == n:
                return y
        raise ArgumentError(f"no aggregate for n={n}")


@dataclass
class NeighborCountReport:
    """
    Conteos N_{D_n} por (n, trial, sonda) con radio R_n de la regla de tasa.
    gamma_low / gamma_high: min / max de N/log n en la sonda central.
    """

    records: List[TrialRecord]
    probes: np.ndarray
    radii: Dict[int, float]
    ratios: Dict[int, List[float]]
    expected: Dict[Tuple[int, int], float]
    mean_counts: Dict[Tuple[int, int], float]
    gamma_low: float
    gamma_high: float
    checks: Dict[str, bool] = field(default_factory=dict)


@dataclass
class SmoothnessReport:
    """Saltos normalizados por orden de derivada y acuerdo con diferencias divididas."""

    orders: List[Dict[str, float]]
    grid_points: int
    failures: int
    passed: bool


# ---------------------- Utilidades de agregación ----------------------
def fit_loglog_slope(points: Sequence[Tuple[float, float]]) -> Tuple[float, float, float]:
    """
    Parámetros:
        points: pares (x, y) con x, y > 0; al menos 4.

    Retorna:
        (slope, intercept, stderr) de mínimos cuadrados ordinarios sobre (log x, log y).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < MIN_SLOPE_POINTS:
        raise ArgumentError(f"log-log fit needs at least {MIN_SLOPE_POINTS} points, got {len(points)}")
    if not np.all(pts > 0) or not np.all(np.isfinite(pts)):
        raise ArgumentError("log-log fit needs finite positive coordinates")
    res = linregress(np.log(pts[:, 0]), np.log(pts[:, 1]))
    return float(res.slope), float(res.intercept), float(res.stderr)


def aggregate(values: Sequence[float], rule: str) -> float:
    """Reglas: median, min, max, q<p> (cuantil p, p.ej. q0.1)."""
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    if arr.size == 0:
        return math.nan
    if rule == "median":
        return float(np.median(arr))
    if rule == "min":
        return float(arr.min())
    if rule == "max":
        return float(arr.max())
    if rule.startswith("q"):
        return float(np.quantile(arr, float(rule[1:])))
    raise ArgumentError(f"unknown aggregation rule '{rule}'")


def default_aggregation(target: str, quantile: float = 0.1) -> Tuple[str, str]:
    """(regla de agregación, eje x) con que se resume cada objetivo."""
    if target == "separation":
        return f"q{quantile:g}", "n"
    if target == "lambda-min":
        return "min", "n"
    if target == "smoothness":
        return "max", "n"
    if target in ("error-rate", "mmls"):
        return "median", "h"
    return "median", "n"


def auto_resolution(n: int, d: int) -> int:
    """Puntos por eje de la malla de fill distance: ≈ 8 celdas por radio típico."""
    res = int(math.ceil(8.0 * (n / math.log(max(n, 3))) ** (1.0 / d))) + 1
    return max(2, min(res, int(2 ** (_GRID_MAX_LOG2 / d))))


def summarize(target: str, records: List[TrialRecord], aggregation: str, x_axis: str = "n",
              rounding_floor: float = 1e-10) -> RateReport:
    """
    Agrega los registros por n (ignorando ensayos degenerados) y ajusta la
    pendiente. Con x_axis = "h" la abscisa es la mediana de h_measured.
    La pendiente se omite si algún agregado cae bajo rounding_floor o hay
    menos de 4 puntos. Se puede recalcular desde raw.csv.
    """
    report = RateReport(target, aggregation, x_axis, sorted(records, key=lambda r: (r.n, r.trial)))
    for n in sorted({r.n for r in records}):
        rows = [r for r in report.records if r.n == n and not r.degenerate]
        if not rows:
            continue
        y = aggregate([r.statistic for r in rows], aggregation)
        x = float(n) if x_axis == "n" else aggregate([r.h_measured for r in rows], "median")
        report.points.append((n, x, y))
    report.failures = sum(r.failures for r in records)
    report.total_fits = sum(r.fits for r in records)

    usable = [(x, y) for _, x, y in report.points if np.isfinite(x) and np.isfinite(y)]
    if len(usable) >= MIN_SLOPE_POINTS and all(y > rounding_floor and x > 0 for x, y in usable):
        report.slope, report.intercept, report.stderr = fit_loglog_slope(usable)
        lx = np.log([x for x, _ in usable])
        ly = np.log([y for _, y in usable])
        report.residual_max = float(np.max(np.abs(ly - (report.slope * lx + report.intercept))))
    elif usable:
        logger.info("[lab] %s: slope fit skipped (%d points, min aggregate %.3e)",
                    target, len(usable), min(y for _, y in usable))
    return report


def auxiliary_slope(report: RateReport, key: str, x_axis: str = "h", rule: str = "median",
                     rounding_floor: float = 1e-10) -> None:
    pts = []
    for n in sorted({r.n for r in report.records}):
        rows = [r for r in report.records if r.n == n and not r.degenerate and key in r.auxiliary]
        if not rows:
            continue
        y = aggregate([r.auxiliary[key] for r in rows], rule)
        x = float(n) if x_axis == "n" else aggregate([r.h_measured for r in rows], "median")
        pts.append((x, y))
    if len(pts) >= MIN_SLOPE_POINTS and all(y > rounding_floor and x > 0 for x, y in pts):
        report.auxiliary[key] = fit_loglog_slope(pts)


def _check_failures(report: RateReport, plan: ExperimentPlan, what: str = "probe fits") -> None:
    if report.total_fits and report.failures / report.total_fits > plan.max_failure_fraction:
        raise ExperimentError(report.failures, report.total_fits, plan.max_failure_fraction, what)
    if report.failures:
        logger.warning("[lab] %s: %d/%d %s failed (excluded)", report.target, report.failures, report.total_fits, what)


def run_trials(plan: ExperimentPlan, job: Callable[[int, int], TrialRecord]) -> List[TrialRecord]:
    """
    Ejecuta job(n, trial) para toda la grilla. Con plan.workers > 1 usa un
    pool de hilos; el resultado se ordena por (n, trial), así que no depende
    del orden de planificación.
    """
    keys = [(n, t) for n in plan.n_grid for t in range(plan.trials)]
    results: Dict[Tuple[int, int], TrialRecord] = {}
    if plan.workers > 1:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            futures = {key: pool.submit(job, *key) for key in keys}
            for key, fut in futures.items():
                results[key] = fut.result()
    else:
        for key in keys:
            results[key] = job(*key)
    return [results[k] for k in sorted(results)]


# ---------------------- Experimentos ----------------------
def fill_rate_experiment(plan: ExperimentPlan) -> RateReport:
    """
    Entrada:
        - plan con target = fill.
    Qué hace:
        - Mide h_n por ensayo y ajusta la pendiente de la mediana vs n.
        - Reporta además h_n·(n/log n)^{1/d}, que debe mantenerse acotado.
    Salida esperada:
        - RateReport con checks "monotone" y "normalized_bounded".
    """
    plan.require_slope_grid()
    d = plan.domain.dim

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        h = fill_distance(cloud, plan.domain, plan.fill_resolution(n))
        logger.debug("[lab] fill n=%d trial=%d h=%.3e", n, trial, h)
        return TrialRecord(n, trial, h, h_measured=h,
                           auxiliary={"normalized": h * (n / math.log(n)) ** (1.0 / d)})

    report = summarize("fill", run_trials(plan, job), "median", "n", plan.rounding_floor)
    for n in plan.n_grid:
        report.normalized[n] = aggregate([r.auxiliary["normalized"] for r in report.records if r.n == n], "median")
    ys = [y for _, _, y in report.points]
    norm = list(report.normalized.values())
    report.checks["monotone"] = all(b < a for a, b in zip(ys, ys[1:]))
    report.checks["normalized_bounded"] = max(norm) / min(norm) <= NORMALIZED_RATIO_MAX
    logger.info("[lab] fill slope=%s checks=%s", _fmt(report.slope), report.checks)
    return report


def separation_rate_experiment(plan: ExperimentPlan) -> RateReport:
    """δ_n por ensayo, agregado por el cuantil plan.quantile (cola inferior)."""
    plan.require_slope_grid()

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        if plan.inject_duplicate:
            pts = np.array(cloud.points)
            pts[1] = pts[0]
            cloud = cloud.with_points(pts)
        delta = separation(cloud)
        return TrialRecord(n, trial, delta, degenerate=delta == 0.0)

    report = summarize("separation", run_trials(plan, job), f"q{plan.quantile:g}", "n", plan.rounding_floor)
    degenerate = sum(r.degenerate for r in report.records)
    report.checks["no_degenerate"] = degenerate == 0
    if degenerate:
        logger.warning("[lab] separation: %d degenerate trials (repeated points)", degenerate)
    logger.info("[lab] separation slope=%s", _fmt(report.slope))
    return report


def mesh_ratio_experiment(plan: ExperimentPlan) -> RateReport:
    """h_n/δ_n sobre la misma muestra; su mediana debe crecer con n (no cuasi-uniforme)."""
    plan.require_slope_grid()

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        h = fill_distance(cloud, plan.domain, plan.fill_resolution(n))
        delta = separation(cloud)
        if delta == 0.0:
            return TrialRecord(n, trial, math.inf, h_measured=h, degenerate=True)
        return TrialRecord(n, trial, h / delta, h_measured=h, auxiliary={"separation": delta})

    report = summarize("mesh-ratio", run_trials(plan, job), "median", "n", plan.rounding_floor)
    first, last = report.points[0][2], report.points[-1][2]
    report.checks["quasi_uniformity_fails"] = last >= QUASI_UNIFORMITY_GROWTH * first
    logger.info("[lab] mesh ratio %.3g -> %.3g (x%.2f)", first, last, last / first)
    return report


def neighbor_count_experiment(plan: ExperimentPlan) -> NeighborCountReport:
    """
    Entrada:
        - plan con target = neighbor-count; R_n = C_D·(vol·log n/n)^{1/d}.
    Qué hace:
        - Cuenta range_query(x̂, R_n) en sondas fijas: centro del dominio y,
          si boundary_probes, esquina/cara.
        - Esperanza cerrada: n·ω_d·R_n^d·fracción(B ∩ Ω)·p(x̂).
    Salida esperada:
        - NeighborCountReport con [γ̂₁, γ̂₂] de la sonda central.
    """
    d = plan.domain.dim
    lo, hi = plan.domain.bounding_box()
    probes = ((lo + hi) / 2.0)[None, :]
    if plan.boundary_probes:
        probes = np.concatenate([probes, plan.domain.boundary_probes()], axis=0)
    rate = Bandwidth.rate(plan.bandwidth.c_d)
    radii = {n: rate.resolve(n, d, plan.domain.volume()) for n in plan.n_grid}
    pdf = plan.density.pdf(probes, plan.domain)

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        counts = [len(range_query(cloud, p, radii[n])) for p in probes]
        aux = {f"count_{k}": float(c) for k, c in enumerate(counts)}
        return TrialRecord(n, trial, counts[0] / math.log(n), h_measured=radii[n], auxiliary=aux)

    records = run_trials(plan, job)
    ratios = {n: [r.statistic for r in records if r.n == n] for n in plan.n_grid}
    expected: Dict[Tuple[int, int], float] = {}
    means: Dict[Tuple[int, int], float] = {}
    for n in plan.n_grid:
        ball = unit_ball_volume(d) * radii[n] ** d
        for k, p in enumerate(probes):
            expected[(n, k)] = n * ball * plan.domain.ball_fraction(p, radii[n]) * float(pdf[k])
            means[(n, k)] = float(np.mean([r.auxiliary[f"count_{k}"] for r in records if r.n == n]))
    flat = [v for vals in ratios.values() for v in vals]
    g_lo, g_hi = float(min(flat)), float(max(flat))
    report = NeighborCountReport(records, probes, radii, ratios, expected, means, g_lo, g_hi)
    report.checks["positive"] = g_lo > 0
    report.checks["window"] = g_lo > 0 and g_hi / g_lo <= plan.gamma_ratio_max
    logger.info("[lab] neighbor count window [%.3f, %.3f]", g_lo, g_hi)
    return report


def error_rate_experiment(plan: ExperimentPlan, f: Optional[SmoothFunction] = None,
                          Q: Optional[DifferentialOperator] = None) -> RateReport:
    """
    Entrada:
        - plan (target = error-rate), f con Qf cerrada, Q de orden ≤ grado.
    Qué hace:
        - Por ensayo: muestrea X_n, ajusta el modelo, mide max_sondas |Q s − Q f|
          junto con h_n medido, y ajusta la pendiente del error vs h_n (teoría k − m).
        - Las sondas con ajuste fallido se excluyen y se cuentan.
    Salida esperada:
        - RateReport con x_axis = "h"; sin pendiente si el error está en el piso de redondeo.
    """
    plan.require_slope_grid()
    f = f or named_function(plan.function)
    Q = Q or plan.differential_operator()
    if Q.order > plan.degree:
        raise ArgumentError(f"operator order {Q.order} exceeds degree {plan.degree}")
    probes = plan.probe_points()
    exact = f.apply(Q, probes)

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        model = plan.model(cloud, f(cloud.points))
        worst, failures = 0.0, 0
        for p, target in zip(probes, exact):
            try:
                worst = max(worst, abs(mls_eval_operator(model, p, Q) - target))
            except (InsufficientDataError, IllConditionedError):
                failures += 1
        h = fill_distance(cloud, plan.domain, plan.fill_resolution(n))
        return TrialRecord(n, trial, worst, h_measured=h, failures=failures, fits=len(probes))

    report = summarize("error-rate", run_trials(plan, job), "median", "h", plan.rounding_floor)
    _check_failures(report, plan)
    report.checks["reproduction"] = all(y <= 1e-8 for _, _, y in report.points)
    logger.info("[lab] error rate f=%s Q=%s slope=%s", f.name, Q, _fmt(report.slope))
    return report


def lambda_min_experiment(plan: ExperimentPlan) -> RateReport:
    """
    min_sondas λ_min(𝒜_n(x̂)) por ensayo (normalización per-count); agrega por
    mínimo y verifica que el mínimo global supere plan.lambda_check.
    """
    if plan.normalization != "per-count":
        raise ArgumentError("lambda-min experiment needs per-count normalization")
    probes = plan.probe_points()

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        model = plan.model(cloud, np.zeros(n))
        lows, failures = [], 0
        for p in probes:
            try:
                lows.append(local_fit(model, p).lambda_min)
            except IllConditionedError as e:
                lows.append(e.lambda_min)
                failures += 1
            except InsufficientDataError:
                failures += 1
        stat = min(lows) if lows else math.nan
        return TrialRecord(n, trial, stat, h_measured=model.h, failures=failures, fits=len(probes))

    report = summarize("lambda-min", run_trials(plan, job), "min", "n", plan.rounding_floor)
    _check_failures(report, plan)
    overall = min(y for _, _, y in report.points)
    report.checks["lambda_floor"] = overall >= plan.lambda_check
    logger.info("[lab] lambda_min overall=%.3e (floor %.1e)", overall, plan.lambda_check)
    return report


def smoothness_probe(model: MlsModel, max_order: int, grid_step: float,
                     axis: int = 0, span: Optional[Tuple[float, float]] = None) -> SmoothnessReport:
    """
    Entrada:
        - model, max_order ≤ degree + 1, grid_step > 0.
        - axis / span: recta de prueba (por defecto el eje 0 a través del centro de la caja).
    Qué hace:
        - Evalúa ∂^r s^MLS (r = 0..max_order−1, sobre el eje) en la malla fina.
        - Salto normalizado max|v(x+Δ) − v(x)|/Δ con Δ = grid_step y con 4Δ; una
          discontinuidad da razón ≈ 4, una función C¹ razón ≈ 1.
        - Compara diferencias divididas de orden r−1 con el promedio trapezoidal de ∂^r.
    Salida esperada:
        - SmoothnessReport; passed si todas las razones ≤ 2 y cada error de
          diferencias divididas ≤ 1e-3·max(1, max|∂^r|).
    """
    if max_order < 1 or max_order > model.degree + 1:
        raise ArgumentError(f"max_order must lie in [1, degree + 1 = {model.degree + 1}], got {max_order}")
    if not grid_step > 0:
        raise ArgumentError(f"grid step must be > 0, got {grid_step}")
    d = model.dim
    domain = model.cloud.domain
    if domain is not None:
        lo, hi = domain.bounding_box()
    else:
        lo, hi = model.cloud.points.min(axis=0), model.cloud.points.max(axis=0)
    a, b = span if span is not None else (float(lo[axis]), float(hi[axis]))
    ts = a + grid_step * np.arange(int(math.floor((b - a) / grid_step + 1e-9)) + 1)
    base = (lo + hi) / 2.0
    line = np.repeat(base[None, :], ts.size, axis=0)
    line[:, axis] = ts
    if domain is not None:
        line = line[domain.contains(line)]

    alphas = [MultiIndex(tuple(r if j == axis else 0 for j in range(d))) for r in range(max_order)]
    values = np.full((len(alphas), line.shape[0]), np.nan)
    failures = 0
    for k, x in enumerate(line):
        try:
            got = evaluate_derivatives(model, x, alphas)
        except (InsufficientDataError, IllConditionedError):
            failures += 1
            continue
        values[:, k] = [got[al] for al in alphas]

    orders: List[Dict[str, float]] = []
    passed = True
    for r, vals in enumerate(values):
        fine = _max_jump(vals, 1) / grid_step
        coarse = _max_jump(vals, SMOOTHNESS_COARSENING) / (SMOOTHNESS_COARSENING * grid_step)
        if fine * grid_step <= 1e-9:
            ratio = 1.0
        else:
            ratio = fine / coarse if coarse > 0 else math.inf
        entry = {"order": float(r), "max_jump": fine, "coarse_jump": coarse, "jump_ratio": ratio}
        if r >= 1:
            prev = values[r - 1]
            dd = np.diff(prev) / grid_step
            trap = 0.5 * (vals[1:] + vals[:-1])
            err = np.abs(dd - trap)
            entry["max_dd_error"] = float(np.nanmax(err)) if np.any(np.isfinite(err)) else math.nan
            scale = float(np.nanmax(np.abs(vals))) if np.any(np.isfinite(vals)) else 0.0
            entry["dd_tolerance"] = SMOOTHNESS_DD_TOL * max(1.0, scale)
            # NaN (sin ajustes válidos) no aprueba
            passed = passed and entry["max_dd_error"] <= entry["dd_tolerance"]
        passed = passed and ratio <= SMOOTHNESS_RATIO_MAX
        orders.append(entry)
    if failures:
        logger.warning("[lab] smoothness probe: %d/%d grid fits failed", failures, line.shape[0])
    return SmoothnessReport(orders, int(line.shape[0]), failures, passed)


def _max_jump(vals: np.ndarray, stride: int) -> float:
    sub = vals[::stride]
    jumps = np.abs(np.diff(sub))
    jumps = jumps[np.isfinite(jumps)]
    return float(jumps.max()) if jumps.size else 0.0


def smoothness_experiment(plan: ExperimentPlan) -> RateReport:
    """
    Corre smoothness_probe en cada ensayo (n, trial) de la grilla.

    - statistic: peor razón de saltos del ensayo; se agrega con max por n.
    - checks: "bounded_jumps" (todas las razones ≤ 2 en todos los ensayos) y
      "dd_consistent" (diferencias divididas dentro de tolerancia en todos).
    """
    f = named_function(plan.function)

    def job(n: int, trial: int) -> TrialRecord:
        cloud = plan.sample(n, trial)
        model = plan.model(cloud, f(cloud.points))
        probe = smoothness_probe(model, plan.max_order, plan.grid_step)
        aux = {f"ratio_{int(o['order'])}": o["jump_ratio"] for o in probe.orders}
        aux.update({f"dd_{int(o['order'])}": o["max_dd_error"] for o in probe.orders if "max_dd_error" in o})
        bounded = all(o["jump_ratio"] <= SMOOTHNESS_RATIO_MAX for o in probe.orders)
        aux["bounded"] = float(bounded)
        aux["dd_ok"] = float(all(o["max_dd_error"] <= o["dd_tolerance"] for o in probe.orders if "max_dd_error" in o))
        aux["passed"] = float(probe.passed)
        worst = max(o["jump_ratio"] for o in probe.orders)
        return TrialRecord(n, trial, worst, h_measured=model.h, failures=probe.failures,
                           fits=probe.grid_points, auxiliary=aux)

    report = summarize("smoothness", run_trials(plan, job), "max", "n", plan.rounding_floor)
    _check_failures(report, plan, "grid fits")
    report.checks["bounded_jumps"] = all(r.auxiliary["bounded"] == 1.0 for r in report.records)
    report.checks["dd_consistent"] = all(r.auxiliary["dd_ok"] == 1.0 for r in report.records)
    logger.info("[lab] smoothness %d trials checks=%s", len(report.records), report.checks)
    return report


EXPERIMENTS = {
    "fill": fill_rate_experiment,
    "separation": separation_rate_experiment,
    "mesh-ratio": mesh_ratio_experiment,
    "neighbor-count": neighbor_count_experiment,
    "error-rate": error_rate_experiment,
    "lambda-min": lambda_min_experiment,
    "smoothness": smoothness_experiment,
}


def run_experiment(plan: ExperimentPlan):
    """Despacha según plan.target."""
    return EXPERIMENTS[plan.target](plan)


def calibrate(neighbor_plan: ExperimentPlan, lambda_plan: ExperimentPlan, margin: float = 0.25) -> Dict[str, object]:
    """
    Corrida piloto: ventana γ̂ con margen ±margin y piso de λ_min = mínimo observado / 10.
    Los valores se fijan en un archivo y no se recalculan en silencio.
    """
    counts = neighbor_count_experiment(neighbor_plan)
    lam = lambda_min_experiment(lambda_plan)
    floor = min(y for _, _, y in lam.points) / 10.0
    result = {
        "gamma_window": [counts.gamma_low / (1.0 + margin), counts.gamma_high * (1.0 + margin)],
        "lambda_min_floor": floor,
        "neighbor_plan": {"n_grid": list(neighbor_plan.n_grid), "trials": neighbor_plan.trials,
                          "c_d": neighbor_plan.bandwidth.c_d, "seed": neighbor_plan.master_seed},
        "lambda_plan": {"n_grid": list(lambda_plan.n_grid), "trials": lambda_plan.trials,
                        "degree": lambda_plan.degree, "seed": lambda_plan.master_seed},
    }
    logger.info("[lab] calibration gamma=[%.3f, %.3f] lambda_floor=%.3e",
                result["gamma_window"][0], result["gamma_window"][1], floor)
    return result


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.3f}"
