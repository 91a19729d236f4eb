# app/modules/mmls.py
"""
Manifold-MLS: proyección de puntos cercanos a una variedad ℳ ⊂ ℝ^D sobre
una aproximación suave construida a partir de muestras de ℳ.

Dos pasos:
  1. Marco local (q, H): minimiza J1(q, H | r) = Σ d(r_i − q, H)² θ₁(‖r_i − q‖)
     con r − q ⊥ H, ‖q − r‖ ≤ μ. Minimización alternada: H = PCA ponderado
     alrededor de q; q = r + N Nᵀ(m − r) con m la media ponderada y N el
     complemento ortogonal de H. Los pasos se amortiguan para que J1 no suba.
  2. Ajuste vectorial J2 en coordenadas del marco x_i = Eᵀ(r_i − q);
     la proyección es el polinomio evaluado en el origen (coeficiente constante).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la

from .errors import (
    ArgumentError,
    ConvergenceError,
    ExperimentError,
    FeasibilityError,
    IllConditionedError,
    InsufficientDataError,
)
from .geometry import MultiIndex, PointCloud, directed_distance, enumerate_multi_indices, range_query
from .mls_engine import Bandwidth, WeightFunction, basis_matrix
from .sampling import ReferenceManifold, derive_stream, experiment_id, sample_manifold
from .stochastic_lab import RateReport, TrialRecord, auxiliary_slope, summarize

logger = logging.getLogger("mlslab.mmls")

DEFAULT_MMLS_C_D = 3.0
MAX_DAMPING_HALVINGS = 20


@dataclass(frozen=True)
class MmlsConfig:
    """
    - dim / ambient_dim: d < D.
    - degree: grado del ajuste J2 (= k − 1).
    - frame_weight / fit_weight: θ₁ y θ₂ (perfil y escala de soporte; h lo fija la regla).
    - mu_factor: μ = mu_factor·h (≥ 1).
    - tolerance: el marco converge cuando q se mueve menos de tolerance·h.
    - volume: volumen de ℳ para la regla de tasa de h.
    """

    dim: int
    ambient_dim: int
    degree: int = 2
    frame_weight: WeightFunction = field(default_factory=WeightFunction)
    fit_weight: WeightFunction = field(default_factory=WeightFunction)
    mu_factor: float = 3.0
    tolerance: float = 1e-10
    max_iterations: int = 100
    bandwidth: Bandwidth = field(default_factory=lambda: Bandwidth.rate(DEFAULT_MMLS_C_D))
    volume: float = 1.0
    lambda_floor: float = 1e-10
    max_failure_fraction: float = 0.01
    workers: int = 1

    def __post_init__(self):
        if not 1 <= int(self.dim) < int(self.ambient_dim):
            raise ArgumentError(f"need 1 <= d < D, got d={self.dim}, D={self.ambient_dim}")
        if int(self.degree) < 0:
            raise ArgumentError(f"degree must be >= 0, got {self.degree}")
        if self.mu_factor < 1.0:
            raise ArgumentError(f"mu factor must be >= 1 (mu >= h), got {self.mu_factor}")
        if not self.tolerance > 0 or int(self.max_iterations) < 1:
            raise ArgumentError("frame tolerance must be > 0 and max iterations >= 1")
        if not self.volume > 0:
            raise ArgumentError(f"manifold volume must be > 0, got {self.volume}")

    @classmethod
    def for_manifold(cls, manifold: ReferenceManifold, **kwargs) -> "MmlsConfig":
        return cls(manifold.dim, manifold.ambient_dim, volume=manifold.volume(), **kwargs)

    @property
    def basis_size(self) -> int:
        return len(enumerate_multi_indices(self.dim, self.degree))

    def h(self, n: int) -> float:
        return self.bandwidth.resolve(n, self.dim, self.volume)


@dataclass(frozen=True)
class LocalFrame:
    """Marco local: origen q, base ortonormal E (D×d), residuo J1, iteraciones e historial de J1."""

    origin: np.ndarray
    basis: np.ndarray
    residual: float
    iterations: int
    h: float
    neighbor_count: int
    history: Tuple[float, ...] = ()

    @property
    def normal(self) -> np.ndarray:
        """Complemento ortogonal N (D×(D−d))."""
        return la.null_space(self.basis.T)


@dataclass(frozen=True)
class VectorPolynomial:
    """π*: H ≅ ℝ^d → ℝ^D; coefficients[a, k] multiplica a p_a en la salida k."""

    indices: Tuple[MultiIndex, ...]
    coefficients: np.ndarray
    h: float
    frame: LocalFrame

    def __call__(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        return basis_matrix(self.indices, pts, self.h) @ self.coefficients

    def at_origin(self) -> np.ndarray:
        return np.array(self.coefficients[0])


@dataclass
class ProbeDiagnostic:
    index: int
    iterations: int = 0
    residual: float = math.nan
    failure: Optional[str] = None


@dataclass
class Reconstruction:
    """Nube proyectada (sólo sondas exitosas) más diagnóstico por sonda."""

    cloud: PointCloud
    diagnostics: List[ProbeDiagnostic]

    @property
    def failures(self) -> int:
        return sum(1 for d in self.diagnostics if d.failure is not None)


# ---------------------- J1 ----------------------
def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Primer componente no nulo de cada columna positivo."""
    out = np.array(vectors)
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def _weighted_plane(pts: np.ndarray, q: np.ndarray, kernel: WeightFunction, d: int) -> np.ndarray:
    diff = pts - q
    w = kernel(diff)
    cov = (diff * w[:, None]).T @ diff
    _, vec = la.eigh(0.5 * (cov + cov.T))
    return _sign_fix(vec[:, ::-1][:, :d])


def _j1(pts: np.ndarray, q: np.ndarray, E: np.ndarray, kernel: WeightFunction) -> float:
    diff = pts - q
    w = kernel(diff)
    resid = diff - (diff @ E) @ E.T
    return float(np.sum(w * np.sum(resid * resid, axis=1)))


def _normal_step(pts: np.ndarray, r: np.ndarray, q: np.ndarray, E: np.ndarray,
                 kernel: WeightFunction, t: float = 1.0) -> np.ndarray:
    """q' = r + N Nᵀ((1 − t)(q − r) + t(m − r)), m = media ponderada con pesos en q."""
    w = kernel(pts - q)
    total = float(w.sum())
    if total <= 0.0:
        return q
    m = (w[:, None] * pts).sum(axis=0) / total
    N = la.null_space(E.T)
    target = (1.0 - t) * (q - r) + t * (m - r)
    return r + N @ (N.T @ target)


def find_local_frame(r, cloud: PointCloud, cfg: MmlsConfig, h: Optional[float] = None) -> LocalFrame:
    """
    Entrada:
        - r: punto en ℝ^D; cloud: muestras de ℳ; cfg: MmlsConfig.
    Qué hace:
        - Inicializa q⁰ = muestra más cercana, H⁰ = PCA ponderado en q⁰.
        - Alterna H ← PCA(q) y q ← paso normal amortiguado mientras J1 baje.
    Salida esperada:
        - LocalFrame que cumple (a) r − q ⊥ H, (b) ‖q − r‖ ≤ μ, (c) ≥ #A vecinos con peso > 0.
        - FeasibilityError si no hay marco factible; ConvergenceError al agotar iteraciones.
    """
    rv = np.asarray(r, dtype=float).ravel()
    if rv.shape[0] != cfg.ambient_dim or cloud.dim != cfg.ambient_dim:
        raise ArgumentError(f"expected points in R^{cfg.ambient_dim}, got r in R^{rv.shape[0]}, cloud in R^{cloud.dim}")
    if len(cloud) == 0:
        raise FeasibilityError("empty sample cloud")
    h = h if h is not None else cfg.h(len(cloud))
    kernel = cfg.frame_weight.with_bandwidth(h)
    mu = cfg.mu_factor * h
    cand = np.asarray(range_query(cloud, rv, mu + kernel.radius), dtype=int)
    if cand.size == 0:
        raise FeasibilityError(f"no samples within mu + s*h = {mu + kernel.radius:.3e} of r")
    pts = cloud.points[cand]
    q = cloud.points[int(cloud.nearest(rv)[0])].copy()
    if np.linalg.norm(q - rv) > mu:
        raise FeasibilityError(f"nearest sample at {np.linalg.norm(q - rv):.3e} > mu = {mu:.3e}")

    E = _weighted_plane(pts, q, kernel, cfg.dim)
    q = _normal_step(pts, rv, q, E, kernel)
    J = _j1(pts, q, E, kernel)
    history = [J]
    converged = False
    it = 0
    while it < cfg.max_iterations:
        it += 1
        E_new = _weighted_plane(pts, q, kernel, cfg.dim)
        accepted = None
        t = 1.0
        for _ in range(MAX_DAMPING_HALVINGS + 1):
            q_try = _normal_step(pts, rv, q, E_new, kernel, t)
            J_try = _j1(pts, q_try, E_new, kernel)
            if J_try <= J:
                accepted = (q_try, J_try)
                break
            t *= 0.5
        if accepted is None:
            # sin descenso posible: punto fijo numérico
            converged = True
            break
        if t < 1.0:
            logger.debug("[mmls] damped frame step t=%.2e at iteration %d", t, it)
        step = float(np.linalg.norm(accepted[0] - q))
        q, J, E = accepted[0], accepted[1], E_new
        history.append(J)
        if step < cfg.tolerance * h:
            converged = True
            break
    if not converged:
        raise ConvergenceError(J, it)

    if np.linalg.norm(q - rv) > mu:
        raise FeasibilityError(f"frame origin drifted {np.linalg.norm(q - rv):.3e} > mu = {mu:.3e} from r")
    count = int(np.count_nonzero(kernel(pts - q) > 0))
    if count < cfg.basis_size:
        raise FeasibilityError(f"only {count} weighted neighbors at q, need {cfg.basis_size}")
    return LocalFrame(q, E, J, it, h, count, tuple(history))


# ---------------------- J2 ----------------------
def local_poly_fit(frame: LocalFrame, cloud: PointCloud, cfg: MmlsConfig) -> VectorPolynomial:
    """
    Ajuste J2: D problemas de mínimos cuadrados ponderados con una sola Gram
    G = Pᵀ W P sobre x_i = Eᵀ(r_i − q); coeficientes G⁻¹ Pᵀ W R (#A × D).
    """
    kernel = cfg.fit_weight.with_bandwidth(frame.h)
    nbrs = np.asarray(range_query(cloud, frame.origin, kernel.radius), dtype=int)
    indices = tuple(enumerate_multi_indices(cfg.dim, cfg.degree))
    if nbrs.size == 0:
        raise InsufficientDataError(0, len(indices), where="frame origin")
    R = cloud.points[nbrs]
    x = (R - frame.origin) @ frame.basis
    w = kernel(x)
    positive = int(np.count_nonzero(w > 0))
    if positive < len(indices):
        raise InsufficientDataError(positive, len(indices), where="frame origin")
    w = w / nbrs.size
    P = basis_matrix(indices, x, frame.h)
    G = P.T @ (w[:, None] * P)
    G = 0.5 * (G + G.T)
    lam, vec = la.eigh(G)
    if lam[0] < cfg.lambda_floor:
        raise IllConditionedError(float(lam[0]), positive, cfg.lambda_floor)
    B = P.T @ (w[:, None] * R)
    coef = vec @ ((vec.T @ B) / lam[:, None])
    return VectorPolynomial(indices, coef, frame.h, frame)


def mmls_project(r, cloud: PointCloud, cfg: MmlsConfig, h: Optional[float] = None) -> np.ndarray:
    """𝒫(r) = π*(0): el ajuste J2 evaluado en el origen del marco."""
    frame = find_local_frame(r, cloud, cfg, h)
    return local_poly_fit(frame, cloud, cfg).at_origin()


def _project_one(r: np.ndarray, k: int, samples: PointCloud, cfg: MmlsConfig, h: float):
    diag = ProbeDiagnostic(k)
    try:
        frame = find_local_frame(r, samples, cfg, h)
        diag.iterations, diag.residual = frame.iterations, frame.residual
        return local_poly_fit(frame, samples, cfg).at_origin(), diag
    except (FeasibilityError, ConvergenceError, IllConditionedError, InsufficientDataError) as e:
        diag.failure = str(e)
        if isinstance(e, ConvergenceError):
            diag.iterations, diag.residual = e.iterations, e.residual
        return None, diag


def reconstruct_manifold(samples: PointCloud, probes: PointCloud, cfg: MmlsConfig) -> Reconstruction:
    """
    Parámetros:
        samples (PointCloud): muestras de ℳ.
        probes (PointCloud): puntos a proyectar (cerca de las muestras).
        cfg (MmlsConfig): configuración; cfg.workers hilos.

    Retorna:
        Reconstruction: nube con 𝒫(p) para las sondas exitosas (en orden de índice)
        y un diagnóstico por sonda. Sin sondas → nube vacía.

    Notas:
        - Si la fracción de fallas supera cfg.max_failure_fraction se lanza ExperimentError.
    """
    if len(probes) == 0:
        return Reconstruction(PointCloud(np.empty((0, cfg.ambient_dim)), dim=cfg.ambient_dim), [])
    h = cfg.h(len(samples))
    jobs = list(enumerate(probes.points))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda kv: _project_one(kv[1], kv[0], samples, cfg, h), jobs))
    else:
        results = [_project_one(p, k, samples, cfg, h) for k, p in jobs]
    projected = [p for p, _ in results if p is not None]
    diagnostics = [d for _, d in results]
    out = Reconstruction(PointCloud(np.array(projected).reshape(-1, cfg.ambient_dim), dim=cfg.ambient_dim), diagnostics)
    if out.failures:
        logger.warning("[mmls] %d/%d probes failed", out.failures, len(probes))
        if out.failures / len(probes) > cfg.max_failure_fraction:
            raise ExperimentError(out.failures, len(probes), cfg.max_failure_fraction, "probe projections")
    return out


# ---------------------- Experimento de tasa ----------------------
def manifold_fill_distance(cloud: PointCloud, manifold: ReferenceManifold, reference: Optional[int] = None) -> float:
    """h_n de una muestra de ℳ contra una malla de referencia densa (8n puntos por defecto)."""
    m = reference or 8 * len(cloud)
    ref = PointCloud(manifold.reference_points(m))
    return directed_distance(ref, cloud)


def mmls_rate_experiment(manifold: ReferenceManifold, cfg: MmlsConfig, n_grid: Sequence[int], trials: int,
                         master_seed: int, probes: int = 64, rounding_floor: float = 1e-10) -> RateReport:
    """
    Entrada:
        - manifold con distancia exacta, cfg, n_grid (≥ 4 tamaños), trials, master_seed.
    Qué hace:
        - Por ensayo: muestrea ℳ, proyecta `probes` puntos de referencia sobre ℳ,
          mide max d(𝒫(p), ℳ) (término unilateral de Hausdorff) y h_n medido.
        - Ajusta la pendiente del error vs h_n (teoría k = degree + 1) y, como serie
          auxiliar, la del residuo J1 máximo.
    Salida esperada:
        - RateReport (target "mmls") con el fill distance de las sondas en auxiliary.
    """
    grid = [int(n) for n in n_grid]
    if len(grid) < 4 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ArgumentError(f"n_grid must hold >= 4 strictly increasing sizes, got {grid}")
    if int(trials) < 1:
        raise ArgumentError(f"trials must be >= 1, got {trials}")
    probe_cloud = PointCloud(manifold.reference_points(probes))
    probe_fill = manifold_fill_distance(probe_cloud, manifold, 64 * probes)
    eid = experiment_id("mmls")
    records: List[TrialRecord] = []
    for n in grid:
        for t in range(int(trials)):
            samples = sample_manifold(manifold, n, derive_stream(master_seed, eid, n, t))
            rec = reconstruct_manifold(samples, probe_cloud, cfg)
            err = float(np.max(manifold.distance(rec.cloud.points))) if len(rec.cloud) else math.nan
            residual = max((d.residual for d in rec.diagnostics if d.failure is None), default=math.nan)
            h = manifold_fill_distance(samples, manifold)
            logger.debug("[mmls] n=%d trial=%d err=%.3e h=%.3e", n, t, err, h)
            records.append(TrialRecord(n, t, err, h_measured=h, failures=rec.failures, fits=len(probe_cloud),
                                       auxiliary={"j1_residual": residual, "probe_fill": probe_fill}))
    report = summarize("mmls", records, "median", "h", rounding_floor)
    auxiliary_slope(report, "j1_residual", "h", "median", rounding_floor)
    logger.info("[mmls] %s degree=%d slope=%s", manifold.kind, cfg.degree,
                "n/a" if report.slope is None else f"{report.slope:.3f}")
    return report


def rigid_motion(cloud: PointCloud, rotation: np.ndarray, shift: np.ndarray) -> PointCloud:
    """Aplica x ↦ R x + b a una nube ambiental."""
    R = np.asarray(rotation, dtype=float)
    if not np.allclose(R.T @ R, np.eye(R.shape[0]), atol=1e-12):
        raise ArgumentError("rotation matrix is not orthogonal")
    return PointCloud(cloud.points @ R.T + np.asarray(shift, dtype=float), dim=cloud.dim)
