# app/modules/sampling.py
"""
Muestreadores i.i.d. deterministas (con semilla) para densidades de razón
acotada sobre dominios y para variedades de referencia en ℝ^D.

Toda la aleatoriedad sale de numpy.random.Generator(Philox(SeedSequence(...))):
un generador por contador, así cada ensayo t del experimento e usa su propio
flujo derive_stream(master_seed, e, n, t) sin solaparse con los demás.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
from scipy.optimize import least_squares

from .errors import ArgumentError, ConfigError, DomainError
from .geometry import Domain, PointCloud

logger = logging.getLogger("mlslab.sampling")

SeedLike = Union[int, np.random.SeedSequence]

DENSITY_KINDS = ("uniform", "bounded-ratio")
DENSITY_PROFILES = ("cosine",)
MANIFOLD_KINDS = ("circle", "sphere", "graph")

# Tasa mínima de aceptación del muestreo por rechazo
MIN_ACCEPTANCE = 1e-4

# Holgura numérica al comparar p/uniforme contra las cotas
_RATIO_TOL = 1e-9

_MASK64 = (1 << 64) - 1


# ---------------------- Flujos aleatorios ----------------------
def experiment_id(name: str) -> int:
    """Identificador estable de experimento (CRC32 del nombre)."""
    return zlib.crc32(name.encode("utf-8"))


def derive_stream(master_seed: int, *keys: int) -> np.random.SeedSequence:
    """SeedSequence hija de master_seed con clave de derivación `keys`."""
    return np.random.SeedSequence(int(master_seed) & _MASK64, spawn_key=tuple(int(k) for k in keys))


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(ss))


def _quadrature_grid(domain: Domain) -> np.ndarray:
    """Centros de celda dentro de Ω para cuadraturas deterministas."""
    m = {1: 4096, 2: 256, 3: 48}.get(domain.dim, 12)
    lo, hi = domain.bounding_box()
    axes = [lo[j] + (np.arange(m) + 0.5) * (hi[j] - lo[j]) / m for j in range(domain.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([g.ravel() for g in mesh], axis=1)
    return grid[domain.contains(grid)]


# ---------------------- Densidades ----------------------
@dataclass(frozen=True)
class Density:
    """
    Densidad "bien comportada": c_lower·uniforme ≤ p ≤ c_upper·uniforme.

    - uniform: p = 1/vol(Ω).
    - bounded-ratio, perfil "cosine": p/uniforme ∝ 1 + a·Π_j cos(2π u_j),
      con u las coordenadas normalizadas a la caja envolvente.
    - c_lower/c_upper en None: se derivan del perfil normalizado sobre Ω
      ((1 ∓ a) / media del perfil), ver bounds().
    """

    kind: str = "uniform"
    profile: str = "cosine"
    amplitude: float = 0.0
    c_lower: Optional[float] = 1.0
    c_upper: Optional[float] = 1.0

    def __post_init__(self):
        if self.kind not in DENSITY_KINDS:
            raise ArgumentError(f"unknown density kind '{self.kind}'")
        if self.profile not in DENSITY_PROFILES:
            raise ArgumentError(f"unknown density profile '{self.profile}'")
        if not 0.0 <= self.amplitude < 1.0:
            raise ArgumentError(f"profile amplitude must lie in [0, 1), got {self.amplitude}")
        given = [c for c in (self.c_lower, self.c_upper) if c is not None]
        if any(c <= 0.0 for c in given) or (len(given) == 2 and self.c_lower > self.c_upper):
            raise ArgumentError(f"need 0 < c_lower <= c_upper, got {self.c_lower}, {self.c_upper}")

    @classmethod
    def uniform(cls) -> "Density":
        return cls()

    @classmethod
    def bounded_ratio(cls, amplitude: float = 0.5, profile: str = "cosine",
                      c_lower: Optional[float] = None, c_upper: Optional[float] = None) -> "Density":
        """Sin cotas explícitas, bounds() las deriva del perfil normalizado en cada dominio."""
        return cls("bounded-ratio", profile, amplitude, c_lower, c_upper)

    def bounds(self, domain: Domain) -> Tuple[float, float]:
        """(c_lower, c_upper) efectivas sobre `domain`."""
        mean = _profile_mean(self, domain)
        lo = (1.0 - self.amplitude) / mean if self.c_lower is None else self.c_lower
        hi = (1.0 + self.amplitude) / mean if self.c_upper is None else self.c_upper
        return lo, hi

    def _raw(self, points: np.ndarray, domain: Domain) -> np.ndarray:
        pts = np.atleast_2d(points)
        if self.kind == "uniform" or self.amplitude == 0.0:
            return np.ones(pts.shape[0])
        lo, hi = domain.bounding_box()
        u = (pts - lo) / (hi - lo)
        return 1.0 + self.amplitude * np.prod(np.cos(2.0 * math.pi * u), axis=1)

    def ratio(self, points: np.ndarray, domain: Domain) -> np.ndarray:
        """p(x) / (1/vol Ω), normalizada para integrar 1 sobre Ω."""
        return self._raw(points, domain) / _profile_mean(self, domain)

    def pdf(self, points: np.ndarray, domain: Domain) -> np.ndarray:
        return self.ratio(points, domain) / domain.volume()

    def validate(self, domain: Domain) -> Tuple[float, float, float]:
        """
        Verifica las invariantes en la malla de prueba:
        c_lower ≤ p/uniforme ≤ c_upper y ∫p = 1 (± 1e-6).
        Retorna (min razón, max razón, integral).
        """
        grid = _quadrature_grid(domain)
        r = self.ratio(grid, domain)
        integral = float(np.mean(r))
        lo, hi = self.bounds(domain)
        if r.min() < lo - _RATIO_TOL or r.max() > hi + _RATIO_TOL:
            raise ConfigError(
                "sampling.c_lower",
                f"density ratio range [{r.min():.4f}, {r.max():.4f}] escapes [{lo:.4f}, {hi:.4f}]",
            )
        if abs(integral - 1.0) > 1e-6:
            raise ConfigError("sampling.profile", f"density integrates to {integral:.8f}, not 1")
        return float(r.min()), float(r.max()), integral


@lru_cache(maxsize=64)
def _profile_mean(density: Density, domain: Domain) -> float:
    if density.kind == "uniform" or density.amplitude == 0.0:
        return 1.0
    grid = _quadrature_grid(domain)
    return float(np.mean(density._raw(grid, domain)))


def _uniform_on(domain: Domain, rng: np.random.Generator, m: int) -> np.ndarray:
    if domain.shape == "ball":
        g = rng.standard_normal((m, domain.dim))
        g /= np.linalg.norm(g, axis=1)[:, None]
        r = domain.radius * rng.random(m) ** (1.0 / domain.dim)
        return g * r[:, None]
    return rng.random((m, domain.dim))


def sample_iid(density: Density, domain: Domain, n: int, seed: SeedLike) -> PointCloud:
    """
    Parámetros:
        density (Density): densidad de razón acotada.
        domain (Domain): dominio Ω.
        n (int): número de muestras (≥ 1).
        seed (int | SeedSequence): semilla; misma (seed, n) → salida idéntica bit a bit.

    Retorna:
        PointCloud: n puntos i.i.d. por rechazo contra la uniforme con envolvente c_upper.
    """
    if int(n) < 1:
        raise ArgumentError(f"sample size must be >= 1, got {n}")
    n = int(n)
    rng = make_rng(seed)
    if density.kind == "uniform" or density.amplitude == 0.0:
        return PointCloud(_uniform_on(domain, rng, n), domain)

    _, c_upper = density.bounds(domain)
    if 1.0 / c_upper < MIN_ACCEPTANCE:
        raise ConfigError("sampling.c_upper", f"acceptance rate {1.0 / c_upper:.2e} below {MIN_ACCEPTANCE:.0e}")
    accepted = []
    count = proposed = 0
    batch = max(64, int(math.ceil(1.2 * n * c_upper)))
    while count < n:
        cand = _uniform_on(domain, rng, batch)
        u = rng.random(batch)
        ratio = density.ratio(cand, domain)
        if ratio.max() > c_upper + _RATIO_TOL:
            # el rechazo exige p/uniforme ≤ c_upper en todo Ω
            raise ConfigError("sampling.c_upper", f"density ratio {ratio.max():.4f} exceeds the envelope c_upper={c_upper:.4f}")
        keep = cand[u * c_upper <= ratio]
        proposed += batch
        accepted.append(keep)
        count += keep.shape[0]
        if proposed >= 10 * batch and count / proposed < MIN_ACCEPTANCE:
            raise ConfigError("sampling.profile", f"rejection acceptance {count / proposed:.2e} too low (density too spiky)")
    pts = np.concatenate(accepted, axis=0)[:n]
    logger.debug("[sampling] rejection n=%d proposed=%d acceptance=%.3f", n, proposed, count / proposed)
    return PointCloud(pts, domain)


# ---------------------- Variedades de referencia ----------------------
@dataclass(frozen=True)
class ReferenceManifold:
    """
    Variedad cerrada ℳ ⊂ ℝ^D de dimensión intrínseca d.

    - circle: círculo de radio `radius` en ℝ².
    - sphere: esfera de radio `radius` en ℝ³.
    - graph: gráfica (u, φ(u)), u ∈ [0,1)^d, con alturas periódicas C^∞
      φ_k(u) = a/(k+1) · Σ_j sin(2π(k+1)u_j). Con a = 0 es un hiperplano.
    """

    kind: str
    dim: int
    ambient_dim: int
    radius: float = 1.0
    amplitude: float = 0.1
    smoothness: float = field(default=math.inf)

    def __post_init__(self):
        if self.kind not in MANIFOLD_KINDS:
            raise ArgumentError(f"unknown manifold '{self.kind}'")
        if self.kind == "circle" and (self.dim, self.ambient_dim) != (1, 2):
            raise ArgumentError("circle is a 1-manifold in R^2")
        if self.kind == "sphere" and (self.dim, self.ambient_dim) != (2, 3):
            raise ArgumentError("sphere is a 2-manifold in R^3")
        if self.kind == "graph" and not (1 <= self.dim <= 2 and self.ambient_dim > self.dim):
            raise ArgumentError(f"graph manifold needs d in {{1, 2}} and D > d, got d={self.dim}, D={self.ambient_dim}")
        if not self.radius > 0:
            raise ArgumentError(f"radius must be > 0, got {self.radius}")

    @classmethod
    def circle(cls, radius: float = 1.0) -> "ReferenceManifold":
        return cls("circle", 1, 2, radius=radius)

    @classmethod
    def sphere(cls, radius: float = 1.0) -> "ReferenceManifold":
        return cls("sphere", 2, 3, radius=radius)

    @classmethod
    def graph(cls, d: int = 1, ambient_dim: int = 2, amplitude: float = 0.1) -> "ReferenceManifold":
        return cls("graph", d, ambient_dim, amplitude=amplitude)

    # --- gráfica ---
    def heights(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        cols = []
        for k in range(self.ambient_dim - self.dim):
            cols.append(self.amplitude / (k + 1) * np.sum(np.sin(2.0 * math.pi * (k + 1) * u), axis=1))
        return np.stack(cols, axis=1)

    def height_jacobian(self, u: np.ndarray) -> np.ndarray:
        """J[m, k, j] = ∂φ_k/∂u_j en el parámetro u_m."""
        u = np.atleast_2d(u)
        rows = []
        for k in range(self.ambient_dim - self.dim):
            rows.append(2.0 * math.pi * self.amplitude * np.cos(2.0 * math.pi * (k + 1) * u))
        return np.stack(rows, axis=1)

    def area_element(self, u: np.ndarray) -> np.ndarray:
        jac = self.height_jacobian(u)
        eye = np.eye(self.dim)[None, :, :]
        metric = eye + np.einsum("mkj,mkl->mjl", jac, jac)
        return np.sqrt(np.linalg.det(metric))

    def _area_envelope(self) -> float:
        frob2 = (self.ambient_dim - self.dim) * self.dim * (2.0 * math.pi * self.amplitude) ** 2
        return math.sqrt((1.0 + frob2 / self.dim) ** self.dim)

    def embed(self, u: np.ndarray) -> np.ndarray:
        """Parámetros → puntos ambientales."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.kind == "circle":
            t = u[:, 0]
            return self.radius * np.stack([np.cos(t), np.sin(t)], axis=1)
        if self.kind == "sphere":
            polar, azim = u[:, 0], u[:, 1]
            return self.radius * np.stack(
                [np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)], axis=1
            )
        return np.concatenate([u, self.heights(u)], axis=1)

    def volume(self) -> float:
        if self.kind == "circle":
            return 2.0 * math.pi * self.radius
        if self.kind == "sphere":
            return 4.0 * math.pi * self.radius ** 2
        return float(np.mean(self.area_element(_quadrature_grid(Domain.periodic_cube(self.dim)))))

    def reference_points(self, m: int) -> np.ndarray:
        """m puntos deterministas sobre ℳ (malla de referencia)."""
        m = max(int(m), 1)
        if self.kind == "circle":
            return self.embed((2.0 * math.pi * np.arange(m) / m)[:, None])
        if self.kind == "sphere":
            # retícula de Fibonacci
            k = np.arange(m) + 0.5
            polar = np.arccos(1.0 - 2.0 * k / m)
            azim = np.mod(math.pi * (1.0 + math.sqrt(5.0)) * k, 2.0 * math.pi)
            return self.embed(np.stack([polar, azim], axis=1))
        per_axis = max(int(round(m ** (1.0 / self.dim))), 1)
        axis = np.arange(per_axis) / per_axis
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return self.embed(np.stack([g.ravel() for g in mesh], axis=1))

    def distance(self, points: np.ndarray) -> np.ndarray:
        """
        Distancia exacta punto-variedad.
        Círculo/esfera: | ‖p‖ − R |. Gráfica: minimización numérica en el
        parámetro (multi-arranque, tolerancia certificada 1e-10 en el gradiente).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.ambient_dim:
            raise ArgumentError(f"points have dimension {pts.shape[1]}, manifold lives in R^{self.ambient_dim}")
        if self.kind in ("circle", "sphere"):
            return np.abs(np.linalg.norm(pts, axis=1) - self.radius)
        return np.array([self._graph_distance(p) for p in pts])

    def _graph_distance(self, p: np.ndarray) -> float:
        d = self.dim

        def resid(u):
            return self.embed(u[None, :])[0] - p

        def jac(u):
            return np.concatenate([np.eye(d), self.height_jacobian(u[None, :])[0]], axis=0)

        best = math.inf
        best_grad = 0.0
        offsets = np.array(np.meshgrid(*([[-0.1, 0.0, 0.1]] * d), indexing="ij")).reshape(d, -1).T
        for off in offsets:
            sol = least_squares(resid, p[:d] + off, jac=jac, xtol=1e-15, ftol=1e-15, gtol=1e-15)
            dist = float(np.linalg.norm(sol.fun))
            if dist < best:
                best = dist
                best_grad = float(np.linalg.norm(sol.jac.T @ sol.fun))
        if best_grad > 1e-10:
            logger.warning("[sampling] graph distance not certified: |grad|=%.2e at p=%s", best_grad, p)
        return best


def sample_manifold(manifold: ReferenceManifold, n: int, seed: SeedLike) -> PointCloud:
    """
    n muestras i.i.d. de la medida uniforme (de área) de ℳ.
    Círculo por ángulo, esfera por gaussianas normalizadas, gráfica por
    rechazo en el espacio de parámetros contra el elemento de área.
    La nube resultante guarda los parámetros verdaderos en `parameters`.
    """
    if int(n) < 1:
        raise ArgumentError(f"sample size must be >= 1, got {n}")
    n = int(n)
    rng = make_rng(seed)
    if manifold.kind == "circle":
        params = (2.0 * math.pi * rng.random(n))[:, None]
        pts = manifold.embed(params)
    elif manifold.kind == "sphere":
        g = rng.standard_normal((n, 3))
        g /= np.linalg.norm(g, axis=1)[:, None]
        pts = manifold.radius * g
        params = np.stack([np.arccos(np.clip(g[:, 2], -1.0, 1.0)), np.mod(np.arctan2(g[:, 1], g[:, 0]), 2.0 * math.pi)], axis=1)
    else:
        env = manifold._area_envelope()
        chunks = []
        count = 0
        while count < n:
            cand = rng.random((max(64, 2 * n), manifold.dim))
            keep = cand[rng.random(cand.shape[0]) * env <= manifold.area_element(cand)]
            chunks.append(keep)
            count += keep.shape[0]
        params = np.concatenate(chunks, axis=0)[:n]
        pts = manifold.embed(params)
    cloud = PointCloud(pts, None, parameters=params)
    if manifold.kind != "graph":
        gap = float(np.max(manifold.distance(cloud.points)))
        if gap > 1e-12:
            raise DomainError(f"manifold sample left the manifold by {gap:.2e}")
    return cloud
