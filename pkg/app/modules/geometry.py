# app/modules/geometry.py
"""
Geometría de conjuntos de puntos: dominios, índice espacial (k-d tree),
distancia de relleno (fill distance), separación, distancia de Hausdorff
y enumeración de multi-índices.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gamma

from .errors import ArgumentError, DomainError

logger = logging.getLogger("mlslab.geometry")

DOMAIN_SHAPES = ("unit-cube", "ball", "periodic-cube")

# Por debajo de este tamaño no se construye árbol: barrido directo.
BRUTE_FORCE_BELOW = 32

# Bloques para barridos densos (evita matrices enormes en memoria)
_CHUNK = 65536

# Tolerancia relativa para detectar empates de distancia en el k-d tree
_TIE_RTOL = 1e-12


def _norms(diff: np.ndarray) -> np.ndarray:
    """Norma euclídea por filas. Todas las distancias del módulo pasan por aquí."""
    return np.linalg.norm(diff, axis=-1)


# ---------------------- Multi-índices ----------------------
@dataclass(frozen=True)
class MultiIndex:
    """
    Multi-índice α = (α_1, ..., α_d) de enteros no negativos.
    order = |α| = Σ α_j.
    """

    entries: Tuple[int, ...]

    def __post_init__(self):
        ent = tuple(int(e) for e in self.entries)
        if not ent:
            raise ArgumentError("multi-index needs at least one entry")
        if any(e < 0 for e in ent):
            raise ArgumentError(f"multi-index entries must be nonnegative, got {ent}")
        object.__setattr__(self, "entries", ent)

    @classmethod
    def zero(cls, d: int) -> "MultiIndex":
        return cls((0,) * d)

    @classmethod
    def unit(cls, d: int, j: int) -> "MultiIndex":
        ent = [0] * d
        ent[j] = 1
        return cls(tuple(ent))

    @classmethod
    def parse(cls, text: str) -> "MultiIndex":
        """Convierte "1,0" en MultiIndex((1, 0))."""
        try:
            return cls(tuple(int(p) for p in str(text).split(",") if p.strip() != ""))
        except ValueError as e:
            raise ArgumentError(f"invalid multi-index '{text}': {e}") from e

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def order(self) -> int:
        return sum(self.entries)

    def leq(self, other: "MultiIndex") -> bool:
        """Orden parcial componente a componente."""
        return all(a <= b for a, b in zip(self.entries, other.entries))

    def __add__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a + b for a, b in zip(self.entries, other.entries)))

    def __sub__(self, other: "MultiIndex") -> "MultiIndex":
        return MultiIndex(tuple(a - b for a, b in zip(self.entries, other.entries)))

    def factorial(self) -> int:
        return math.prod(math.factorial(e) for e in self.entries)

    def binomial(self, other: "MultiIndex") -> int:
        """C(α, ζ) = Π_j C(α_j, ζ_j)."""
        return math.prod(math.comb(a, b) for a, b in zip(self.entries, other.entries))

    def lower_set(self) -> List["MultiIndex"]:
        """Todos los ζ ≤ α en orden graduado-lexicográfico."""
        ranges = [range(e + 1) for e in self.entries]
        out = [MultiIndex(t) for t in itertools.product(*ranges)]
        return sorted(out, key=lambda m: (m.order, m.entries))

    def power(self, x: np.ndarray) -> np.ndarray:
        """x^α por filas (x de forma (m, d))."""
        x = np.atleast_2d(x)
        out = np.ones(x.shape[0])
        for j, e in enumerate(self.entries):
            if e:
                out = out * x[:, j] ** e
        return out

    def __str__(self) -> str:
        return ",".join(str(e) for e in self.entries)


@lru_cache(maxsize=None)
def _multi_indices(d: int, max_order: int) -> Tuple[MultiIndex, ...]:
    combos = [t for t in itertools.product(range(max_order + 1), repeat=d) if sum(t) <= max_order]
    combos.sort(key=lambda t: (sum(t), t))
    return tuple(MultiIndex(t) for t in combos)


def enumerate_multi_indices(d: int, max_order: int) -> List[MultiIndex]:
    """
    Parámetros:
        d (int): dimensión (≥ 1).
        max_order (int): orden total máximo (≥ 0).

    Retorna:
        list[MultiIndex]: todos los α con |α| ≤ max_order en orden
        graduado-lexicográfico; longitud C(d + max_order, d).
    """
    if d < 1:
        raise ArgumentError(f"dimension must be >= 1, got {d}")
    if max_order < 0:
        raise ArgumentError(f"max_order must be >= 0, got {max_order}")
    return list(_multi_indices(int(d), int(max_order)))


# ---------------------- Dominios ----------------------
@dataclass(frozen=True)
class Domain:
    """
    Dominio Ω ⊂ ℝ^d: cubo unitario [0,1]^d, bola centrada en el origen
    o cubo periódico [0,1)^d (toro, sin frontera).
    """

    shape: str
    dim: int
    radius: float = 1.0

    def __post_init__(self):
        if self.shape not in DOMAIN_SHAPES:
            raise ArgumentError(f"unknown domain shape '{self.shape}', expected one of {DOMAIN_SHAPES}")
        if int(self.dim) < 1:
            raise ArgumentError(f"domain dimension must be >= 1, got {self.dim}")
        if not self.radius > 0:
            raise ArgumentError(f"ball radius must be > 0, got {self.radius}")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "radius", float(self.radius))

    @classmethod
    def unit_cube(cls, d: int) -> "Domain":
        return cls("unit-cube", d)

    @classmethod
    def ball(cls, d: int, radius: float = 1.0) -> "Domain":
        return cls("ball", d, radius)

    @classmethod
    def periodic_cube(cls, d: int) -> "Domain":
        return cls("periodic-cube", d)

    @property
    def periodic(self) -> bool:
        return self.shape == "periodic-cube"

    @property
    def boxsize(self) -> Optional[float]:
        return 1.0 if self.periodic else None

    def volume(self) -> float:
        if self.shape == "ball":
            return unit_ball_volume(self.dim) * self.radius ** self.dim
        return 1.0

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.shape == "ball":
            return np.full(self.dim, -self.radius), np.full(self.dim, self.radius)
        return np.zeros(self.dim), np.ones(self.dim)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Máscara booleana de pertenencia por fila."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ArgumentError(f"points have dimension {pts.shape[1]}, domain has {self.dim}")
        if self.shape == "unit-cube":
            return np.all((pts >= 0.0) & (pts <= 1.0), axis=1)
        if self.shape == "periodic-cube":
            return np.all((pts >= 0.0) & (pts < 1.0), axis=1)
        return _norms(pts) <= self.radius * (1.0 + 1e-12)

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """a − b; en el cubo periódico con convención de imagen mínima."""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.periodic:
            diff = diff - np.round(diff)
        return diff

    def cone_parameters(self) -> Optional[Tuple[float, float]]:
        """
        (θ, r) de la condición de cono interior.
        Cubo: θ = arcsin(1/√d), r = 1/2. Bola de radio R: θ = π/3, r = R.
        Cubo periódico: None (no tiene frontera).
        """
        if self.shape == "unit-cube":
            return math.asin(1.0 / math.sqrt(self.dim)), 0.5
        if self.shape == "ball":
            return math.pi / 3.0, self.radius
        return None

    def candidate_grid(self, resolution: int) -> np.ndarray:
        """
        Malla tensorial determinista G(resolution) ⊂ Ω usada por fill_distance.
        Bola: malla sobre la caja envolvente filtrada por pertenencia.
        """
        if int(resolution) < 2:
            raise ArgumentError(f"grid resolution must be >= 2, got {resolution}")
        res = int(resolution)
        if self.periodic:
            axis = np.linspace(0.0, 1.0, res, endpoint=False)
        elif self.shape == "ball":
            axis = np.linspace(-self.radius, self.radius, res)
        else:
            axis = np.linspace(0.0, 1.0, res)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=1)
        if self.shape == "ball":
            grid = grid[self.contains(grid)]
            if grid.shape[0] == 0:
                raise ArgumentError(f"grid resolution {res} leaves no candidate inside the ball")
        return grid

    def grid_cell_diameter(self, resolution: int) -> float:
        """Diámetro de celda de G(resolution): cota del error de fill_distance."""
        lo, hi = self.bounding_box()
        steps = max(int(resolution) - (0 if self.periodic else 1), 1)
        return float(np.max(hi - lo)) / steps * math.sqrt(self.dim)

    def interior_probes(self, per_axis: int) -> np.ndarray:
        """Malla interior determinista de puntos de prueba (centros de celda)."""
        m = max(int(per_axis), 1)
        axis = (np.arange(m) + 0.5) / m
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        if self.shape == "ball":
            pts = (2.0 * pts - 1.0) * 0.8 * self.radius
            pts = pts[self.contains(pts)]
        return pts

    def boundary_probes(self) -> np.ndarray:
        """Puntos de prueba en frontera/esquina (vacío en el cubo periódico)."""
        if self.periodic:
            return np.empty((0, self.dim))
        if self.shape == "ball":
            p = np.zeros((1, self.dim))
            p[0, 0] = self.radius
            return p
        corner = np.zeros(self.dim)
        face = np.full(self.dim, 0.5)
        face[0] = 0.0
        if self.dim == 1:
            return corner[None, :]
        return np.stack([corner, face])

    def ball_fraction(self, center: Sequence[float], radius: float, per_axis: Optional[int] = None) -> float:
        """
        Fracción de vol(B(center, radius)) contenida en Ω, por cuadratura de
        punto medio determinista. En el cubo periódico vale 1.
        """
        if self.periodic:
            return 1.0
        c = np.asarray(center, dtype=float)
        m = per_axis or {1: 4096, 2: 256, 3: 48}.get(self.dim, 16)
        axis = -radius + (np.arange(m) + 0.5) * (2.0 * radius / m)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        offs = np.stack([g.ravel() for g in mesh], axis=1)
        offs = offs[_norms(offs) <= radius]
        if offs.shape[0] == 0:
            return 1.0
        return float(np.mean(self.contains(c + offs)))


def unit_ball_volume(d: int) -> float:
    """ω_d = π^{d/2} / Γ(d/2 + 1)."""
    return float(math.pi ** (d / 2.0) / gamma(d / 2.0 + 1.0))


# ---------------------- Nube de puntos ----------------------
class PointCloud:
    """
    Conjunto inmutable X_n = {x_1, ..., x_n} con índice espacial.

    - points: matriz (n, dim) de solo lectura.
    - domain: dominio dueño (None para nubes ambientales, p.ej. muestras de variedades).
    - parameters: parámetros verdaderos opcionales (muestras de variedades).
    - index: cKDTree con cortes por mediana y hojas de 32 puntos;
      None por debajo de BRUTE_FORCE_BELOW puntos.
    """

    __slots__ = ("points", "domain", "parameters", "index")

    def __init__(self, points, domain: Optional[Domain] = None,
                 parameters: Optional[np.ndarray] = None, dim: Optional[int] = None):
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            width = dim if dim is not None else (domain.dim if domain else (pts.shape[1] if pts.ndim == 2 else 0))
            pts = np.empty((0, int(width)))
        elif pts.ndim == 1:
            pts = pts.reshape(-1, 1) if (domain is None or domain.dim == 1) else pts.reshape(1, -1)
        if pts.ndim != 2:
            raise ArgumentError(f"points must be a 2-D array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point cloud contains non-finite coordinates")
        if domain is not None:
            if pts.shape[1] != domain.dim:
                raise ArgumentError(f"points have dimension {pts.shape[1]}, domain has {domain.dim}")
            if pts.shape[0] and not np.all(domain.contains(pts)):
                bad = int(np.flatnonzero(~domain.contains(pts))[0])
                raise DomainError(f"point {bad} lies outside the {domain.shape} domain")
        pts = pts.copy()
        pts.flags.writeable = False
        params = None
        if parameters is not None:
            params = np.array(parameters, dtype=float).reshape(pts.shape[0], -1)
            params.flags.writeable = False

        self.points = pts
        self.domain = domain
        self.parameters = params
        self.index = None
        if pts.shape[0] >= BRUTE_FORCE_BELOW:
            boxsize = domain.boxsize if domain is not None else None
            self.index = cKDTree(pts, leafsize=BRUTE_FORCE_BELOW, balanced_tree=True, boxsize=boxsize)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __repr__(self) -> str:
        shape = self.domain.shape if self.domain else "ambient"
        return f"PointCloud(n={len(self)}, dim={self.dim}, domain={shape})"

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.domain is not None:
            return self.domain.displacement(a, b)
        return np.asarray(a, dtype=float) - np.asarray(b, dtype=float)

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        """Índice de la muestra más cercana a cada consulta (empates → menor índice)."""
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if len(self) == 0:
            raise DomainError("nearest-neighbor query on an empty cloud")
        if self.index is not None:
            if self.domain is not None and self.domain.periodic:
                q = np.mod(q, 1.0)
            dist, idx = self.index.query(q, k=2)
            best = np.asarray(idx[:, 0], dtype=int)
            # cKDTree no fija el desempate: se resuelve con las normas exactas
            for i in np.flatnonzero(dist[:, 1] <= dist[:, 0] * (1.0 + _TIE_RTOL)):
                cand = np.asarray(self.index.query_ball_point(q[i], dist[i, 0] * (1.0 + _TIE_RTOL) + 1e-300), dtype=int)
                d = _norms(self.displacement(q[i], self.points[cand]))
                best[i] = int(cand[d == d.min()].min())
            return best
        out = np.empty(q.shape[0], dtype=int)
        for s in range(0, q.shape[0], _CHUNK):
            block = q[s:s + _CHUNK]
            dist = _norms(self.displacement(block[:, None, :], self.points[None, :, :]))
            out[s:s + _CHUNK] = np.argmin(dist, axis=1)
        return out

    def nearest_distance(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        idx = self.nearest(q)
        return _norms(self.displacement(q, self.points[idx]))

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Copia con otras coordenadas (mismo dominio); la nube original no cambia."""
        return PointCloud(points, self.domain, dim=self.dim)


def _as_vector(center, dim: int) -> np.ndarray:
    c = np.asarray(center, dtype=float).ravel()
    if c.shape[0] != dim:
        raise ArgumentError(f"center has dimension {c.shape[0]}, cloud has {dim}")
    return c


# ---------------------- Operaciones ----------------------
def range_query(cloud: PointCloud, center, radius: float) -> List[int]:
    """
    Índices i con ‖x_i − center‖₂ ≤ radius, en orden ascendente.
    La frontera es inclusiva.
    """
    c = _as_vector(center, cloud.dim)
    if radius < 0:
        raise ArgumentError(f"radius must be >= 0, got {radius}")
    if len(cloud) == 0:
        return []
    if cloud.index is not None:
        q = np.mod(c, 1.0) if (cloud.domain is not None and cloud.domain.periodic) else c
        # radio inflado; el filtro exacto de abajo decide
        cand = np.asarray(cloud.index.query_ball_point(q, radius * (1.0 + 1e-9) + 1e-12), dtype=int)
        if cand.size == 0:
            return []
    else:
        cand = np.arange(len(cloud))
    dist = _norms(cloud.displacement(cloud.points[cand], c))
    hits = np.sort(cand[dist <= radius])
    return hits.tolist()


def fill_distance(cloud: PointCloud, domain: Domain, resolution: int) -> float:
    """
    Entrada:
        - cloud (PointCloud): muestras X_n (no vacía).
        - domain (Domain): dominio Ω.
        - resolution (int): puntos por eje de la malla candidata (≥ 2).
    Qué hace:
        - Calcula max_{g ∈ G} min_i ‖g − x_i‖ sobre la malla G(resolution) ⊂ Ω.
    Salida esperada:
        - float: aproximación inferior de h_n; el error es ≤ domain.grid_cell_diameter(resolution).
    """
    if len(cloud) == 0:
        raise DomainError("fill distance of an empty cloud is undefined")
    if cloud.dim != domain.dim:
        raise ArgumentError(f"cloud dimension {cloud.dim} != domain dimension {domain.dim}")
    grid = domain.candidate_grid(resolution)
    logger.debug("[geometry] fill distance n=%d grid=%d", len(cloud), grid.shape[0])
    best = 0.0
    for s in range(0, grid.shape[0], _CHUNK):
        block = grid[s:s + _CHUNK]
        idx = cloud.nearest(block)
        best = max(best, float(_norms(domain.displacement(block, cloud.points[idx])).max()))
    return best


def separation(cloud: PointCloud) -> float:
    """min_{i<j} ‖x_i − x_j‖ vía el índice espacial (0 si hay puntos repetidos)."""
    n = len(cloud)
    if n < 2:
        raise DomainError(f"separation needs at least 2 points, got {n}")
    pts = cloud.points
    if cloud.index is None:
        i, j = np.triu_indices(n, k=1)
        return float(_norms(cloud.displacement(pts[i], pts[j])).min())
    q = np.mod(pts, 1.0) if (cloud.domain is not None and cloud.domain.periodic) else pts
    _, nn = cloud.index.query(q, k=2)
    own = np.arange(n)
    # con duplicados el propio punto puede salir segundo
    other = np.where(nn[:, 1] == own, nn[:, 0], nn[:, 1])
    return float(_norms(cloud.displacement(pts, pts[other])).min())


def _directed(src: PointCloud, dst: PointCloud) -> float:
    best = 0.0
    for s in range(0, len(src), _CHUNK):
        block = src.points[s:s + _CHUNK]
        idx = dst.nearest(block)
        best = max(best, float(_norms(src.displacement(block, dst.points[idx])).max()))
    return best


def hausdorff_distance(a: PointCloud, b: PointCloud) -> float:
    """max(sup_{p∈a} d(p, b), sup_{q∈b} d(q, a)); simétrica."""
    if len(a) == 0 or len(b) == 0:
        raise DomainError("Hausdorff distance needs two nonempty clouds")
    if a.dim != b.dim:
        raise ArgumentError(f"ambient dimensions differ: {a.dim} vs {b.dim}")
    return max(_directed(a, b), _directed(b, a))


def directed_distance(src: PointCloud, dst: PointCloud) -> float:
    """Término unilateral sup_{p∈src} d(p, dst)."""
    if len(src) == 0 or len(dst) == 0:
        raise DomainError("directed distance needs two nonempty clouds")
    return _directed(src, dst)

