# app/modules/mls_engine.py
"""
Núcleo MLS: funciones de peso, base monomial escalada, matriz de Gram 𝒜_n,
resolución de coeficientes, funciones de forma a_i* y sus derivadas
analíticas, evaluación de s^MLS y de Q s^MLS.

Convención de derivadas: la base se centra en el punto de consulta x̂ y se
mantiene fija mientras x varía (el espacio Π^d_k es invariante por
traslación, así que s^MLS no depende del centro). Con eso sólo dependen de x
los pesos θ_h(x_i − x) y el lado derecho p(x):

    ∂^γ η = 𝒜⁻¹ (∂^γ p − Σ_{ζ<γ} C(γ,ζ) ∂^{γ−ζ}𝒜 ∂^ζ η)
    ∂^α a_i = Σ_{ζ≤α} C(α,ζ) ∂^{α−ζ}θ_h(x_i − x) · p(x_i)ᵀ ∂^ζ η
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la
from numpy.polynomial import Polynomial

from .errors import ArgumentError, IllConditionedError, InsufficientDataError
from .geometry import MultiIndex, PointCloud, enumerate_multi_indices, range_query

logger = logging.getLogger("mlslab.mls_engine")

WEIGHT_PROFILES = ("smooth-bump", "wendland-like", "indicator")
NORMALIZATIONS = ("per-count", "raw")
BANDWIDTH_RULES = ("rate", "fixed")

MAX_WEIGHT_DERIVATIVE = 4
WENDLAND_EXPONENT = 5

DEFAULT_C_D = 1.5
DEFAULT_LAMBDA_FLOOR = 1e-10

# exp(v) con v < -700 es 0 en doble precisión
_EXP_CUTOFF = -700.0


# ---------------------- Perfiles radiales ----------------------
@lru_cache(maxsize=None)
def _bump_polynomial(k: int) -> Polynomial:
    """g(ρ) = exp(1/(ρ−1)) ⇒ g^{(k)}(ρ) = P_k(v)·e^v con v = 1/(ρ−1), P_{k+1} = −v²(P_k' + P_k)."""
    if k == 0:
        return Polynomial([1.0])
    prev = _bump_polynomial(k - 1)
    return Polynomial([0.0, 0.0, -1.0]) * (prev.deriv() + prev)


def _profile_derivative(profile: str, k: int, rho: np.ndarray) -> np.ndarray:
    """k-ésima derivada del perfil g(ρ) dentro del soporte (ρ < 1)."""
    if profile == "smooth-bump":
        v = 1.0 / (rho - 1.0)
        out = np.zeros_like(rho)
        ok = v > _EXP_CUTOFF
        out[ok] = _bump_polynomial(k)(v[ok]) * np.exp(v[ok])
        return out
    if profile == "wendland-like":
        if k > WENDLAND_EXPONENT:
            return np.zeros_like(rho)
        coef = (-1.0) ** k * math.factorial(WENDLAND_EXPONENT) / math.factorial(WENDLAND_EXPONENT - k)
        return coef * (1.0 - rho) ** (WENDLAND_EXPONENT - k)
    # indicator (sólo para pruebas de cordura): discontinuo en la frontera
    return np.ones_like(rho) if k == 0 else np.zeros_like(rho)


@lru_cache(maxsize=None)
def _chain_terms(alpha: Tuple[int, ...]) -> Tuple[Tuple[int, Tuple[int, ...], int], ...]:
    """
    Desarrollo de ∂^α g(ρ(t)) con ρ = ‖t‖²/L² como suma de términos
    c · (2/L²)^k · g^{(k)}(ρ) · t^m; devuelve las tuplas (k, m, c).
    """
    d = len(alpha)
    terms: Dict[Tuple[int, Tuple[int, ...]], int] = {(0, (0,) * d): 1}
    for j, e in enumerate(alpha):
        for _ in range(e):
            nxt: Dict[Tuple[int, Tuple[int, ...]], int] = defaultdict(int)
            for (k, m), c in terms.items():
                up = list(m)
                up[j] += 1
                nxt[(k + 1, tuple(up))] += c
                if m[j] > 0:
                    down = list(m)
                    down[j] -= 1
                    nxt[(k, tuple(down))] += c * m[j]
            terms = {key: c for key, c in nxt.items() if c != 0}
    return tuple((k, m, c) for (k, m), c in sorted(terms.items()))


@dataclass(frozen=True)
class WeightFunction:
    """
    θ_h(t) = Φ(t/h), con Φ(u) = g(‖u/s‖²) soportada en B(0, s).

    - smooth-bump: g(ρ) = exp(1/(ρ−1)), C^∞ (Φ(0) = e^{-1}).
    - wendland-like: g(ρ) = (1−ρ)^5, C^4 en la frontera, más barata.
    - indicator: g ≡ 1 dentro del soporte; discontinua, sólo para pruebas.
    """

    profile: str = "smooth-bump"
    support: float = 1.0
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.profile not in WEIGHT_PROFILES:
            raise ArgumentError(f"unknown weight profile '{self.profile}', expected one of {WEIGHT_PROFILES}")
        if not self.support > 0:
            raise ArgumentError(f"support scale must be > 0, got {self.support}")
        if not self.bandwidth > 0:
            raise ArgumentError(f"bandwidth must be > 0, got {self.bandwidth}")

    @property
    def radius(self) -> float:
        """Radio del soporte s·h."""
        return self.support * self.bandwidth

    def with_bandwidth(self, h: float) -> "WeightFunction":
        return WeightFunction(self.profile, self.support, h)

    def __call__(self, t, deriv: Optional[MultiIndex] = None):
        return weight_eval(self, t, deriv)


def weight_eval(w: WeightFunction, t, deriv: Optional[MultiIndex] = None):
    """
    ∂^deriv θ_h(t), incluido el factor de la regla de la cadena h^{-|deriv|};
    exactamente 0 para ‖t‖ ≥ s·h. Acepta un vector (d,) o una matriz (m, d).
    """
    arr = np.asarray(t, dtype=float)
    single = arr.ndim <= 1
    pts = arr.reshape(1, -1) if single else arr
    d = pts.shape[1]
    alpha = deriv if deriv is not None else MultiIndex.zero(d)
    if alpha.dim != d:
        raise ArgumentError(f"derivative multi-index has dimension {alpha.dim}, point has {d}")
    if alpha.order > MAX_WEIGHT_DERIVATIVE:
        raise ArgumentError(f"weight derivatives up to order {MAX_WEIGHT_DERIVATIVE} supported, got {alpha.order}")

    L2 = w.radius ** 2
    rho = np.sum(pts * pts, axis=1) / L2
    inside = rho < 1.0
    out = np.zeros(pts.shape[0])
    if np.any(inside):
        ti, ri = pts[inside], rho[inside]
        acc = np.zeros(ri.shape[0])
        for k, m, c in _chain_terms(alpha.entries):
            mono = np.ones(ri.shape[0])
            for j, e in enumerate(m):
                if e:
                    mono = mono * ti[:, j] ** e
            acc += c * (2.0 / L2) ** k * _profile_derivative(w.profile, k, ri) * mono
        out[inside] = acc
    return float(out[0]) if single else out


# ---------------------- Ancho de banda ----------------------
@dataclass(frozen=True)
class Bandwidth:
    """
    Regla de ancho de banda:
      - fixed: h dado.
      - rate:  h = C_D · (vol · log n / n)^{1/d} (ley de radios del lema de conteo de vecinos).
    """

    rule: str = "rate"
    h: Optional[float] = None
    c_d: float = DEFAULT_C_D

    def __post_init__(self):
        if self.rule not in BANDWIDTH_RULES:
            raise ArgumentError(f"unknown bandwidth rule '{self.rule}'")
        if self.rule == "fixed" and not (self.h is not None and self.h > 0):
            raise ArgumentError(f"fixed bandwidth needs h > 0, got {self.h}")
        if self.rule == "rate" and not self.c_d > 0:
            raise ArgumentError(f"C_D must be > 0, got {self.c_d}")

    @classmethod
    def fixed(cls, h: float) -> "Bandwidth":
        return cls("fixed", h=h)

    @classmethod
    def rate(cls, c_d: float = DEFAULT_C_D) -> "Bandwidth":
        return cls("rate", c_d=c_d)

    def resolve(self, n: int, d: int, volume: float = 1.0) -> float:
        if self.rule == "fixed":
            return float(self.h)
        h = self.c_d * (volume * math.log(max(n, 1)) / max(n, 1)) ** (1.0 / d)
        if not h > 0:
            raise ArgumentError(f"rate bandwidth is not positive for n={n} (needs n >= 2)")
        return float(h)


# ---------------------- Base monomial ----------------------
def scaled_monomial(alpha: MultiIndex, x, center, h: float, deriv: Optional[MultiIndex] = None):
    """
    ∂^deriv [ (x − center)^α / h^{|α|} ] evaluada en x.
    Cero cuando deriv supera a α en alguna componente.
    """
    if not h > 0:
        raise ArgumentError(f"h must be > 0, got {h}")
    xa = np.asarray(x, dtype=float)
    single = xa.ndim <= 1
    pts = xa.reshape(1, -1) if single else xa
    diff = pts - np.asarray(center, dtype=float).reshape(1, -1)
    delta = deriv if deriv is not None else MultiIndex.zero(alpha.dim)
    if not delta.leq(alpha):
        out = np.zeros(pts.shape[0])
    else:
        coef = math.prod(math.factorial(a) // math.factorial(a - b) for a, b in zip(alpha.entries, delta.entries))
        out = coef * (alpha - delta).power(diff) / h ** alpha.order
    return float(out[0]) if single else out


def basis_matrix(indices: Sequence[MultiIndex], t: np.ndarray, h: float) -> np.ndarray:
    """P[i, a] = t_i^{α_a} / h^{|α_a|} con t_i = x_i − x̂."""
    t = np.atleast_2d(t)
    return np.stack([a.power(t) / h ** a.order for a in indices], axis=1)


# ---------------------- Modelo ----------------------
@dataclass(frozen=True)
class MlsModel:
    """
    Modelo MLS inmutable: nube X_n, valores F_n, grado (= k − 1), peso,
    regla de ancho de banda y normalización de 𝒜_n (raw o 1/N_B).
    El ancho h se resuelve al construir (h depende de n y d).
    """

    cloud: PointCloud
    values: np.ndarray
    degree: int = 2
    weight: WeightFunction = field(default_factory=WeightFunction)
    bandwidth: Bandwidth = field(default_factory=Bandwidth)
    normalization: str = "per-count"
    ridge: float = 0.0
    lambda_floor: float = DEFAULT_LAMBDA_FLOOR
    h: float = field(init=False)
    kernel: WeightFunction = field(init=False)
    indices: Tuple[MultiIndex, ...] = field(init=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel().copy()
        if vals.shape[0] != len(self.cloud):
            raise ArgumentError(f"values length {vals.shape[0]} != cloud size {len(self.cloud)}")
        if int(self.degree) < 0:
            raise ArgumentError(f"degree must be >= 0, got {self.degree}")
        if self.normalization not in NORMALIZATIONS:
            raise ArgumentError(f"unknown normalization '{self.normalization}'")
        if self.ridge < 0:
            raise ArgumentError(f"ridge must be >= 0, got {self.ridge}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "degree", int(self.degree))
        volume = self.cloud.domain.volume() if self.cloud.domain is not None else 1.0
        h = self.bandwidth.resolve(len(self.cloud), self.cloud.dim, volume)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "kernel", self.weight.with_bandwidth(h))
        object.__setattr__(self, "indices", tuple(enumerate_multi_indices(self.cloud.dim, self.degree)))

    @property
    def dim(self) -> int:
        return self.cloud.dim

    @property
    def basis_size(self) -> int:
        """#A = dim Π^d_degree."""
        return len(self.indices)

    def with_values(self, values) -> "MlsModel":
        return MlsModel(self.cloud, values, self.degree, self.weight, self.bandwidth,
                        self.normalization, self.ridge, self.lambda_floor)


@dataclass(frozen=True)
class LocalFit:
    """Ajuste local en x̂: vecinos, 𝒜_n(x̂), η(x̂), λ_min y a_i*(x̂)."""

    query: np.ndarray
    neighbor_indices: np.ndarray
    gram: np.ndarray
    eta: np.ndarray
    lambda_min: float
    shape_values: np.ndarray
    weights: np.ndarray
    ridge_used: bool = False


@dataclass(frozen=True)
class DifferentialOperator:
    """Q = Σ q_α ∂^α con coeficientes constantes; orden m = max |α| con q_α ≠ 0."""

    terms: Tuple[Tuple[MultiIndex, float], ...]

    def __post_init__(self):
        terms = tuple((a, float(q)) for a, q in self.terms)
        if not terms or all(q == 0.0 for _, q in terms):
            raise ArgumentError("differential operator needs at least one nonzero coefficient")
        if len({a.dim for a, _ in terms}) != 1:
            raise ArgumentError("differential operator terms mix dimensions")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def identity(cls, d: int) -> "DifferentialOperator":
        return cls(((MultiIndex.zero(d), 1.0),))

    @classmethod
    def partial(cls, d: int, j: int, times: int = 1) -> "DifferentialOperator":
        ent = [0] * d
        ent[j] = times
        return cls(((MultiIndex(tuple(ent)), 1.0),))

    @classmethod
    def laplacian(cls, d: int) -> "DifferentialOperator":
        return cls(tuple((MultiIndex(tuple(2 if i == j else 0 for i in range(d))), 1.0) for j in range(d)))

    @classmethod
    def parse(cls, text: str, d: int) -> "DifferentialOperator":
        """
        "1,0:1;0,1:2" → ∂₁ + 2∂₂. Atajos: "id", "laplacian", "d0", "d1", ...
        Un término sin coeficiente vale 1.
        """
        spec = str(text).strip().lower()
        if spec in ("", "id", "identity"):
            return cls.identity(d)
        if spec == "laplacian":
            return cls.laplacian(d)
        if spec.startswith("d") and spec[1:].isdigit():
            return cls.partial(d, int(spec[1:]))
        terms = []
        for chunk in spec.split(";"):
            if not chunk.strip():
                continue
            idx, _, coef = chunk.partition(":")
            alpha = MultiIndex.parse(idx)
            if alpha.dim != d:
                raise ArgumentError(f"operator term '{chunk}' has dimension {alpha.dim}, expected {d}")
            terms.append((alpha, float(coef) if coef.strip() else 1.0))
        return cls(tuple(terms))

    @property
    def order(self) -> int:
        return max(a.order for a, q in self.terms if q != 0.0)

    @property
    def dim(self) -> int:
        return self.terms[0][0].dim

    def apply(self, derivatives: Dict[MultiIndex, float]) -> float:
        return float(sum(q * derivatives[a] for a, q in self.terms))

    def __str__(self) -> str:
        return ";".join(f"{a}:{q:g}" for a, q in self.terms)


# ---------------------- Álgebra local ----------------------
def lambda_min(gram: np.ndarray) -> float:
    """Menor autovalor de la simetrización (M + Mᵀ)/2; exacto para 1×1."""
    m = np.atleast_2d(np.asarray(gram, dtype=float))
    if m.shape == (1, 1):
        return float(m[0, 0])
    sym = 0.5 * (m + m.T)
    return float(la.eigh(sym, eigvals_only=True)[0])


def _symmetric(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _query_vector(model: MlsModel, x_hat) -> np.ndarray:
    x = np.asarray(x_hat, dtype=float).ravel()
    if x.shape[0] != model.dim:
        raise ArgumentError(f"query has dimension {x.shape[0]}, model has {model.dim}")
    return x


def _neighborhood(model: MlsModel, x: np.ndarray):
    nbrs = np.asarray(range_query(model.cloud, x, model.kernel.radius), dtype=int)
    if nbrs.size == 0:
        raise InsufficientDataError(0, 1, where=np.array2string(x, precision=6))
    t = model.cloud.displacement(model.cloud.points[nbrs], x)
    norm = 1.0 / nbrs.size if model.normalization == "per-count" else 1.0
    return nbrs, t, norm


def assemble_gram(model: MlsModel, x_hat) -> Tuple[np.ndarray, List[int]]:
    """
    𝒜_n(x̂)[α][β] = norm · Σ_{i∈I_B} θ_h(x_i − x̂) p_α(x_i) p_β(x_i),
    norm = 1 (raw) o 1/N_B (per-count). Simétrica exacta tal como se guarda.
    Retorna (gram, vecinos) con vecinos = range_query(x̂, s·h).
    """
    x = _query_vector(model, x_hat)
    nbrs, t, norm = _neighborhood(model, x)
    P = basis_matrix(model.indices, t, model.h)
    W = norm * weight_eval(model.kernel, t)
    return _symmetric(P.T @ (W[:, None] * P)), nbrs.tolist()


class _Solver:
    """Factorización espectral de 𝒜_n (revela el rango) con verificación de λ_min."""

    def __init__(self, model: MlsModel, gram: np.ndarray, neighbor_count: int):
        lam, vec = la.eigh(gram)
        self.lambda_min = float(lam[0])
        self.ridge_used = False
        if self.lambda_min < model.lambda_floor:
            if model.ridge > 0:
                logger.warning("[mls] lambda_min=%.3e below floor, ridge fallback tau=%.1e", self.lambda_min, model.ridge)
                lam = lam + model.ridge
                self.ridge_used = True
            else:
                raise IllConditionedError(self.lambda_min, neighbor_count, model.lambda_floor)
        self.lam = lam
        self.vec = vec

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.vec @ ((self.vec.T @ rhs) / self.lam)


def _fit_core(model: MlsModel, x: np.ndarray, alphas: Iterable[MultiIndex]):
    """Resuelve η y sus derivadas; devuelve (LocalFit, {α: ∂^α a_i*})."""
    alphas = list(alphas)
    nbrs, t, norm = _neighborhood(model, x)
    n_a = model.basis_size
    theta = weight_eval(model.kernel, t)
    positive = int(np.count_nonzero(theta > 0))
    if positive < n_a:
        raise InsufficientDataError(positive, n_a, where=np.array2string(x, precision=6))

    P = basis_matrix(model.indices, t, model.h)
    W0 = norm * theta
    gram = _symmetric(P.T @ (W0[:, None] * P))
    solver = _Solver(model, gram, positive)

    # conjunto inferior de todos los α pedidos
    needed = sorted({z for a in alphas for z in a.lower_set()}, key=lambda m: (m.order, m.entries))
    position = {a: i for i, a in enumerate(model.indices)}
    sign_w: Dict[MultiIndex, np.ndarray] = {}
    d_gram: Dict[MultiIndex, np.ndarray] = {}
    for beta in needed:
        if beta.order == 0:
            sign_w[beta] = W0
            continue
        # d/dx θ_h(x_i − x) = −(∇θ_h)(x_i − x)
        sign_w[beta] = norm * (-1.0) ** beta.order * weight_eval(model.kernel, t, beta)
        d_gram[beta] = _symmetric(P.T @ (sign_w[beta][:, None] * P))

    eta: Dict[MultiIndex, np.ndarray] = {}
    for gamma in needed:
        rhs = np.zeros(n_a)
        if gamma in position:
            rhs[position[gamma]] = gamma.factorial() / model.h ** gamma.order
        for zeta in gamma.lower_set():
            if zeta == gamma:
                continue
            rhs = rhs - gamma.binomial(zeta) * (d_gram[gamma - zeta] @ eta[zeta])
        eta[gamma] = solver.solve(rhs)

    zero = MultiIndex.zero(model.dim)
    if zero not in eta:
        eta[zero] = solver.solve(np.eye(n_a)[0])
    shape = W0 * (P @ eta[zero])
    fit = LocalFit(
        query=x,
        neighbor_indices=nbrs,
        gram=gram,
        eta=eta[zero],
        lambda_min=solver.lambda_min,
        shape_values=shape,
        weights=W0,
        ridge_used=solver.ridge_used,
    )

    shape_derivs: Dict[MultiIndex, np.ndarray] = {}
    for alpha in alphas:
        acc = np.zeros(nbrs.size)
        for zeta in alpha.lower_set():
            acc = acc + alpha.binomial(zeta) * sign_w[alpha - zeta] * (P @ eta[zeta])
        shape_derivs[alpha] = acc
    return fit, shape_derivs


def local_fit(model: MlsModel, x_hat) -> LocalFit:
    """
    Entrada:
        - model (MlsModel), x_hat (vector d).
    Qué hace:
        - Ensambla 𝒜_n(x̂), verifica λ_min ≥ piso y resuelve 𝒜_n η = p(x̂).
        - a_i* = θ_h(x_i − x̂) · Σ_α η_α p_α(x_i) (con el mismo factor de normalización).
    Salida esperada:
        - LocalFit; errores InsufficientDataError / IllConditionedError.
    """
    fit, _ = _fit_core(model, _query_vector(model, x_hat), [])
    return fit


def shape_function_derivatives(model: MlsModel, x_hat, alpha: MultiIndex) -> Tuple[np.ndarray, np.ndarray]:
    """(vecinos, ∂^α a_i*(x̂)) calculadas analíticamente."""
    _check_alpha(model, alpha)
    fit, ds = _fit_core(model, _query_vector(model, x_hat), [alpha])
    return fit.neighbor_indices, ds[alpha]


def _check_alpha(model: MlsModel, alpha: MultiIndex) -> None:
    if alpha.dim != model.dim:
        raise ArgumentError(f"multi-index {alpha} has dimension {alpha.dim}, model has {model.dim}")
    if alpha.order > model.degree:
        raise ArgumentError(f"|alpha|={alpha.order} exceeds model degree {model.degree}")


def evaluate_derivatives(model: MlsModel, x_hat, alphas: Sequence[MultiIndex]) -> Dict[MultiIndex, float]:
    """Σ_i ∂^α a_i*(x̂) f(x_i) para varios α compartiendo una sola factorización."""
    for a in alphas:
        _check_alpha(model, a)
    fit, ds = _fit_core(model, _query_vector(model, x_hat), alphas)
    f = model.values[fit.neighbor_indices]
    return {a: float(ds[a] @ f) for a in alphas}


def mls_eval(model: MlsModel, x_hat) -> float:
    """s^MLS(x̂) = Σ_i a_i*(x̂) f(x_i)."""
    fit = local_fit(model, x_hat)
    return float(fit.shape_values @ model.values[fit.neighbor_indices])


def mls_eval_derivative(model: MlsModel, x_hat, alpha: MultiIndex) -> float:
    """∂^α s^MLS(x̂) con ∂^α a_i* analíticas (regla del producto sobre θ_h y η)."""
    return evaluate_derivatives(model, x_hat, [alpha])[alpha]


def mls_eval_operator(model: MlsModel, x_hat, Q: DifferentialOperator) -> float:
    """Q s^MLS(x̂) = Σ_α q_α ∂^α s^MLS(x̂)."""
    if Q.dim != model.dim:
        raise ArgumentError(f"operator dimension {Q.dim} != model dimension {model.dim}")
    alphas = [a for a, _ in Q.terms]
    return Q.apply(evaluate_derivatives(model, x_hat, alphas))


def mls_eval_many(model: MlsModel, queries: np.ndarray, Q: Optional[DifferentialOperator] = None):
    """
    Evalúa Q s^MLS en varias consultas. Los ajustes fallidos no abortan:
    devuelve (valores con NaN en los fallos, lista de (índice, motivo)).
    """
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    op = Q or DifferentialOperator.identity(model.dim)
    out = np.full(q.shape[0], np.nan)
    failures: List[Tuple[int, str]] = []
    for i, x in enumerate(q):
        try:
            out[i] = mls_eval_operator(model, x, op)
        except (InsufficientDataError, IllConditionedError) as e:
            failures.append((i, str(e)))
    if failures:
        logger.warning("[mls] %d/%d query fits failed", len(failures), q.shape[0])
    return out, failures
