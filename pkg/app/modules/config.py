# app/modules/config.py
"""
Configuración de corridas: esquema de claves con tipo, valor por defecto y ayuda.

Precedencia (de menor a mayor):
    defaults del esquema < archivo key=value (dotenv_values) < entorno MLSLAB_* < --set key=value

Las variables de entorno usan el prefijo MLSLAB_ y '__' en lugar de '.':
    MLSLAB_MLS__DEGREE=3  →  mls.degree = 3
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

from dotenv import dotenv_values

from .errors import ConfigError, MlsLabError
from .geometry import DOMAIN_SHAPES, Domain
from .mls_engine import BANDWIDTH_RULES, NORMALIZATIONS, WEIGHT_PROFILES, Bandwidth, MlsModel, WeightFunction
from .mmls import MmlsConfig
from .sampling import DENSITY_KINDS, DENSITY_PROFILES, MANIFOLD_KINDS, Density, ReferenceManifold
from .stochastic_lab import LAB_TARGETS, NAMED_FUNCTIONS, ExperimentPlan

logger = logging.getLogger("mlslab.config")

ENV_PREFIX = "MLSLAB_"

COMMANDS = ("sample", "fit", "eval", "rates", "mmls", "report", "calibrate")


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | bool | ints
    default: Any
    help: str
    choices: Tuple[str, ...] = ()
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""


_POS = (lambda v: v > 0, "must be > 0")
_NONNEG = (lambda v: v >= 0, "must be >= 0")
_ONE = (lambda v: v >= 1, "must be >= 1")
_UNIT = (lambda v: 0 <= v <= 1, "must lie in [0, 1]")
_OPEN_UNIT = (lambda v: 0 < v < 1, "must lie in (0, 1)")
_AMPL = (lambda v: 0 <= v < 1, "must lie in [0, 1)")


def _key(kind, default, help, choices=(), rng=None):
    check, rule = rng if rng else (None, "")
    return Key(kind, default, help, tuple(choices), check, rule)


SCHEMA: Dict[str, Key] = {
    "run.seed": _key("int", 0, "master seed (64-bit)"),
    "run.output_dir": _key("str", "out", "artifact directory"),
    "run.workers": _key("int", 1, "worker threads for independent trials", rng=_ONE),
    "geometry.domain": _key("str", "unit-cube", "domain shape", DOMAIN_SHAPES),
    "geometry.dim": _key("int", 1, "domain dimension d", rng=_ONE),
    "geometry.radius": _key("float", 1.0, "ball radius", rng=_POS),
    "geometry.resolution": _key("int", 0, "fill-distance grid points per axis (0 = automatic)", rng=_NONNEG),
    "sampling.n": _key("int", 100, "sample size", rng=_ONE),
    "sampling.density": _key("str", "uniform", "density kind", DENSITY_KINDS),
    "sampling.profile": _key("str", "cosine", "bounded-ratio profile", DENSITY_PROFILES),
    "sampling.amplitude": _key("float", 0.5, "bounded-ratio profile amplitude", rng=_AMPL),
    "sampling.c_lower": _key("float", 0.0, "lower density ratio bound (0 = (1 - amplitude)/profile mean over the domain)", rng=_NONNEG),
    "sampling.c_upper": _key("float", 0.0, "upper density ratio bound (0 = (1 + amplitude)/profile mean over the domain)", rng=_NONNEG),
    "sampling.manifold": _key("str", "none", "sample a reference manifold instead of the domain", ("none",) + MANIFOLD_KINDS),
    "sampling.manifold_dim": _key("int", 1, "graph manifold intrinsic dimension", rng=_ONE),
    "sampling.ambient_dim": _key("int", 2, "graph manifold ambient dimension", rng=_ONE),
    "sampling.manifold_radius": _key("float", 1.0, "circle/sphere radius", rng=_POS),
    "sampling.graph_amplitude": _key("float", 0.1, "graph manifold height amplitude", rng=_NONNEG),
    "mls.degree": _key("int", 2, "polynomial degree (k - 1)", rng=_NONNEG),
    "mls.weight.profile": _key("str", "smooth-bump", "weight profile", WEIGHT_PROFILES),
    "mls.weight.support": _key("float", 1.0, "support scale s", rng=_POS),
    "mls.bandwidth.rule": _key("str", "rate", "bandwidth rule", BANDWIDTH_RULES),
    "mls.bandwidth.h": _key("float", 0.0, "fixed bandwidth h", rng=_NONNEG),
    "mls.bandwidth.c_d": _key("float", 1.5, "rate-rule constant C_D in h = C_D*(vol*log n/n)^(1/d); vol = domain volume (1 on the unit cube)", rng=_POS),
    "mls.normalization": _key("str", "per-count", "gram normalization", NORMALIZATIONS),
    "mls.ridge": _key("float", 0.0, "ridge fallback tau (0 = off)", rng=_NONNEG),
    "mls.lambda_floor": _key("float", 1e-10, "lambda_min floor for local fits", rng=_POS),
    "lab.target": _key("str", "fill", "experiment target", LAB_TARGETS),
    "lab.n_grid": _key("ints", (128, 256, 512, 1024), "sample sizes (comma separated, increasing)"),
    "lab.trials": _key("int", 20, "trials per n", rng=_ONE),
    "lab.quantile": _key("float", 0.1, "lower-tail quantile for separation", rng=_OPEN_UNIT),
    "lab.max_failure_fraction": _key("float", 0.01, "allowed fraction of failed probe fits", rng=_UNIT),
    "lab.probes": _key("int", 8, "interior probes per axis", rng=_ONE),
    "lab.boundary_probes": _key("bool", False, "add boundary/corner probes"),
    "lab.function": _key("str", "sine", "named test function", tuple(sorted(NAMED_FUNCTIONS))),
    "lab.operator": _key("str", "id", "differential operator, e.g. 1,0:1;0,1:2"),
    "lab.max_order": _key("int", 2, "smoothness probe max order", rng=_ONE),
    "lab.grid_step": _key("float", 1e-4, "smoothness probe grid step", rng=_POS),
    "lab.inject_duplicate": _key("bool", False, "duplicate a point in separation trials"),
    "lab.plot": _key("bool", True, "write plot.svg"),
    "lab.rounding_floor": _key("float", 1e-10, "aggregates below this skip the slope fit", rng=_POS),
    "lab.lambda_check": _key("float", 1e-4, "lambda_min floor asserted by the lambda-min report", rng=_POS),
    "lab.gamma_ratio_max": _key("float", 8.0, "max gamma_high / gamma_low", rng=_POS),
    "mmls.manifold": _key("str", "circle", "reference manifold (none = samples from io.points)", ("none",) + MANIFOLD_KINDS),
    "mmls.dim": _key("int", 1, "intrinsic dimension d", rng=_ONE),
    "mmls.ambient_dim": _key("int", 2, "ambient dimension D", rng=_ONE),
    "mmls.degree": _key("int", 2, "J2 polynomial degree", rng=_NONNEG),
    "mmls.mu_factor": _key("float", 3.0, "mu = mu_factor * h", rng=_ONE),
    "mmls.c_d": _key("float", 3.0, "MMLS rate constant in h = C_D*(vol*log n/n)^(1/d); vol = manifold volume (2*pi on the unit circle)", rng=_POS),
    "mmls.tolerance": _key("float", 1e-10, "frame tolerance (relative to h)", rng=_POS),
    "mmls.max_iterations": _key("int", 100, "max frame iterations", rng=_ONE),
    "mmls.probes": _key("int", 64, "reference probes on the manifold", rng=_ONE),
    "mmls.max_failure_fraction": _key("float", 0.01, "allowed fraction of failed projections", rng=_UNIT),
    "io.points": _key("str", "", "points CSV"),
    "io.values": _key("str", "", "values CSV (column f)"),
    "io.queries": _key("str", "", "query points CSV"),
    "io.alpha": _key("str", "", "multi-index (1,0) or operator (1,0:1;0,1:2) for eval"),
    "io.probes": _key("str", "", "probe points CSV for mmls"),
}


def _convert(key: str, spec: Key, raw: Any) -> Any:
    if raw is None:
        raise ConfigError(key, "missing value")
    try:
        if spec.kind == "int":
            value: Any = int(str(raw).strip())
        elif spec.kind == "float":
            value = float(str(raw).strip())
        elif spec.kind == "bool":
            text = str(raw).strip().lower()
            if text not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            value = text in ("1", "true", "yes", "on")
        elif spec.kind == "ints":
            if isinstance(raw, (list, tuple)):
                value = tuple(int(v) for v in raw)
            else:
                value = tuple(int(v) for v in str(raw).replace(" ", "").split(",") if v)
        else:
            value = str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot parse {raw!r} as {spec.kind}") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(key, f"{value!r} not in {list(spec.choices)}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(key, f"{value!r} {spec.rule}")
    return value


def env_key(name: str) -> str:
    """MLSLAB_MLS__DEGREE → mls.degree"""
    return name[len(ENV_PREFIX):].lower().replace("__", ".")


def parse_assignments(items: Sequence[str]) -> Dict[str, str]:
    """['mls.degree=3', ...] → {'mls.degree': '3'}"""
    out: Dict[str, str] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(key.strip() or item, "override must look like key=value")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunConfig:
    """Configuración resuelta de una corrida: subcomando + todas las claves del esquema."""

    command: str
    values: Dict[str, Any] = field(default_factory=dict)
    sources: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        return self.values[key]

    def as_dict(self) -> Dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}

    # --- constructores de objetos de dominio ---
    def domain(self) -> Domain:
        return _wrap("geometry.domain", lambda: Domain(self["geometry.domain"], self["geometry.dim"], self["geometry.radius"]))

    def density(self) -> Density:
        if self["sampling.density"] == "uniform":
            return Density.uniform()
        amp = self["sampling.amplitude"]
        lo = self["sampling.c_lower"] or None
        hi = self["sampling.c_upper"] or None
        dens = _wrap("sampling.density", lambda: Density.bounded_ratio(amp, self["sampling.profile"], lo, hi))
        dens.validate(self.domain())
        return dens

    def manifold(self, section: str = "sampling") -> Optional[ReferenceManifold]:
        kind = self[f"{section}.manifold"]
        if kind == "none":
            return None
        if kind == "circle":
            return ReferenceManifold.circle(self["sampling.manifold_radius"])
        if kind == "sphere":
            return ReferenceManifold.sphere(self["sampling.manifold_radius"])
        if section == "mmls":
            d, D = self["mmls.dim"], self["mmls.ambient_dim"]
        else:
            d, D = self["sampling.manifold_dim"], self["sampling.ambient_dim"]
        return _wrap(f"{section}.manifold", lambda: ReferenceManifold.graph(d, D, self["sampling.graph_amplitude"]))

    def weight(self) -> WeightFunction:
        return _wrap("mls.weight.profile", lambda: WeightFunction(self["mls.weight.profile"], self["mls.weight.support"]))

    def bandwidth(self) -> Bandwidth:
        if self["mls.bandwidth.rule"] == "fixed":
            if self["mls.bandwidth.h"] <= 0:
                raise ConfigError("mls.bandwidth.h", "fixed bandwidth rule needs h > 0")
            return Bandwidth.fixed(self["mls.bandwidth.h"])
        return Bandwidth.rate(self["mls.bandwidth.c_d"])

    def model(self, cloud, values) -> MlsModel:
        return MlsModel(cloud, values, self["mls.degree"], self.weight(), self.bandwidth(),
                        self["mls.normalization"], self["mls.ridge"], self["mls.lambda_floor"])

    def plan(self, target: Optional[str] = None, n_grid: Optional[Sequence[int]] = None) -> ExperimentPlan:
        return _wrap("lab.n_grid", lambda: ExperimentPlan(
            target=target or self["lab.target"],
            n_grid=tuple(n_grid or self["lab.n_grid"]),
            trials=self["lab.trials"],
            master_seed=self["run.seed"],
            domain=self.domain(),
            density=self.density(),
            degree=self["mls.degree"],
            weight=self.weight(),
            bandwidth=self.bandwidth(),
            normalization=self["mls.normalization"],
            ridge=self["mls.ridge"],
            lambda_floor=self["mls.lambda_floor"],
            quantile=self["lab.quantile"],
            max_failure_fraction=self["lab.max_failure_fraction"],
            probes=self["lab.probes"],
            boundary_probes=self["lab.boundary_probes"],
            function=self["lab.function"],
            operator=self["lab.operator"],
            max_order=self["lab.max_order"],
            grid_step=self["lab.grid_step"],
            inject_duplicate=self["lab.inject_duplicate"],
            rounding_floor=self["lab.rounding_floor"],
            resolution=self["geometry.resolution"],
            workers=self["run.workers"],
            lambda_check=self["lab.lambda_check"],
            gamma_ratio_max=self["lab.gamma_ratio_max"],
        ))

    def mmls_config(self, volume: float = 1.0):
        return _wrap("mmls.dim", lambda: MmlsConfig(
            dim=self["mmls.dim"],
            ambient_dim=self["mmls.ambient_dim"],
            degree=self["mmls.degree"],
            frame_weight=self.weight(),
            fit_weight=self.weight(),
            mu_factor=self["mmls.mu_factor"],
            tolerance=self["mmls.tolerance"],
            max_iterations=self["mmls.max_iterations"],
            bandwidth=Bandwidth.rate(self["mmls.c_d"]),
            volume=volume,
            lambda_floor=self["mls.lambda_floor"],
            max_failure_fraction=self["mmls.max_failure_fraction"],
            workers=self["run.workers"],
        ))


def _wrap(key: str, build: Callable[[], Any]) -> Any:
    """Convierte errores de argumento al construir objetos en ConfigError sobre `key`."""
    try:
        return build()
    except ConfigError:
        raise
    except MlsLabError as e:
        raise ConfigError(key, str(e)) from None


def load_config(command: str, path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Parámetros:
        command (str): subcomando.
        path (str|None): archivo key=value (comentarios con #).
        overrides (dict|None): pares de --set y de flags de la CLI.
        environ (dict|None): entorno (por defecto os.environ).

    Retorna:
        RunConfig validado; ConfigError nombrando la clave ante cualquier violación.
    """
    if command not in COMMANDS:
        raise ConfigError("command", f"unknown subcommand '{command}'")
    values = {k: spec.default for k, spec in SCHEMA.items()}
    sources = {k: "default" for k in SCHEMA}

    layers = []
    if path:
        if not os.path.isfile(path):
            raise ConfigError("--config", f"file not found: {path}")
        layers.append(("file", dict(dotenv_values(path))))
    env = os.environ if environ is None else environ
    layers.append(("env", {env_key(k): v for k, v in env.items() if k.startswith(ENV_PREFIX)}))
    layers.append(("cli", dict(overrides or {})))

    for source, layer in layers:
        for key, raw in layer.items():
            if key not in SCHEMA:
                raise ConfigError(key, f"unknown key (from {source})")
            values[key] = _convert(key, SCHEMA[key], raw)
            sources[key] = source
    cfg = RunConfig(command, values, sources)
    logger.debug("[config] %s resolved (%d keys overridden)", command, sum(s != "default" for s in sources.values()))
    return cfg
