# app/modules/errors.py
"""
Jerarquía de errores del laboratorio MLS.
Cada mensaje lleva una etiqueta entre corchetes con el subsistema que falló,
por ejemplo "[MLS FIT] lambda_min=3.1e-12 < floor 1e-10 (neighbors=7)".
"""


class MlsLabError(RuntimeError):
    """Error base de todos los módulos del laboratorio."""

    tag = "MLSLAB"

    def __init__(self, message: str):
        super().__init__(f"[{self.tag}] {message}")


class ArgumentError(MlsLabError, ValueError):
    tag = "ARG"


class DomainError(MlsLabError, ValueError):
    tag = "DOMAIN"


class ConfigError(MlsLabError):
    """Violación del esquema de configuración. Se mapea a exit 2."""

    tag = "CONF"

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class InsufficientDataError(MlsLabError):
    tag = "MLS DATA"

    def __init__(self, neighbor_count: int, required: int, where: str = ""):
        self.neighbor_count = neighbor_count
        self.required = required
        suffix = f" at {where}" if where else ""
        super().__init__(f"neighbors={neighbor_count} < required {required}{suffix}")


class IllConditionedError(MlsLabError):
    tag = "MLS FIT"

    def __init__(self, lambda_min: float, neighbor_count: int, floor: float):
        self.lambda_min = lambda_min
        self.neighbor_count = neighbor_count
        self.floor = floor
        super().__init__(
            f"lambda_min={lambda_min:.3e} < floor {floor:.1e} (neighbors={neighbor_count})"
        )


class FeasibilityError(MlsLabError):
    tag = "MMLS FRAME"


class ConvergenceError(MlsLabError):
    tag = "MMLS FRAME"

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"no convergence after {iterations} iterations (J1={residual:.3e})")


class ExperimentError(MlsLabError):
    tag = "LAB"

    def __init__(self, failures: int, total: int, limit: float, what: str = "probe fits"):
        self.failures = failures
        self.total = total
        super().__init__(
            f"{failures}/{total} {what} failed, above the allowed fraction {limit:.2%}"
        )
