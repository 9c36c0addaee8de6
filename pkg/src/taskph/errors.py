"""Exception hierarchy shared by all modules."""


class TaskPHError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(TaskPHError, ValueError):
    """Non-finite or wrongly shaped numerical input."""


class ModelError(TaskPHError):
    """Model parameters are inconsistent (e.g. mass matrix not SPD)."""


class TaskSingularityError(TaskPHError):
    """The task Jacobian lost rank at the evaluated configuration."""

    def __init__(self, sigma_min, sigma_max, q=None):
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.q = None if q is None else [float(v) for v in q]
        super().__init__(
            f"task Jacobian is rank deficient: smallest singular value "
            f"{self.sigma_min:.3e} (largest {self.sigma_max:.3e})"
        )


class StencilSingularityError(TaskSingularityError):
    """A finite-difference stencil point hit a task singularity."""


class BasisAlignmentError(TaskPHError):
    """The null-space basis lost overlap with its alignment reference."""

    def __init__(self, overlap):
        self.overlap = float(overlap)
        super().__init__(f"null-space basis overlap with reference dropped to {self.overlap:.3e}")


class ConfigError(TaskPHError):
    """Invalid configuration file, section or override."""

    def __init__(self, message, path=None, line=None, field=None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ": ".join([", ".join(where)]) + ": " if where else ""
        super().__init__(prefix + message)


class UnsupportedOperationError(TaskPHError):
    """The requested operation needs data the task/model does not provide."""


class AssignmentViolationError(TaskPHError):
    """Shaped potential fails the extremum/minimum assignment conditions."""


class IntegrationAbort(TaskPHError):
    """Time integration stopped early (singularity or blow-up)."""

    def __init__(self, message, t, cause=None):
        self.t = float(t)
        self.cause = cause
        super().__init__(f"integration aborted at t={self.t:.6g}: {message}")
