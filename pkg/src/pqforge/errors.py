"""Exception types shared across the package."""


class PQForgeError(Exception):
    """Base class for all package errors."""


class DomainError(PQForgeError):
    """A parameter or point lies outside the valid domain."""


class InputError(PQForgeError):
    """Malformed or degenerate input data."""


class ParseError(InputError):
    """Unreadable document; carries a human-readable location."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class SingularSurfaceError(PQForgeError):
    """Surface evaluation hit a degenerate tangent plane."""


class TopologyError(PQForgeError):
    """Region structure of a sketch is not usable (open outer boundary etc.)."""


class DegenerateFieldError(PQForgeError):
    """Direction-field decode hit a zero root; no usable directions there."""


class ExtractionError(PQForgeError):
    """Streamline tracing could not produce any quad cell."""


class SketchViolation:
    """One violated sketch constraint, identified by a short clause id."""

    def __init__(self, clause, message):
        self.clause = clause
        self.message = message

    def __repr__(self):
        return f"SketchViolation({self.clause!r}, {self.message!r})"

    def to_dict(self):
        return {"clause": self.clause, "message": self.message}


class InconsistentSketchError(PQForgeError):
    """Sketch fails one or more structural constraints."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"[{v.clause}] {v.message}" for v in self.violations))


class SolverError(PQForgeError):
    """A numerical solve failed to produce a usable result."""


class MissingArtifactError(PQForgeError):
    """A pipeline stage requires outputs of an earlier stage that are absent."""
