from typing import Any, Dict, List, Optional


class Denoise6DError(Exception):
    """Base class for every error raised by the toolkit."""


class InvalidPose(Denoise6DError):
    pass


class NonPositiveDepth(Denoise6DError):
    pass


class EmptyScene(Denoise6DError):
    pass


class MissingAbc(Denoise6DError):
    pass


class EmptyMask(Denoise6DError):
    pass


class EmptyMaskAfterErosion(EmptyMask):
    pass


class AllInvalid(Denoise6DError):
    pass


class DegenerateFit(Denoise6DError):
    pass


class TooFewPoints(Denoise6DError):
    pass


class DegenerateConfiguration(Denoise6DError):
    pass


class EmptyInput(Denoise6DError):
    pass


class ConfigError(Denoise6DError):
    """
    Raised when an experiment configuration cannot be used.
    `diagnostics` holds one entry per offending field: {"loc": "noise.hole_rate", "msg": "..."}.
    """

    def __init__(self, message: str, diagnostics: Optional[List[Dict[str, Any]]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []

    @classmethod
    def from_validation_error(cls, exc) -> "ConfigError":
        diagnostics = [
            {"loc": ".".join(str(part) for part in err.get("loc", ())), "msg": err.get("msg", "")}
            for err in exc.errors()
        ]
        fields = ", ".join(d["loc"] or "<root>" for d in diagnostics)
        return cls(f"Invalid experiment configuration ({fields})", diagnostics)

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        lines = [f"  {d['loc'] or '<root>'}: {d['msg']}" for d in self.diagnostics]
        return base + "\n" + "\n".join(lines)
