"""Exception hierarchy shared across the pipeline stages."""


class FadacsError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "FadacsError"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class MissingColumn(FadacsError):
    code = "MissingColumn"

    def __init__(self, name):
        super().__init__(f"missing required column {name!r}")
        self.name = name


class UnparsableRow(FadacsError):
    code = "UnparsableRow"

    def __init__(self, problems):
        # problems: list of (line_no, field)
        self.problems = list(problems)
        head = ", ".join(f"line {n}: {f}" for n, f in self.problems[:5])
        more = "" if len(self.problems) <= 5 else f" (+{len(self.problems) - 5} more)"
        super().__init__(f"unparsable rows: {head}{more}")


class UnknownSlot(FadacsError):
    code = "UnknownSlot"

    def __init__(self, key):
        super().__init__(f"slot {key!r} has neither a location nor a polygon")
        self.key = key


class InsufficientEdges(FadacsError):
    code = "InsufficientEdges"


class SeriesTooShort(FadacsError):
    code = "SeriesTooShort"


class NoWeatherBefore(FadacsError):
    code = "NoWeatherBefore"


class ConstantInput(FadacsError):
    code = "ConstantInput"


class DegenerateSampleSize(FadacsError):
    code = "DegenerateSampleSize"


class ShapeMismatch(FadacsError, ValueError):
    code = "ShapeMismatch"


class NoForwardRecorded(FadacsError):
    code = "NoForwardRecorded"


class Divergence(FadacsError):
    code = "Divergence"


class NoHistory(FadacsError):
    code = "NoHistory"


class EmptyBatch(FadacsError):
    code = "EmptyBatch"


class InvalidConfig(FadacsError):
    code = "InvalidConfig"


class ConfigInvalid(FadacsError):
    code = "ConfigInvalid"


class InputMissing(FadacsError):
    code = "InputMissing"


class UpstreamStageMissing(FadacsError):
    code = "UpstreamStageMissing"


class BadFileFormat(FadacsError):
    code = "BadFileFormat"
