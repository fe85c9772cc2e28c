"""Exception types shared across the simulator."""

from __future__ import annotations


class SimulatorError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(SimulatorError, ValueError):
    pass


class ShapeError(SimulatorError, ValueError):
    pass


class EmptyInputError(SimulatorError, ValueError):
    pass


class NumericError(SimulatorError, ArithmeticError):
    pass


class CapacityError(SimulatorError, ValueError):
    def __init__(self, required: int, available: int, what: str = "source examples"):
        self.required = required
        self.available = available
        super().__init__(f"insufficient {what}: required {required}, available {available}")


class IDXParseError(SimulatorError, ValueError):
    """Malformed IDX file. ``field`` names the header field or section at fault."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class EngineError(SimulatorError, RuntimeError):
    """Failure inside a federation run, tagged with (timestep, client, model) context."""

    def __init__(self, message: str, timestep=None, client=None, model=None):
        self.timestep = timestep
        self.client = client
        self.model = model
        super().__init__(f"{message} (t={timestep}, client={client}, model={model})")
