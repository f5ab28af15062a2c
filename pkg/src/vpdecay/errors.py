"""Exception hierarchy shared by all modules."""


class VPDecayError(Exception):
    """Base class; ``module`` names the component that raised."""

    module = "vpdecay"

    def __init__(self, message, module=None):
        if module is not None:
            self.module = module
        super().__init__(message)


class ParameterError(VPDecayError, ValueError):
    pass


class CapabilityError(VPDecayError):
    pass


class DomainError(VPDecayError, ValueError):
    pass


class PrecisionError(VPDecayError):
    pass


class RangeError(VPDecayError, ValueError):
    pass


class DivergenceError(VPDecayError):
    pass


class InvertibilityError(VPDecayError):
    pass


class InstabilityError(VPDecayError):
    pass


class ConfigurationError(VPDecayError, ValueError):
    pass
