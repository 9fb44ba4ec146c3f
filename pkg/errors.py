#!/usr/bin/env python3

"""
SlotForge error types
Every failure raised by the library derives from SlotForgeError
"""


class SlotForgeError(Exception):
    """Base class for all library errors"""


class LevelUnderflow(SlotForgeError):
    """A multiplication was attempted on a ciphertext at level 0"""


class InvalidTarget(SlotForgeError):
    """Bootstrap or level-drop target outside the allowed range"""


class ShapeMismatch(SlotForgeError):
    pass


class LayoutMismatch(SlotForgeError):
    """Ciphertext layout does not match what the operation expects"""


class CacheEmpty(SlotForgeError):
    pass


class CacheFull(SlotForgeError):
    pass


class DomainViolation(SlotForgeError):
    """Approximation input fell outside its profiled domain (debug mode)"""


class InfeasibleLayer(SlotForgeError):
    """A layer needs more multiplicative depth than the maximum level"""


class NoFeasiblePath(SlotForgeError):
    pass


class BackendError(SlotForgeError):
    """Backend discovery, loading or initialization failed"""


class PlanMismatch(SlotForgeError):
    """A placement plan does not describe the model it is executed on"""
