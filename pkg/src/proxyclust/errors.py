"""Package-level exception types.

Argument validation raises the builtin ``ValueError``; the classes here
cover the failure modes that callers are expected to catch and handle.
"""


class DegenerateFitError(ValueError):
    """Mixture fit is impossible (e.g. all attention values identical)."""


class BackboneStateError(RuntimeError):
    """Backbone used in a state it is not in (missing weights, not pretrained)."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite; the training step was aborted."""
