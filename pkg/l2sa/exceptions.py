# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

__all__ = ['EngineError', 'PreconditionError', 'ShapeError', 'NonFiniteError',
           'LabelError', 'GraphError', 'CheckpointError', 'DatasetError',
           'ConfigError', 'DivergenceError', 'GradCheckFailure']

from paranoid.exceptions import EntryConditionsError

class EngineError(Exception):
    """Base class for l2sa-engine exceptions"""
    pass


class PreconditionError(EngineError, EntryConditionsError):
    """An input violated an operation's entry conditions.

    These are detected inside function bodies, so they are raised even
    when runtime verification is disabled.  Since they are also entry
    condition errors, the paranoid test driver skips generated inputs
    which trigger them instead of reporting a failure.
    """
    pass

class ShapeError(PreconditionError):
    """A tensor extent did not match what the operation requires."""
    def __init__(self, op, dimension, expected, actual):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__("%s: dimension '%s' expected %s, got %s" %
                         (op, dimension, expected, actual))

class NonFiniteError(PreconditionError):
    """A tensor contained NaN or inf."""
    pass

class LabelError(PreconditionError):
    """A class label was outside of [0, classes)."""
    pass


class GraphError(EngineError):
    """A network description is inconsistent."""
    pass

class CheckpointError(EngineError):
    """A checkpoint file is missing, corrupt, or of the wrong version."""
    pass

class DatasetError(EngineError):
    """A dataset directory, image, manifest or split is invalid."""
    pass

class ConfigError(EngineError):
    """Invalid configuration: unknown model, bad config file or key."""
    pass

class DivergenceError(EngineError):
    """Training produced a non-finite loss."""
    pass

class GradCheckFailure(EngineError):
    """A gradient certification report did not pass."""
    pass
