"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes, so every failure mode funnels
through one of the classes below.
"""


class ShortcutForgeError(Exception):
    """Base class for all package errors."""


class ContractViolation(ShortcutForgeError):
    """An operation was called with inputs that break its preconditions."""


class NumericFailure(ShortcutForgeError):
    """A NaN/Inf or otherwise degenerate numeric state was detected."""


class DegenerateEmbeddingError(NumericFailure):
    """A zero-norm embedding reached a cosine-similarity computation."""


class DegenerateClassError(ContractViolation):
    """A ranking metric was asked to score a single-class label set."""


class MissingPrerequisite(ShortcutForgeError):
    """A command needs an artifact (corpus, checkpoint) that is not on disk."""


class AnchorScarcityError(ShortcutForgeError):
    """Too few exclusively-positive samples to build a label anchor."""

    def __init__(self, label_index: int, found: int, needed: int):
        self.label_index = label_index
        self.found = found
        self.needed = needed
        super().__init__(
            f"label {label_index}: only {found} exclusively-positive samples "
            f"available, {needed} required"
        )
