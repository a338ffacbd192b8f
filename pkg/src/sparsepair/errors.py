"""Exception types raised across the toolkit."""


class SparsePairError(Exception):
    """Base class for toolkit errors."""


class ZeroRow(SparsePairError, ValueError):
    pass


class EmptyInput(SparsePairError, ValueError):
    pass


class TooFewClasses(SparsePairError, ValueError):
    pass


class NoNegatives(SparsePairError, ValueError):
    pass


class SingletonClass(SparsePairError, ValueError):
    pass


class NoUsableClasses(SparsePairError, ValueError):
    pass


class MPNoValidPositive(SparsePairError, ValueError):
    pass


class LabelOutOfRange(SparsePairError, ValueError):
    pass


class ShapeMismatch(SparsePairError, ValueError):
    pass


class EmptyGallery(SparsePairError, ValueError):
    pass


class FormatError(SparsePairError, ValueError):
    """Malformed dataset or checkpoint file."""
