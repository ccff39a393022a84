"""Exception hierarchy. The CLI reports ``type(err).__name__`` on stderr."""


class PatchlockError(Exception):
    pass


class OddBlockSize(PatchlockError, ValueError):
    """Pixels-per-block is odd, so no balanced flip mask exists."""


class NotDivisible(PatchlockError, ValueError):
    """Image height or width is not a multiple of the block size."""


class BadShape(PatchlockError, ValueError):
    pass


class KeyMismatch(PatchlockError, ValueError):
    """Key length does not match the block / patch size."""


class ShapeMismatch(PatchlockError, ValueError):
    pass


class EvenKernel(PatchlockError, ValueError):
    pass


class BadMagic(PatchlockError, ValueError):
    pass


class TruncatedFile(PatchlockError, ValueError):
    pass


class InvalidKey(PatchlockError, ValueError):
    """Key file contents violate bijectivity or balance."""


class BadImage(PatchlockError, ValueError):
    pass
