"""Exception types shared across the package."""


class TexsplatError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TexsplatError):
    """Bad experiment configuration: unknown keys, missing files, bad values."""


class DivergenceError(TexsplatError):
    """A numerical loop produced non-finite values."""


class MissingArtifactError(TexsplatError):
    """A required on-disk artifact is absent or unreadable."""


class EmptyMaskError(TexsplatError):
    """An operation that needs object pixels received an all-zero mask."""


class ZeroDeltaError(TexsplatError):
    """Texture difference is (numerically) zero; there is nothing to learn."""
