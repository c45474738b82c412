"""Exception hierarchy shared across the pipeline stages."""


class PartFontError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PartFontError):
    """Invalid or inconsistent run configuration."""


class MissingDependency(PartFontError):
    """A pipeline stage was invoked before the stages it depends on.

    The message names the stage that has to be run first.
    """


# dataset
class UnreadableFont(PartFontError):
    """Font file could not be opened or parsed."""


class MissingGlyph(PartFontError):
    """A required character class has no renderable outline."""

    def __init__(self, char: str, font: str = ""):
        self.char = char
        super().__init__(f"glyph {char!r} missing or empty" + (f" in {font}" if font else ""))


class IncompleteFont(PartFontError):
    """An image-directory font does not contain all 26 classes."""


class BadImageSize(PartFontError):
    """An ingested image does not match the configured canvas size."""


class BadGlyphImage(PartFontError):
    """Glyph pixels violate the ink-coverage bounds after normalization."""


class TooFewFamilies(PartFontError):
    """Splitting requires at least three font families."""


# parts
class NoKeypoints(PartFontError):
    """Keypoint detection found nothing usable (e.g. a blank font)."""


class KTooLarge(PartFontError):
    """Requested more medoids than there are points."""


# encoder
class SizeMismatch(PartFontError):
    """Part patch size does not match the encoder and resizing is disabled."""


class EmptySet(PartFontError):
    """encode_set called with no parts."""


class DegenerateSum(PartFontError):
    """Aggregated part embedding has (near-)zero norm; no style direction exists."""


class InsufficientParts(PartFontError):
    """A training font has no extracted parts in its manifest."""


# diffusion
class BadTimestep(PartFontError):
    """Timestep outside [1, T]."""


class BadSteps(PartFontError):
    """Requested sampling step count outside [1, T]."""


# metrics
class ShapeMismatch(PartFontError):
    """Two images that must share a shape do not."""


class TooSmall(PartFontError):
    """Image too small for the requested windowed metric."""


class NonFiniteInput(PartFontError):
    """Metric input contains NaN or Inf."""
