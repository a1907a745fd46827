"""Exception hierarchy. The CLI maps each family to a fixed exit code."""


class CardioXNetError(Exception):
    """Base class for all package errors."""


class ShapeError(CardioXNetError, ValueError):
    """Operand shapes are inconsistent with each other or with a spec."""


class ConfigError(CardioXNetError, ValueError):
    """A model, training or run configuration violates a constraint."""


class NumericalError(CardioXNetError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class DataError(CardioXNetError):
    """Input data is malformed or unusable."""


class WavFormatError(DataError):
    """Malformed RIFF/WAVE container."""


class UnsupportedCodecError(WavFormatError):
    """WAV codec other than PCM16 or IEEE float32."""


class EmptyAudioError(WavFormatError):
    """WAV file with a zero-length data chunk."""


class ClipTooShortError(DataError):
    """Clip is shorter than the requested duration."""


class ModelFormatError(CardioXNetError):
    """Model file could not be decoded."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class ClassMismatchError(CardioXNetError):
    """Model class count disagrees with the data or the request."""
