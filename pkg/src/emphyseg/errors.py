"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: configuration and data problems exit
with 3, runtime failures (diverged training, IO breakage mid-run) with 4.
"""


class EmphysegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(EmphysegError):
    """Invalid configuration, missing prior, or violated call contract."""


class DegenerateInputError(EmphysegError):
    """Input is structurally empty (e.g. a volume with no lung voxels)."""


class GenerationError(EmphysegError):
    """Phantom generation could not satisfy its target."""


class TrainingDivergedError(EmphysegError):
    """Loss or gradients became non-finite during optimization."""


class VolumeFormatError(EmphysegError):
    """Base class for volume-file decoding failures."""


class MalformedHeaderError(VolumeFormatError):
    """Bad magic bytes, unsupported version, or short/garbled header."""


class DimensionMismatchError(VolumeFormatError):
    """Header dimensions are invalid or inconsistent with the payload."""


class TruncatedPayloadError(VolumeFormatError):
    """File ends before the payload promised by the header."""
