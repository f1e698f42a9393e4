"""Exception hierarchy shared by every stage of the pipeline.

``ConfigError`` and its subclasses are usage problems (the CLI exits with 2);
every other ``Seal2RealError`` is a runtime failure (exit 1).
"""


class Seal2RealError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(Seal2RealError):
    """Invalid configuration, flag or argument value."""


# seal_synth
class EmptyTextPool(ConfigError):
    pass


class InvalidRange(ConfigError):
    pass


class InvalidSealSpec(Seal2RealError):
    pass


class TextTooLongForArc(Seal2RealError):
    pass


class WarpOutOfBounds(Seal2RealError):
    pass


class OutOfBounds(Seal2RealError):
    pass


# diffusion_core
class InvalidBetaRange(ConfigError):
    pass


class InvalidSteps(ConfigError):
    pass


class IndivisibleDims(Seal2RealError):
    pass


class StepOutOfRange(Seal2RealError):
    pass


class ShapeMismatch(Seal2RealError):
    pass


class PromptDimMismatch(Seal2RealError):
    pass


class CheckpointError(Seal2RealError):
    pass


# stage1_prior / stage2_forger
class EmptyString(ConfigError):
    pass


class BadDims(ConfigError):
    pass


class EmptyBatch(Seal2RealError):
    pass


class PhaseViolation(Seal2RealError):
    pass


class EmptyDataset(Seal2RealError):
    pass


class MissingStage1State(Seal2RealError):
    pass


# dataset_builder
class InvalidConfig(ConfigError):
    pass


class BadRatios(ConfigError):
    pass


class IoFailure(Seal2RealError):
    pass


class EmptyDirectory(Seal2RealError):
    pass


# eval_downstream
class MissingLabels(Seal2RealError):
    pass


class ClassMissing(Seal2RealError):
    pass


class SizeMismatch(Seal2RealError):
    pass
