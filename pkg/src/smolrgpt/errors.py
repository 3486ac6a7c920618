"""Exception hierarchy shared across the package.

The CLI maps the three base classes onto exit codes: ``ConfigError`` -> 1,
``DataError`` -> 2, ``NumericError`` -> 3.
"""


class SmolRGPTError(Exception):
    pass


class ConfigError(SmolRGPTError, ValueError):
    pass


class DataError(SmolRGPTError, ValueError):
    pass


class NumericError(SmolRGPTError, ArithmeticError):
    pass


# data_ingest
class MalformedRecord(DataError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class MaskCountMismatch(DataError):
    def __init__(self, sample_id: str, n_placeholders: int, n_masks: int):
        super().__init__(
            f"sample {sample_id!r}: {n_placeholders} <mask> placeholders but {n_masks} masks"
        )
        self.sample_id = sample_id


class MissingDepth(DataError):
    def __init__(self, sample_id: str):
        super().__init__(f"sample {sample_id!r} references regions but has no depth map")
        self.sample_id = sample_id


class LengthMismatch(DataError):
    pass


class UnsupportedCategory(DataError):
    pass


# shapes / modalities
class ShapeError(SmolRGPTError, ValueError):
    pass


class NonFiniteInput(DataError):
    pass


class IndivisibleFactor(ShapeError):
    pass


class IndivisibleChannels(ShapeError):
    pass


class ModalityMismatch(SmolRGPTError, TypeError):
    pass


class EmptyRegion(DataError):
    pass


# sequence_builder
class RoleOrderError(DataError):
    pass


class RegionCountMismatch(DataError):
    pass


class MissingImageTokens(DataError):
    pass


# lm_core
class SequenceTooLong(DataError):
    pass


class EmptyLossMask(DataError):
    pass


# curriculum
class UnknownStage(ConfigError):
    pass


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, stage_id: int, step: int, value: float):
        super().__init__(f"stage {stage_id}: non-finite loss {value} at step {step}")
        self.stage_id = stage_id
        self.step = step
        self.value = value


class CorruptArchive(DataError):
    pass


# evaluator
class UnclassifiableQuestion(DataError):
    pass


class ExtractionFailure(DataError):
    def __init__(self, text: str, qtype):
        super().__init__(f"could not extract a {getattr(qtype, 'value', qtype)} answer from {text!r}")
        self.text = text
        self.qtype = qtype


class VariantMismatch(DataError):
    pass
