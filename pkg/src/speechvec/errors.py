"""Exception types shared across the package."""


class SpeechvecError(Exception):
    """Base class for every package-specific error."""


class DimensionError(SpeechvecError):
    """Operand shapes are incompatible for the requested operation."""


class SequenceTooShortError(SpeechvecError):
    """A frame sequence is shorter than the kernel that must slide over it."""


class EmptySequenceError(SpeechvecError):
    """An operation received an empty sequence or empty input list."""


class DegenerateVectorError(SpeechvecError):
    """A zero-norm vector reached an operation that needs a direction."""


class NumericError(SpeechvecError):
    """A forward or backward pass produced non-finite values."""


class VocabularyError(SpeechvecError):
    """A token index lies outside the vocabulary."""


class RangeError(SpeechvecError):
    """A scalar argument lies outside its documented range."""


class ParameterError(SpeechvecError):
    """A hyperparameter value is invalid (e.g. non-positive temperature)."""


class ConfigError(SpeechvecError):
    """A configuration document failed validation (unknown key, bad value)."""


class InfeasibleLengthError(SpeechvecError):
    """The input sequence is too short to ever emit the target labels."""


class TrainingDivergenceError(SpeechvecError):
    """A gradient went non-finite during optimization."""


class InsufficientSampleError(SpeechvecError):
    """Too few observations to compute the requested statistic."""


class DatasetError(SpeechvecError):
    """A corpus or query set is malformed (missing gold ids, bad records)."""


class DependencyError(SpeechvecError):
    """A pipeline stage was requested without its prerequisite artifact."""


class ScheduleExhaustedError(SpeechvecError):
    """The learning-rate schedule was queried past its final step."""


class EmptyTranscriptError(SpeechvecError):
    """Greedy decoding produced an empty token sequence."""


class CheckpointError(SpeechvecError):
    """A checkpoint manifest and its parameter blob disagree."""
