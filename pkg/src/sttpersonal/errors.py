from pathlib import Path
from typing import Iterable

from . import errcode


class SttError(Exception):
    """sttpersonalの例外の基底クラス。``code`` は :mod:`sttpersonal.errcode` の値です。"""

    code: int = errcode.E_SUCCESS
    exitcode: int = 4

    def __init__(self, message: str = "") -> None:
        super().__init__(message or type(self).__name__)

    @classmethod
    def throw_if(cls, cond: bool, message: str = "") -> None:
        if cond:
            raise cls(message)


class ConfigError(SttError):
    code = errcode.E_CONFIG
    exitcode = 2


class TooShort(SttError):
    code = errcode.E_TOO_SHORT


class SilentSignal(SttError):
    code = errcode.E_SILENT_SIGNAL


class BadAudio(SttError):
    code = errcode.E_BAD_AUDIO


class ShapeMismatch(SttError):
    code = errcode.E_SHAPE_MISMATCH


class TapeReuse(SttError):
    code = errcode.E_TAPE_REUSE


class Infeasible(SttError):
    code = errcode.E_INFEASIBLE
    index: int | None

    def __init__(self, message: str = "", index: int | None = None) -> None:
        if index is not None:
            message = f"item {index}: {message}"
        super().__init__(message)
        self.index = index


class BudgetExceeded(SttError):
    code = errcode.E_BUDGET_EXCEEDED


class LabelError(SttError):
    code = errcode.E_BAD_LABEL


class NonFiniteLoss(SttError):
    code = errcode.E_NONFINITE_LOSS


class EmptyDataset(SttError):
    code = errcode.E_EMPTY_DATASET
    exitcode = 3


class NonFinite(SttError):
    code = errcode.E_NONFINITE


class BadMagic(SttError):
    code = errcode.E_BAD_MAGIC


class VersionMismatch(SttError):
    code = errcode.E_VERSION_MISMATCH


class ConfigMismatch(SttError):
    code = errcode.E_CONFIG_MISMATCH


class TruncatedFile(SttError):
    code = errcode.E_TRUNCATED_FILE


class ChecksumMismatch(SttError):
    code = errcode.E_CHECKSUM_MISMATCH


class CheckpointIOError(SttError):
    code = errcode.E_CHECKPOINT_IO
    path: Path

    def __init__(self, path: str | Path, cause: OSError) -> None:
        super().__init__(f"{path}: {cause.strerror or cause}")
        self.path = Path(path)


class BadTranscript(SttError):
    code = errcode.E_BAD_TRANSCRIPT
    offending: tuple[str, ...]

    def __init__(self, offending: Iterable[str]) -> None:
        self.offending = tuple(sorted(set(offending)))
        super().__init__("characters outside the alphabet: " + " ".join(repr(c) for c in self.offending))


class NotReady(SttError):
    code = errcode.E_NOT_READY
    exitcode = 3
    count: int
    trigger: int

    def __init__(self, count: int, trigger: int) -> None:
        super().__init__(f"cache holds {count} utterances, training starts at N={trigger}")
        self.count = count
        self.trigger = trigger


class BadToken(SttError):
    code = errcode.E_BAD_TOKEN


class EmptyGrid(SttError):
    code = errcode.E_EMPTY_GRID
    exitcode = 2
