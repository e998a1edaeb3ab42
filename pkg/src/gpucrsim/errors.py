"""Exception hierarchy shared by all simulator layers."""


class SimError(Exception):
    """Base class for simulator errors."""


class PastTime(SimError):
    pass


class Livelock(SimError):
    pass


class OutOfDeviceMemory(SimError):
    pass


class InvalidLocator(SimError):
    pass


class UseAfterFree(SimError):
    pass


class UnknownApi(SimError):
    pass


class FreedBuffer(SimError):
    pass


class BadState(SimError):
    pass


class PendingKernels(SimError):
    pass


class CorruptDag(SimError):
    pass


class InvariantViolation(SimError):
    pass


class CorruptImage(SimError):
    """Raised by the image parser; carries the byte offset of the defect."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"corrupt image at offset {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class OracleMismatch(SimError):
    pass
