"""Exception hierarchy shared by the device, filesystem and harness layers."""


class FlashError(Exception):
    """Base class for raw device errors."""


class InvalidGeometry(FlashError):
    pass


class RewriteWithoutErase(FlashError):
    pass


class BadBlockAccess(FlashError):
    pass


class OutOfRange(FlashError):
    pass


class Oversize(FlashError):
    pass


class PowerLoss(FlashError):
    """Raised by the device when an armed crash fires."""


class FsError(Exception):
    """Base class for filesystem errors."""


class DeviceTooSmall(FsError):
    pass


class NotFormatted(FsError):
    pass


class VariantMismatch(FsError):
    pass


class CorruptAnchor(FsError):
    pass


class StaleHandle(FsError):
    pass


class NotFound(FsError):
    pass


class AlreadyExists(FsError):
    pass


class NoSpace(FsError):
    pass


class RangeBeyondEof(FsError):
    pass


class ChecksumMismatch(FsError):
    pass


class DirNotEmpty(FsError):
    pass


class NotADirectory(FsError):
    pass


class IsADirectory(FsError):
    pass


class InvalidPath(FsError):
    pass


class TooLarge(Exception):
    """Tree generation refused by the expansion guard."""


class NeedFourPoints(ValueError):
    pass
