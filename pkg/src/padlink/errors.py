"""Exception hierarchy shared across the package.

Everything raised on purpose derives from PadlinkError so callers can catch
one base.  Names describe the refused condition, not the module that raised
it; several are raised from more than one place.
"""

from __future__ import annotations


class PadlinkError(Exception):
    """Base class for every deliberate failure in this package."""


# --- codec ---------------------------------------------------------------

class SliceLengthMismatch(PadlinkError):
    """A key slice does not have the length the operation requires."""


class SliceAlreadyConsumed(PadlinkError):
    """A key slice was read after mark_consumed() scrubbed it."""


class TooShort(PadlinkError):
    """A datagram is shorter than the 16-byte header and cannot be a packet."""


# --- vault ---------------------------------------------------------------

class VaultError(PadlinkError):
    """Base class for pad-vault failures."""


class MalformedLine(VaultError):
    """A metadata line does not match the fixed-width column format."""


class FieldOverflow(VaultError):
    """A metadata field is outside the range its column width can express."""


class DuplicatePadId(VaultError):
    """Two metadata rows (or an install) claim the same pad number."""


class TooManyPads(VaultError):
    """The metadata file would exceed the configured pad-count ceiling."""


class IoFailure(VaultError):
    """An underlying filesystem operation failed."""


class SourceTooShort(VaultError):
    """The entropy source ran out before the install plan was satisfied."""


class DestinationNotEmpty(VaultError):
    """An install refused to write into a non-empty destination."""


class VaultLocked(VaultError):
    """vault.locked exists: a previous run died without shutting down."""


class NotLocked(VaultError):
    """A mutating vault operation ran without the lock held."""


class PageMissing(VaultError):
    """The page file named by the metadata cursor does not exist."""


class PadExhausted(VaultError):
    """The cursor for this direction is at or past the pad's page count."""


class InsufficientPage(VaultError):
    """Fewer unconsumed bytes remain on the loaded page than requested."""


class PageCollision(VaultError):
    """A page turn would make the transmit and receive pages identical."""


class PageAlreadyUsed(VaultError):
    """A page turn named a page number that was already spent."""


class CorruptSessionData(VaultError):
    """session.data failed its magic/length checks and cannot be trusted."""


# --- session -------------------------------------------------------------

class Blocked(PadlinkError):
    """The session is waiting on an ACK (or queued work) and refused a send."""


class NotConnected(PadlinkError):
    """The operation needs a connected session and this one is not."""


class GrantCollision(PadlinkError):
    """A page-turn grant named a page this pad cannot take; session halted."""


# --- transport -----------------------------------------------------------

class OversizeDatagram(PadlinkError):
    """A datagram exceeds the 1,432-byte wire maximum."""


class SocketFailure(PadlinkError):
    """A real-mode socket operation failed at the OS level."""


# --- hub -----------------------------------------------------------------

class ReserveExhausted(PadlinkError):
    """The reserve pad has fewer uncarved pages than the request."""


class ClientUnreachable(PadlinkError):
    """A distribution target has no connected session."""


class BadDistribution(PadlinkError):
    """An incoming pad-distribution file violates the naming convention
    or its manifest cannot be decoded."""


# --- app -----------------------------------------------------------------

class ConfigError(PadlinkError):
    """Base class for configuration-file problems (daemon exits 3)."""


class UnknownDirective(ConfigError):
    """The configuration file used a directive this build does not know."""


class MissingRequired(ConfigError):
    """A directive required by the selected mode is absent."""


class UnknownCommand(PadlinkError):
    """An operator line started with '/' but matched no command."""


class RejectedWhileBlocked(PadlinkError):
    """The selected session is blocked and the command cannot run now."""


class NoRxDir(PadlinkError):
    """This end has no receive directory: incoming file transfers refused."""


class LocalReadFailure(PadlinkError):
    """The file named in a send command cannot be read from local disk."""


class CrashInjected(RuntimeError):
    """Test-only: the /Z command detonated.  Deliberately NOT a
    PadlinkError so no orderly error path catches it."""
