"""Exception hierarchy shared by every part of the simulator."""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimError):
    pass


class ScaleError(SimError):
    pass


class AddressError(SimError):
    pass


class AblationRefused(SimError):
    pass


# --- enclave instructions -------------------------------------------------

class IsaError(SimError):
    pass


class OutOfEpc(IsaError):
    pass


class OverlapError(IsaError):
    pass


class AlreadyInitialized(IsaError):
    pass


class NotInitialized(IsaError):
    pass


class AlreadyInEnclave(IsaError):
    pass


class NotInEnclave(IsaError):
    pass


class BiEnclaveEscapeFault(IsaError):
    pass


class LaunchEntryExhausted(IsaError):
    """A bi-enclave's launch-time EENTER budget has been used up."""


class NoSavedContext(IsaError):
    pass


class EnclaveDead(IsaError):
    pass


class NotOwner(IsaError):
    pass


class AlreadyShared(IsaError):
    pass


class UnknownCoOwner(IsaError):
    pass


class PendingExists(IsaError):
    pass


class NoPendingShare(IsaError):
    pass


class WrongAcceptor(IsaError):
    pass


class AcceptorRangeError(IsaError):
    """The shared page's virtual address lies outside the acceptor's ELRANGE."""


# --- memory accesses ------------------------------------------------------

class AccessFault(SimError):
    """Raised by load/store/fetch when translation does not yield usable data."""

    def __init__(self, outcome):
        super().__init__(str(outcome))
        self.outcome = outcome


# --- channels -------------------------------------------------------------

class ChannelError(SimError):
    pass


class ChannelNotAttested(ChannelError):
    pass


class MarshalOverflow(ChannelError):
    pass


class TypeMismatch(ChannelError):
    pass


class AttestationMismatch(ChannelError):
    def __init__(self, side: str, channel=None):
        super().__init__(f"attestation failed on {side} side")
        self.side = side
        self.channel = channel


class HandshakeTimeout(ChannelError):
    pass


class AuthFailure(ChannelError):
    pass


class FreshnessFailure(ChannelError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected counter {expected}, got {got}")
        self.expected = expected
        self.got = got


# --- monitor --------------------------------------------------------------

class MonitorError(SimError):
    pass


class ParseError(MonitorError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NoPolicyLoaded(MonitorError):
    pass


class NoChannel(MonitorError):
    pass


class PolicyDigestMismatch(MonitorError):
    pass


class PolicyDenied(MonitorError):
    pass


class DeniedByRule(PolicyDenied):
    def __init__(self, index: int, whitelist_miss: bool = False):
        what = "no whitelist rule matched" if whitelist_miss else "blacklisted"
        super().__init__(f"rule {index}: {what}")
        self.index = index
        self.whitelist_miss = whitelist_miss


class DeniedByDefault(PolicyDenied):
    def __init__(self, sysno: int):
        super().__init__(f"syscall {sysno} not in policy")
        self.sysno = sysno


class EnclaveTerminated(MonitorError):
    pass


class IagoViolation(MonitorError):
    KINDS = ("RangeViolation", "UnknownDescriptor", "SharedSyncObject", "RawPointerLeak")

    def __init__(self, kind: str, detail: str = ""):
        if kind not in self.KINDS:
            raise ValueError(f"unknown Iago violation kind {kind!r}")
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


class ChainBroken(MonitorError):
    def __init__(self, index: int):
        super().__init__(f"accounting chain broken at entry {index}")
        self.index = index


# --- harness --------------------------------------------------------------

class ScenarioError(SimError):
    pass
