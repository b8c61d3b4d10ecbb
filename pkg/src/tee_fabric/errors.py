"""Exception hierarchy shared by every subsystem."""


class FabricError(Exception):
    """Base class; ``code`` is the stable name written to traces."""

    code = "FabricError"

    def __init__(self, *args):
        super().__init__(*args)


# crypto
class CryptoError(FabricError):
    code = "CryptoError"


class NonceReuse(CryptoError):
    code = "NonceReuse"


class AuthFailure(CryptoError):
    code = "AuthFailure"


class ReplayDetected(CryptoError):
    code = "ReplayDetected"


class InvalidPublicKey(CryptoError):
    code = "InvalidPublicKey"


class KeyZeroized(CryptoError):
    code = "KeyZeroized"


# fabric
class UnknownPrincipal(FabricError):
    code = "UnknownPrincipal"


class TamperProof(FabricError):
    code = "TamperProof"


class StepLimitExceeded(FabricError):
    code = "StepLimitExceeded"


class AccessDenied(FabricError):
    code = "AccessDenied"


class NoRoute(AccessDenied):
    """No physical link exists between the two endpoints."""

    code = "NoRoute"


# manifest
class SchemaError(FabricError):
    code = "SchemaError"


class UnknownResourceType(SchemaError):
    code = "UnknownResourceType"


class UnknownPolicy(SchemaError):
    code = "UnknownPolicy"


# node lifecycle
class NotInReset(FabricError):
    code = "NotInReset"


class NotBooted(FabricError):
    code = "NotBooted"


class NotAttached(FabricError):
    code = "NotAttached"


class AlreadyAllocated(FabricError):
    code = "AlreadyAllocated"


class NoSuchBinding(FabricError):
    code = "NoSuchBinding"


class NoSuchJob(FabricError):
    code = "NoSuchJob"


class OverlapError(FabricError):
    code = "OverlapError"


class CapacityExceeded(FabricError):
    code = "CapacityExceeded"


class UnregisteredRegion(FabricError):
    code = "UnregisteredRegion"


class UnmappedAddress(FabricError):
    code = "UnmappedAddress"


class OutOfRange(FabricError):
    code = "OutOfRange"


class DimensionMismatch(FabricError):
    code = "DimensionMismatch"


# tenant / management plane
class ManifestInvalid(FabricError):
    code = "ManifestInvalid"


class AttestationFailed(FabricError):
    code = "AttestationFailed"

    def __init__(self, reason, detail: str = ""):
        self.reason = reason
        super().__init__(f"{getattr(reason, 'value', reason)}: {detail}" if detail else str(getattr(reason, "value", reason)))


class CoverageGap(FabricError):
    code = "CoverageGap"


class SessionNotRunning(FabricError):
    code = "SessionNotRunning"


class NoResponse(FabricError):
    """An exchange produced no authenticated reply (dropped or rejected in flight)."""

    code = "NoResponse"


class InsufficientResources(FabricError):
    code = "InsufficientResources"


class ConfigError(FabricError):
    code = "ConfigError"
