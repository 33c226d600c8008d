"""Exception hierarchy shared by every trustchain module."""


class TrustchainError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(TrustchainError, ValueError):
    """An input violates a documented precondition."""


class NotFoundError(TrustchainError, LookupError):
    """A named object (section, handle, client, ...) does not exist."""


class VerificationError(TrustchainError):
    """A cryptographic or trust check failed."""


class EnrollmentError(VerificationError):
    """A signed signature list was refused by the key store."""


class RoleError(ValidationError):
    """A key or certificate was used outside its role."""


class DecryptionError(VerificationError):
    """Asymmetric decryption failed. Deliberately carries no detail."""

    def __init__(self) -> None:
        super().__init__("decryption failed")


class UnsealError(VerificationError):
    """A sealed blob could not be released."""


class PinningViolation(VerificationError):
    """A pinned client tried to register a different public key."""


class BlockIntegrityError(VerificationError):
    """An encrypted block failed authentication."""

    def __init__(self, index: int, reason: str = "authentication failed") -> None:
        super().__init__(f"block {index}: {reason}")
        self.index = index


class ProtocolError(TrustchainError):
    """Malformed or refused wire message."""


class ConfigError(ValidationError):
    """A boot configuration violates the lattice invariants."""


class PrerequisiteError(TrustchainError):
    """An operation needs artifacts produced by an earlier step."""


class AccessDenied(VerificationError):
    """The caller lacks the capability an operation requires."""
