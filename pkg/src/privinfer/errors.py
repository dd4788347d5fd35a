"""Shared exception types."""


class ParameterError(ValueError):
    """Ring/NTT parameter is unusable (e.g. modulus not ≡ 1 mod 2n)."""


class EncodingError(ValueError):
    """Operation applied to a ciphertext with the wrong encoding or domain."""


class AccumulatorBudgetError(RuntimeError):
    """Lazy accumulation would exceed the overflow-safe term budget."""


class ProtocolError(RuntimeError):
    """2PC state violation: wrong round, mask or zero-ciphertext reuse, pool exhaustion."""


class HandshakeError(RuntimeError):
    """The two endpoints disagree on protocol version or ring parameters."""


class ModelError(ValueError):
    """Model file malformed, dimension chain broken, or scale budget violated."""
