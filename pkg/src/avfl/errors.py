"""Exception hierarchy shared by the protocol modules."""


class AvflError(Exception):
    """Base class for all errors raised by this package."""


class ResourceExhaustedError(AvflError):
    """A randomized search (prime generation, key sampling) ran out of budget."""


class DataError(AvflError, ValueError):
    """Input data violates a precondition (duplicate ids, bad shapes, ...)."""


class ProtocolStateError(AvflError):
    """A protocol transition was attempted out of order or with the wrong message."""


class IntegrityError(AvflError):
    """A peer sent values that cannot be valid for the negotiated session."""


class EmptyIntersectionError(AvflError):
    """The two ID sets share no element, so the obfuscation ratio is undefined."""


class ScaleMismatchError(AvflError, ValueError):
    """Homomorphic operands carry different fixed-point scales."""


class CodecOverflowError(AvflError, OverflowError):
    """A fixed-point value would wrap around the plaintext modulus."""


class TransportError(AvflError):
    """The channel to the peer failed or delivered a malformed frame."""


class PeerAbortError(ProtocolStateError):
    """The peer aborted the session and told us why."""


class DivergenceError(AvflError, FloatingPointError):
    """Training produced non-finite weights."""
