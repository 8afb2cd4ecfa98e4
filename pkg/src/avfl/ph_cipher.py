"""Pohlig-Hellman exponentiation cipher over the multiplicative group mod a safe prime.

Encryption raises a group element to a secret exponent ``a`` coprime to p - 1;
decryption raises it to ``a^-1 mod (p - 1)``.  Because exponents commute, two
parties can layer their keys in either order, which is what the set
intersection protocol relies on.

Modular exponentiation here is not constant time.  Parties are assumed
honest-but-curious, so timing side channels are outside the threat model.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from typing import Optional, Union

import gmpy2

from .primes import default_rng, is_probable_prime, random_safe_prime

DEFAULT_GROUP_BITS = 2048
MIN_GROUP_BITS = 5


@dataclass(frozen=True)
class GroupParams:
    """Safe-prime group: ``p = 2q + 1`` with p and q prime."""

    p: int
    q: int

    def __post_init__(self):
        if self.p != 2 * self.q + 1:
            raise ValueError("group modulus must satisfy p = 2q + 1")

    @property
    def bits(self) -> int:
        return self.p.bit_length()

    def validate(self, min_bits: int = MIN_GROUP_BITS, rng: Optional[random.Random] = None) -> "GroupParams":
        """Re-check primality of p and q; used when a peer proposes the group."""
        if self.bits < min_bits:
            raise ValueError(f"group has {self.bits} bits, need at least {min_bits}")
        if not (is_probable_prime(self.q, rng=rng) and is_probable_prime(self.p, rng=rng)):
            raise ValueError("group parameters are not a safe prime")
        return self


@dataclass(frozen=True)
class PhKey:
    """Secret exponent pair ``(a, a^-1 mod p-1)`` bound to its group."""

    group: GroupParams
    a: int
    a_inv: int

    def __post_init__(self):
        order = self.group.p - 1
        if math.gcd(self.a, order) != 1 or (self.a * self.a_inv) % order != 1:
            raise ValueError("a_inv is not the inverse of a modulo p - 1")

    def __repr__(self):
        return f"PhKey(p=<{self.group.bits}-bit>, a=<hidden>)"


def generate_group(bits: int = DEFAULT_GROUP_BITS, rng: Optional[random.Random] = None,
                   max_candidates: Optional[int] = None) -> GroupParams:
    """Sample a fresh safe-prime group whose modulus has exactly ``bits`` bits."""
    if bits < MIN_GROUP_BITS:
        raise ValueError(f"bits must be >= {MIN_GROUP_BITS}")
    p = random_safe_prime(bits, rng=rng, max_candidates=max_candidates)
    return GroupParams(p=p, q=(p - 1) // 2)


def keygen(group: GroupParams, rng: Optional[random.Random] = None) -> PhKey:
    rng = default_rng(rng)
    order = group.p - 1
    while True:
        a = rng.randrange(3, order)
        if math.gcd(a, order) == 1:
            return PhKey(group, a, pow(a, -1, order))


def key_from_exponent(group: GroupParams, a: int) -> PhKey:
    """Build a key from a chosen exponent; raises ValueError if not invertible."""
    order = group.p - 1
    if math.gcd(a, order) != 1:
        raise ValueError(f"exponent {a} is not coprime to p - 1 = {order}")
    return PhKey(group, a, pow(a, -1, order))


def _check_element(group: GroupParams, m: int) -> None:
    if not 1 <= m < group.p:
        raise ValueError(f"value is not an element of the group mod p ({group.bits}-bit)")


def encrypt(key: PhKey, m: int) -> int:
    _check_element(key.group, m)
    return int(gmpy2.powmod(m, key.a, key.group.p))


def decrypt(key: PhKey, c: int) -> int:
    _check_element(key.group, c)
    return int(gmpy2.powmod(c, key.a_inv, key.group.p))


def hash_to_group(group: GroupParams, ident: Union[bytes, str]) -> int:
    """Deterministically map an identifier to a nonzero element mod p.

    SHA-256 is iterated over ``counter || ident`` until the digest stream holds
    128 more bits than p, the stream is read as a big-endian integer and reduced
    mod p.  A zero result restarts with the next counter block.
    """
    if isinstance(ident, str):
        ident = ident.encode("utf-8")
    if not ident:
        raise ValueError("identifier must be nonempty")
    need = (group.bits + 128 + 7) // 8
    counter = 0
    while True:
        stream = b""
        while len(stream) < need:
            stream += hashlib.sha256(counter.to_bytes(4, "big") + ident).digest()
            counter += 1
        value = int.from_bytes(stream[:need], "big") % group.p
        if value:
            return value


def element_to_hex(value: int) -> str:
    if value <= 0:
        raise ValueError("group elements are positive")
    return format(value, "x")


def element_from_hex(text: str, group: Optional[GroupParams] = None) -> int:
    if not text or text.strip("0123456789abcdef") or text[0] == "0":
        raise ValueError(f"not a canonical lowercase hex element: {text!r}")
    value = int(text, 16)
    if value == 0:
        raise ValueError("zero is not a group element")
    if group is not None:
        _check_element(group, value)
    return value
