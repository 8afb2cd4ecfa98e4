"""Paillier cryptosystem (g = n + 1) and a signed fixed-point codec.

Plaintexts live in Z_n.  Reals are carried as ``round(x * scale)`` with
negatives wrapped to ``n - |v|``; every ciphertext records how many scale
factors its plaintext carries so that products of two encoded values
(``scale_exponent == 2``) decode correctly.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence, Union

import gmpy2
import numpy as np

from .errors import CodecOverflowError, ResourceExhaustedError, ScaleMismatchError
from .primes import default_rng, random_prime

DEFAULT_KEY_BITS = 2048
DEFAULT_SCALE = 1 << 40
MAX_SCALE_EXPONENT = 3


@dataclass(frozen=True)
class HomPublicKey:
    n: int

    @property
    def g(self) -> int:
        return self.n + 1

    @cached_property
    def n_sq(self):
        return gmpy2.mpz(self.n) ** 2

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def public_key(self) -> "HomPublicKey":
        return self


@dataclass(frozen=True, repr=False)
class HomKeypair:
    """Public modulus plus the decryption secrets ``lam`` and ``mu``.

    ``p`` and ``q`` are kept so the key holder can encrypt through the CRT.
    """

    n: int
    lam: int
    mu: int
    p: int
    q: int

    @property
    def g(self) -> int:
        return self.n + 1

    @cached_property
    def public_key(self) -> HomPublicKey:
        return HomPublicKey(self.n)

    @property
    def n_sq(self):
        return self.public_key.n_sq

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @cached_property
    def _crt(self):
        p_sq, q_sq = gmpy2.mpz(self.p) ** 2, gmpy2.mpz(self.q) ** 2
        return p_sq, q_sq, gmpy2.invert(p_sq, q_sq)

    def __repr__(self):
        return f"HomKeypair(n=<{self.bits}-bit>)"


PublicKeyLike = Union[HomPublicKey, HomKeypair]


@dataclass(frozen=True)
class Ciphertext:
    value: int
    scale_exponent: int = 0

    def __post_init__(self):
        if not 0 <= self.scale_exponent <= MAX_SCALE_EXPONENT:
            raise ValueError(f"scale_exponent must be in [0, {MAX_SCALE_EXPONENT}]")

    def to_wire(self) -> dict:
        return {"value": format(int(self.value), "x"), "scale_exponent": self.scale_exponent}

    @classmethod
    def from_wire(cls, obj: dict, pk: Optional[PublicKeyLike] = None) -> "Ciphertext":
        value = int(obj["value"], 16)
        if pk is not None and not 0 < value < pk.n_sq:
            raise ValueError("ciphertext outside [1, n^2)")
        return cls(value, int(obj["scale_exponent"]))


def hom_keygen(bits: int = DEFAULT_KEY_BITS, rng: Optional[random.Random] = None,
               max_candidates: Optional[int] = None) -> HomKeypair:
    """Generate a keypair whose modulus n has exactly ``bits`` bits."""
    if bits < 16:
        raise ValueError("key size must be at least 16 bits")
    rng = default_rng(rng)
    attempts = 0
    while max_candidates is None or attempts < max_candidates:
        attempts += 1
        p = random_prime(bits // 2, rng, max_candidates)
        q = random_prime(bits - bits // 2, rng, max_candidates)
        n = p * q
        if p == q or n.bit_length() != bits:
            continue
        if math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
        # with g = n + 1, L(g^lam mod n^2) = lam mod n
        mu = pow(lam, -1, n)
        return HomKeypair(n=n, lam=lam, mu=mu, p=p, q=q)
    raise ResourceExhaustedError(f"no {bits}-bit Paillier modulus within {max_candidates} attempts")


def _random_unit(n: int, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, n)
        if math.gcd(r, n) == 1:
            return r


def _nth_power_of_random(pk: PublicKeyLike, rng: random.Random):
    """Uniform random n-th residue mod n^2, i.e. r^n for uniform r in Z_n*."""
    if isinstance(pk, HomKeypair):
        # r^n mod p^2 depends only on r mod p and equals w(r)^q, where
        # w(t) = t^p mod p^2 is a bijection from Z_p* onto the (p-1)-th roots
        # of unity mod p^2.  Since gcd(q, p-1) = 1, raising to q permutes that
        # subgroup, so t^p for uniform t has the same distribution.
        p_sq, q_sq, p_sq_inv = pk._crt
        xp = gmpy2.powmod(rng.randrange(1, pk.p), pk.p, p_sq)
        xq = gmpy2.powmod(rng.randrange(1, pk.q), pk.q, q_sq)
        return xp + p_sq * ((xq - xp) * p_sq_inv % q_sq)
    return gmpy2.powmod(_random_unit(pk.n, rng), pk.n, pk.n_sq)


def hom_encrypt(pk: PublicKeyLike, m: int, rng: Optional[random.Random] = None,
                scale_exponent: int = 0) -> Ciphertext:
    """Encrypt ``m`` in [0, n) with fresh randomness.

    Passing the full keypair lets the key holder use the CRT for the r^n term;
    the ciphertext distribution is identical either way.
    """
    n = pk.n
    if not 0 <= m < n:
        raise ValueError("plaintext out of range [0, n)")
    rng = default_rng(rng)
    n_sq = pk.n_sq
    c = (1 + m * n) % n_sq * _nth_power_of_random(pk, rng) % n_sq
    return Ciphertext(int(c), scale_exponent)


def hom_decrypt(sk: HomKeypair, c: Ciphertext) -> int:
    n = sk.n
    u = gmpy2.powmod(c.value, sk.lam, sk.n_sq)
    return int((u - 1) // n * sk.mu % n)


def hom_add(pk: PublicKeyLike, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    if c1.scale_exponent != c2.scale_exponent:
        raise ScaleMismatchError(f"cannot add scale {c1.scale_exponent} to scale {c2.scale_exponent}")
    return Ciphertext(int(gmpy2.mpz(c1.value) * c2.value % pk.n_sq), c1.scale_exponent)


def hom_sum(pk: PublicKeyLike, cts: Iterable[Ciphertext]) -> Ciphertext:
    cts = iter(cts)
    total = next(cts)
    for c in cts:
        total = hom_add(pk, total, c)
    return total


def _signed_exponent(k: int, n: int) -> int:
    # exponents in the upper half of Z_n stand for negatives; raising the
    # inverse to |k| is cheaper and multiplies the plaintext by the same residue
    return k - n if k > n // 2 else k


def hom_scalar_mul(pk: PublicKeyLike, c: Ciphertext, k: int, k_scale: int = 0) -> Ciphertext:
    """Multiply the plaintext by ``k`` in [0, n); ``k_scale`` is k's codec scale (0 or 1)."""
    n = pk.n
    if not 0 <= k < n:
        raise ValueError("scalar out of range [0, n)")
    n_sq = pk.n_sq
    e = _signed_exponent(k, n)
    base = gmpy2.mpz(c.value)
    if e < 0:
        base, e = gmpy2.invert(base, n_sq), -e
    return Ciphertext(int(gmpy2.powmod(base, e, n_sq)), c.scale_exponent + k_scale)


def hom_dot(pk: PublicKeyLike, cts: Sequence[Ciphertext], ks: Sequence[int], k_scale: int = 0) -> Ciphertext:
    """Homomorphic inner product ``sum_i k_i * m_i``.

    Straus-style simultaneous exponentiation: one shared chain of squarings for
    all bases, positive and negative exponents accumulated separately and
    combined with a single inversion.  Zero scalars cost nothing.
    """
    if len(cts) != len(ks):
        raise ValueError("ciphertexts and scalars differ in length")
    if not cts:
        raise ValueError("empty inner product")
    scale = cts[0].scale_exponent
    n, n_sq = pk.n, pk.n_sq
    pos, neg = [], []
    for c, k in zip(cts, ks):
        if c.scale_exponent != scale:
            raise ScaleMismatchError("mixed scales in inner product")
        if not 0 <= k < n:
            raise ValueError("scalar out of range [0, n)")
        e = _signed_exponent(int(k), n)
        if e > 0:
            pos.append((gmpy2.mpz(c.value), e))
        elif e < 0:
            neg.append((gmpy2.mpz(c.value), -e))

    def multi_pow(pairs):
        acc = gmpy2.mpz(1)
        if not pairs:
            return acc
        top = max(e for _, e in pairs).bit_length()
        for bit in range(top - 1, -1, -1):
            acc = acc * acc % n_sq
            for b, e in pairs:
                if (e >> bit) & 1:
                    acc = acc * b % n_sq
        return acc

    result = multi_pow(pos)
    if neg:
        result = result * gmpy2.invert(multi_pow(neg), n_sq) % n_sq
    return Ciphertext(int(result), scale + k_scale)


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed-point encoding into Z_n with a power-of-two scale."""

    n: int
    scale: int = DEFAULT_SCALE

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def max_abs(self) -> int:
        return self.n // 2

    def encode(self, x: float, scale_exponent: int = 1) -> int:
        if not math.isfinite(x):
            raise CodecOverflowError("cannot encode a non-finite value")
        v = round(x * self.scale ** scale_exponent)
        if abs(v) >= self.max_abs:
            raise CodecOverflowError(f"{x!r} overflows the plaintext space at scale^{scale_exponent}")
        return v % self.n

    def encode_array(self, x) -> list[int]:
        """Vectorized ``encode`` for scale exponent 1; returns Python ints."""
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise CodecOverflowError("cannot encode non-finite values")
        scaled = np.rint(x * float(self.scale))
        if scaled.size and np.max(np.abs(scaled)) >= min(self.max_abs, 2.0 ** 1000):
            raise CodecOverflowError("value overflows the plaintext space")
        n = self.n
        return [int(v) % n for v in scaled.ravel().tolist()]

    def decode(self, m: int, scale_exponent: int = 1) -> float:
        if not 0 <= m < self.n:
            raise ValueError("plaintext out of range [0, n)")
        if m > self.max_abs:
            m -= self.n
        return m / self.scale ** scale_exponent
