"""Probable-prime and safe-prime generation.

Candidates are filtered by trial division against a table of small primes and
then by Miller-Rabin with 40 random bases, which bounds the error probability
by 4**-40 = 2**-80 per accepted number.
"""
from __future__ import annotations

import random
import secrets
from typing import Optional

import gmpy2
import numpy as np

from .errors import ResourceExhaustedError

MR_ROUNDS = 40
_SIEVE_LIMIT = 1 << 16


def _small_primes(limit: int) -> np.ndarray:
    flags = np.ones(limit, dtype=bool)
    flags[:2] = False
    for i in range(2, int(limit ** 0.5) + 1):
        if flags[i]:
            flags[i * i :: i] = False
    return np.flatnonzero(flags)


SMALL_PRIMES = _small_primes(_SIEVE_LIMIT)
_ODD_SMALL_PRIMES = [int(p) for p in SMALL_PRIMES[1:]]


def default_rng(rng: Optional[random.Random] = None) -> random.Random:
    return rng if rng is not None else secrets.SystemRandom()


def is_probable_prime(n: int, rounds: int = MR_ROUNDS, rng: Optional[random.Random] = None) -> bool:
    """Miller-Rabin test with ``rounds`` random bases."""
    if n < 2:
        return False
    for p in _ODD_SMALL_PRIMES[:200]:
        if n == p:
            return True
        if n % p == 0:
            return False
    if n % 2 == 0:
        return n == 2
    rng = default_rng(rng)
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    mn = gmpy2.mpz(n)
    bases = [2] + [rng.randrange(3, n - 1) for _ in range(rounds - 1)] if n > 5 else [2]
    for a in bases:
        x = gmpy2.powmod(a, d, mn)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % mn
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(bits: int, rng: Optional[random.Random] = None, max_candidates: Optional[int] = None) -> int:
    """Uniform-ish random prime with exactly ``bits`` bits (top two bits set)."""
    if bits < 3:
        raise ValueError("bits must be >= 3")
    rng = default_rng(rng)
    tried = 0
    while max_candidates is None or tried < max_candidates:
        tried += 1
        top = 0b11 << (bits - 2) if bits >= 4 else 1 << (bits - 1)
        cand = rng.getrandbits(bits) | top | 1
        cand &= (1 << bits) - 1
        if is_probable_prime(cand, rng=rng):
            return cand
    raise ResourceExhaustedError(f"no {bits}-bit prime within {max_candidates} candidates")


def _safe_prime_small(bits: int, rng: random.Random, max_candidates: Optional[int]) -> int:
    # below the sieve bound every q would be "divisible by a small prime", so sample directly
    lo, hi = 1 << (bits - 2), 1 << (bits - 1)
    tried = 0
    while max_candidates is None or tried < max_candidates:
        tried += 1
        q = rng.randrange(lo, hi)
        if is_probable_prime(q, rng=rng) and is_probable_prime(2 * q + 1, rng=rng):
            return 2 * q + 1
    raise ResourceExhaustedError(f"no {bits}-bit safe prime within {max_candidates} candidates")


def random_safe_prime(
    bits: int,
    rng: Optional[random.Random] = None,
    max_candidates: Optional[int] = None,
    window: int = 1 << 14,
) -> int:
    """Random p = 2q + 1 with both p and q prime and p of exactly ``bits`` bits.

    Sieves a window of consecutive odd q candidates so that neither q nor 2q+1
    has a factor below 2**16, then runs Miller-Rabin on the survivors.
    ``max_candidates`` bounds the number of q values examined (sieved or tested).
    """
    if bits < 5:
        raise ValueError("bits must be >= 5 (the smallest safe prime with an odd q is 7)")
    rng = default_rng(rng)
    if bits <= 24:
        return _safe_prime_small(bits, rng, max_candidates)

    examined = 0
    primes = SMALL_PRIMES[1:]
    inv2 = (primes + 1) // 2  # inverse of 2 modulo each odd prime
    while max_candidates is None or examined < max_candidates:
        q0 = rng.getrandbits(bits - 1) | (1 << (bits - 2)) | 1
        q0 &= (1 << (bits - 1)) - 1
        n_cand = window
        if max_candidates is not None:
            n_cand = min(n_cand, max_candidates - examined)
        examined += n_cand
        # q = q0 + 2k; mark k where q or 2q+1 is divisible by a small prime
        alive = np.ones(n_cand, dtype=bool)
        r = np.array([q0 % int(p) for p in primes], dtype=np.int64)
        k_q = (-r * inv2) % primes
        k_p = (((primes - 1) // 2 - r) % primes * inv2) % primes
        for p, a, b in zip(primes.tolist(), k_q.tolist(), k_p.tolist()):
            if p >= n_cand:
                if a < n_cand:
                    alive[a] = False
                if b < n_cand:
                    alive[b] = False
            else:
                alive[a::p] = False
                alive[b::p] = False
        for k in np.flatnonzero(alive).tolist():
            q = q0 + 2 * k
            if q.bit_length() != bits - 1:
                break
            # cheap base-2 Fermat filter on p before the full tests
            p = 2 * q + 1
            if gmpy2.powmod(2, p - 1, p) != 1:
                continue
            if is_probable_prime(q, rng=rng) and is_probable_prime(p, rng=rng):
                return p
    raise ResourceExhaustedError(f"no {bits}-bit safe prime within {max_candidates} candidates")
