"""Symmetric vs asymmetric classification of a two-party vertical federation.

A party is *weak* when its share of the whole ID space is below 10^(-1/2),
i.e. ``log10(n_i / n_world) < -1/2``.  The comparison is done in exact integer
arithmetic as ``10 * n_i**2 < n_world**2``, so a ratio sitting exactly on the
threshold would count as symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

from .errors import DataError

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"


@dataclass(frozen=True)
class FederationProfile:
    """Pre-alignment ID-space sizes of parties 1 and 2 and of their union."""

    n1: int
    n2: int
    n_world: int

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise DataError("both parties must hold at least one id")
        if not max(self.n1, self.n2) <= self.n_world <= self.n1 + self.n2:
            raise DataError(
                f"n_world={self.n_world} cannot be the union of sets of sizes {self.n1} and {self.n2}"
            )

    @classmethod
    def from_sets(cls, ids1, ids2) -> "FederationProfile":
        ids1, ids2 = set(ids1), set(ids2)
        return cls(len(ids1), len(ids2), len(ids1 | ids2))


@dataclass(frozen=True)
class FederationClass:
    kind: Literal["symmetric", "asymmetric"]
    weak_party: Optional[int] = None
    strong_party: Optional[int] = None

    def __post_init__(self):
        roles = (self.weak_party, self.strong_party)
        if self.kind == ASYMMETRIC:
            if None in roles or self.weak_party == self.strong_party:
                raise ValueError("an asymmetric federation needs distinct weak and strong parties")
        elif self.kind == SYMMETRIC:
            if roles != (None, None):
                raise ValueError("a symmetric federation has no weak/strong roles")
        else:
            raise ValueError(f"unknown federation kind {self.kind!r}")

    @property
    def is_asymmetric(self) -> bool:
        return self.kind == ASYMMETRIC

    def describe(self) -> str:
        if self.is_asymmetric:
            return f"AVFL: party {self.weak_party} is weak, party {self.strong_party} is strong"
        return "SVFL: neither party is weak"


def is_weak(n_party: int, n_world: int) -> bool:
    return 10 * n_party * n_party < n_world * n_world


def classify(profile: FederationProfile) -> FederationClass:
    weak1 = is_weak(profile.n1, profile.n_world)
    weak2 = is_weak(profile.n2, profile.n_world)
    if weak1 and weak2:
        # unreachable when n_world is the union: one side holds at least half
        raise DataError("both parties classify as weak; the profile violates n_world = |I1 u I2|")
    if weak1:
        return FederationClass(ASYMMETRIC, weak_party=1, strong_party=2)
    if weak2:
        return FederationClass(ASYMMETRIC, weak_party=2, strong_party=1)
    return FederationClass(SYMMETRIC)
