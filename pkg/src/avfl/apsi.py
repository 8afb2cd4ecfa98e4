"""Asymmetric private set intersection over the Pohlig-Hellman cipher.

The strong party (large ID set) ends up with an obfuscated superset of the
intersection; the weak party learns the exact intersection as well.  Both
roles are explicit state machines whose transitions can be driven one at a
time (tests) or end to end over an :class:`~avfl.transport.Endpoint`.

Message flow (strong = S, weak = W)::

    S -> W  apsi/1/group            proposed safe-prime group
    W -> S  apsi/1/group_ack        echo of the accepted modulus
    S -> W  apsi/4/strong_set       U_s  = {E_a(h(x))}
    W -> S  apsi/4/weak_set         U_w  = {E_b(h(x))}
    S -> W  apsi/6/weak_set_double  U_w' = {E_a(u) : u in U_w}
    W -> S  apsi/8/obf_double       U_obf' with U_s' n U_w' in U_obf' in U_s'
    S -> W  apsi/10/obf_single      {D_a(u) : u in U_obf'}
    W -> S  apsi/12/obf_reveal      {D_b(u)} = hashes of the obfuscated ids
    S -> W  apsi/12/obf_ids         obfuscated ids, named by the strong side

The weak party cannot invert hashes of IDs it never held, so it reveals the
obfuscated set as group elements and the strong party names them; the final
message hands those names back so the weak side can address the strong
party's rows during training.
"""
from __future__ import annotations

import enum
import logging
import math
import random
import threading
from dataclasses import dataclass
from typing import Iterable, Optional

from . import ph_cipher
from .errors import (
    DataError,
    EmptyIntersectionError,
    IntegrityError,
    PeerAbortError,
    ProtocolStateError,
)
from .ph_cipher import GroupParams, element_from_hex, element_to_hex
from .primes import default_rng
from .transport import Endpoint, InProcChannel

log = logging.getLogger(__name__)

DEFAULT_GROUP_BITS = ph_cipher.DEFAULT_GROUP_BITS


def check_id_set(ids: Iterable[str], name: str = "ids") -> frozenset:
    """Deduplicated, validated ID set; duplicates are a data error."""
    ids = list(ids)
    seen = set()
    dupes = []
    for x in ids:
        if not isinstance(x, str) or not x:
            raise DataError(f"{name}: identifiers must be nonempty strings, got {x!r}")
        if x in seen:
            dupes.append(x)
        seen.add(x)
    if dupes:
        raise DataError(f"{name}: duplicate ids {sorted(set(dupes))[:5]}")
    if not seen:
        raise DataError(f"{name}: empty id set")
    return frozenset(seen)


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"security number must lie in [0, 1], got {lam}")
    return lam


def obfuscated_target_size(n_strong: int, n_inter: int, lam: float) -> int:
    """``round(n_inter * (n_strong / n_inter) ** lam)`` clamped to ``[n_inter, n_strong]``."""
    lam = check_lambda(lam)
    if n_inter == 0:
        raise EmptyIntersectionError("the intersection is empty; the obfuscation ratio is undefined")
    if not 1 <= n_inter <= n_strong:
        raise ValueError(f"need 1 <= n_inter <= n_strong, got {n_inter}, {n_strong}")
    target = math.floor(n_inter * (n_strong / n_inter) ** lam + 0.5)
    return min(max(target, n_inter), n_strong)


@dataclass(frozen=True)
class ApsiResultStrong:
    obfuscated: frozenset


@dataclass(frozen=True)
class ApsiResultWeak:
    intersection: frozenset
    obfuscated: frozenset

    def __post_init__(self):
        if not self.intersection <= self.obfuscated:
            raise IntegrityError("intersection is not contained in the obfuscated set")


class Phase(enum.Enum):
    START = "start"
    GROUP_AGREED = "group_agreed"
    OWN_SET_ENCRYPTED = "own_set_encrypted"
    PEER_SET_DOUBLED = "peer_set_doubled"
    OBFUSCATED_SELECTED = "obfuscated_selected"
    LAYER_PEELED = "layer_peeled"
    REVEALED = "revealed"
    DONE = "done"


def _hex_list(values) -> list:
    return [element_to_hex(v) for v in sorted(values)]


def _parse_elements(group: GroupParams, items) -> list:
    try:
        values = [element_from_hex(x, group) for x in items]
    except (ValueError, TypeError) as exc:
        raise IntegrityError(f"peer sent an invalid group element: {exc}") from exc
    if len(set(values)) != len(values):
        raise IntegrityError("peer sent duplicate group elements")
    return values


class _ApsiParty:
    role = "?"

    def __init__(self, ids: Iterable[str], rng: Optional[random.Random] = None):
        self.ids = check_id_set(ids, f"{self.role} ids")
        self.rng = default_rng(rng)
        self.phase = Phase.START
        self.group: Optional[GroupParams] = None
        self.key: Optional[ph_cipher.PhKey] = None
        self._hash_to_id: dict = {}

    def _require(self, *phases: Phase) -> None:
        if self.phase not in phases:
            raise ProtocolStateError(
                f"{self.role}: transition not allowed in phase {self.phase.value}"
            )

    def _install_group(self, group: GroupParams) -> None:
        self.group = group
        self.key = ph_cipher.keygen(group, self.rng)
        table = {}
        for x in sorted(self.ids):
            h = ph_cipher.hash_to_group(group, x)
            if h in table:
                raise DataError(f"ids {table[h]!r} and {x!r} collide in the group; use a larger group")
            table[h] = x
        self._hash_to_id = table
        self.phase = Phase.GROUP_AGREED

    def encrypt_own_set(self) -> list:
        """U = {E_key(h(x))}, returned sorted so input order does not leak."""
        self._require(Phase.GROUP_AGREED)
        out = sorted(ph_cipher.encrypt(self.key, h) for h in self._hash_to_id)
        self.phase = Phase.OWN_SET_ENCRYPTED
        return out

    def _double(self, peer_set) -> list:
        return sorted(ph_cipher.encrypt(self.key, u) for u in peer_set)


class StrongApsiSession(_ApsiParty):
    """Strong participant: proposes the group, ends with only the obfuscated set."""

    role = "strong"

    def __init__(self, ids, rng=None, group: Optional[GroupParams] = None,
                 group_bits: int = DEFAULT_GROUP_BITS):
        super().__init__(ids, rng)
        self._proposed = group
        self.group_bits = group_bits
        self.result: Optional[ApsiResultStrong] = None

    def exchange_group(self) -> dict:
        self._require(Phase.START)
        if self._proposed is None:
            self._proposed = ph_cipher.generate_group(self.group_bits, self.rng)
        return {"p": element_to_hex(self._proposed.p), "q": element_to_hex(self._proposed.q)}

    def on_group_ack(self, payload: dict) -> None:
        self._require(Phase.START)
        if self._proposed is None or payload.get("p") != element_to_hex(self._proposed.p):
            raise ProtocolStateError("group negotiation mismatch")
        self._install_group(self._proposed)

    def double_encrypt_peer_set(self, weak_set) -> list:
        self._require(Phase.OWN_SET_ENCRYPTED)
        out = self._double(weak_set)
        self.phase = Phase.PEER_SET_DOUBLED
        return out

    def peel_layers(self, obf_double) -> list:
        """Remove our key from U_obf'; what remains is still under the weak key."""
        self._require(Phase.PEER_SET_DOUBLED)
        out = sorted(ph_cipher.decrypt(self.key, u) for u in obf_double)
        self.phase = Phase.LAYER_PEELED
        return out

    def receive_reveal(self, hashes) -> ApsiResultStrong:
        """Name the revealed hashes against our own table."""
        self._require(Phase.LAYER_PEELED)
        names = []
        for h in hashes:
            try:
                names.append(self._hash_to_id[h])
            except KeyError:
                raise IntegrityError("revealed element is not the hash of any strong-side id") from None
        self.result = ApsiResultStrong(frozenset(names))
        self.phase = Phase.DONE
        return self.result

    def run(self, endpoint) -> ApsiResultStrong:
        try:
            endpoint.send("apsi/1/group", self.exchange_group())
            self.on_group_ack(endpoint.recv("apsi/1/group_ack").payload)
            endpoint.send("apsi/4/strong_set", {"elements": _hex_list(self.encrypt_own_set())})
            weak_set = _parse_elements(self.group, endpoint.recv("apsi/4/weak_set").payload["elements"])
            endpoint.send("apsi/6/weak_set_double", {"elements": _hex_list(self.double_encrypt_peer_set(weak_set))})
            obf_double = _parse_elements(self.group, endpoint.recv("apsi/8/obf_double").payload["elements"])
            endpoint.send("apsi/10/obf_single", {"elements": _hex_list(self.peel_layers(obf_double))})
            hashes = _parse_elements(self.group, endpoint.recv("apsi/12/obf_reveal").payload["elements"])
            result = self.receive_reveal(hashes)
            endpoint.send("apsi/12/obf_ids", {"ids": sorted(result.obfuscated)})
            return result
        except PeerAbortError:
            raise
        except Exception as exc:
            endpoint.abort("apsi", f"strong party failed: {exc}")
            raise


class WeakApsiSession(_ApsiParty):
    """Weak participant: picks the obfuscation padding and learns the exact intersection."""

    role = "weak"

    def __init__(self, ids, lam: float, rng=None, min_group_bits: int = ph_cipher.MIN_GROUP_BITS):
        super().__init__(ids, rng)
        self.lam = check_lambda(lam)
        self.min_group_bits = min_group_bits
        self._strong_double: Optional[frozenset] = None
        self.intersection: Optional[frozenset] = None
        self._obf_hashes: Optional[list] = None
        self.result: Optional[ApsiResultWeak] = None

    def accept_group(self, payload: dict) -> dict:
        self._require(Phase.START)
        try:
            group = GroupParams(int(payload["p"], 16), int(payload["q"], 16))
            group.validate(self.min_group_bits, self.rng)
        except (KeyError, ValueError) as exc:
            raise ProtocolStateError(f"group negotiation failed: {exc}") from exc
        self._install_group(group)
        return {"p": element_to_hex(group.p)}

    def double_encrypt_peer_set(self, strong_set) -> list:
        self._require(Phase.OWN_SET_ENCRYPTED)
        doubled = self._double(strong_set)
        self._strong_double = frozenset(doubled)
        self.phase = Phase.PEER_SET_DOUBLED
        return doubled

    def select_obfuscated(self, weak_double) -> list:
        """Intersect the doubly-encrypted sets and pad up to the target size."""
        self._require(Phase.PEER_SET_DOUBLED)
        strong_double = self._strong_double
        inter = strong_double.intersection(weak_double)
        target = obfuscated_target_size(len(strong_double), len(inter), self.lam)
        pool = sorted(strong_double - inter)
        padding = self.rng.sample(pool, target - len(inter))
        self.phase = Phase.OBFUSCATED_SELECTED
        return sorted(inter.union(padding))

    def peel_layers(self, obf_single) -> frozenset:
        """Strip our key to recover id hashes; those we hold form the intersection."""
        self._require(Phase.OBFUSCATED_SELECTED)
        hashes = sorted(ph_cipher.decrypt(self.key, u) for u in obf_single)
        self._obf_hashes = hashes
        self.intersection = frozenset(self._hash_to_id[h] for h in hashes if h in self._hash_to_id)
        self.phase = Phase.LAYER_PEELED
        return self.intersection

    def reveal_obfuscated(self) -> list:
        self._require(Phase.LAYER_PEELED)
        self.phase = Phase.REVEALED
        return list(self._obf_hashes)

    def accept_obfuscated_ids(self, ids) -> ApsiResultWeak:
        self._require(Phase.REVEALED)
        obf = frozenset(ids)
        if len(obf) != len(self._obf_hashes):
            raise IntegrityError("strong party named a different number of obfuscated ids")
        for x in self.intersection:
            if x not in obf:
                raise IntegrityError(f"strong party's obfuscated set omits intersection id {x!r}")
        self.result = ApsiResultWeak(self.intersection, obf)
        self.phase = Phase.DONE
        return self.result

    def run(self, endpoint) -> ApsiResultWeak:
        try:
            env = endpoint.recv("apsi/1/group")
            endpoint.send("apsi/1/group_ack", self.accept_group(env.payload))
            strong_set = _parse_elements(self.group, endpoint.recv("apsi/4/strong_set").payload["elements"])
            endpoint.send("apsi/4/weak_set", {"elements": _hex_list(self.encrypt_own_set())})
            self.double_encrypt_peer_set(strong_set)
            weak_double = _parse_elements(self.group, endpoint.recv("apsi/6/weak_set_double").payload["elements"])
            endpoint.send("apsi/8/obf_double", {"elements": _hex_list(self.select_obfuscated(weak_double))})
            obf_single = _parse_elements(self.group, endpoint.recv("apsi/10/obf_single").payload["elements"])
            self.peel_layers(obf_single)
            endpoint.send("apsi/12/obf_reveal", {"elements": _hex_list(self.reveal_obfuscated())})
            return self.accept_obfuscated_ids(endpoint.recv("apsi/12/obf_ids").payload["ids"])
        except PeerAbortError:
            raise
        except Exception as exc:
            endpoint.abort("apsi", f"weak party failed: {exc}")
            raise


def run_pair(strong_fn, weak_fn):
    """Run two party callables concurrently; re-raise the first failure.

    Returns ``(strong_result, weak_result)``.  If one side fails with a real
    error and the other only saw the resulting abort, the real error wins.
    """
    results: dict = {}
    errors: dict = {}

    def target(name, fn):
        try:
            results[name] = fn()
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller thread
            errors[name] = exc

    threads = [
        threading.Thread(target=target, args=("strong", strong_fn), name="strong"),
        threading.Thread(target=target, args=("weak", weak_fn), name="weak"),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        primary = [e for e in errors.values() if not isinstance(e, PeerAbortError)]
        raise (primary or list(errors.values()))[0]
    return results["strong"], results["weak"]


def run_apsi(strong_ids, weak_ids, lam: float, group_bits: int = DEFAULT_GROUP_BITS,
             transport=None, *, group: Optional[GroupParams] = None, seed: Optional[int] = None):
    """Run both roles of the protocol and return ``(ApsiResultStrong, ApsiResultWeak)``.

    ``transport`` is a pair of channels (defaults to an in-process pair).
    ``seed`` makes the run reproducible; each party derives its own stream.
    """
    lam = check_lambda(lam)
    strong_rng = random.Random(f"{seed}/apsi/strong") if seed is not None else None
    weak_rng = random.Random(f"{seed}/apsi/weak") if seed is not None else None
    strong = StrongApsiSession(strong_ids, strong_rng, group=group, group_bits=group_bits)
    weak = WeakApsiSession(weak_ids, lam, weak_rng)
    ch_strong, ch_weak = transport if transport is not None else InProcChannel.pair()
    ep_strong, ep_weak = Endpoint(ch_strong), Endpoint(ch_weak)
    return run_pair(lambda: strong.run(ep_strong), lambda: weak.run(ep_weak))
