"""Asymmetric vertical logistic regression with genuine-with-dummy residuals.

The strong party holds features for every ID in the obfuscated set; the weak
party holds features and labels only for the true intersection.  Each round:

    S -> W  avlr/4/scores           w_s . x_s for every obfuscated id
    W -> S  avlr/6/residuals        Enc(phi_i); phi_i = y_i - sigmoid(l_i) for
                                    genuine ids and an encrypted 0 for dummies
    S -> W  avlr/9/masked_gradient  r (*) sum_i Enc(phi_i) * x_i   (scale^2)
    W -> S  avlr/10/masked_plain    decrypted, divided by scale^2 and by N
    both    update weights:  w <- w + eta * grad   (ascent on log-likelihood)

``L`` below is the average log-likelihood, which training *maximizes*.  The
trace column ``loss`` holds ``-L`` so that it decreases.

Masks are positive integers, so the weak party sees the sign of each strong
gradient coordinate.  Dummy residuals are encryptions of zero under a
semantically secure scheme; they leave every sum unchanged.
"""
from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import (
    CodecOverflowError,
    DataError,
    DivergenceError,
    EmptyIntersectionError,
    IntegrityError,
    PeerAbortError,
    ProtocolStateError,
)
from .hom_crypto import (
    DEFAULT_KEY_BITS,
    DEFAULT_SCALE,
    Ciphertext,
    FixedPointCodec,
    HomKeypair,
    HomPublicKey,
    hom_decrypt,
    hom_dot,
    hom_encrypt,
    hom_keygen,
    hom_scalar_mul,
)
from .apsi import run_pair
from .primes import default_rng
from .transport import Endpoint, InProcChannel

log = logging.getLogger(__name__)

MASK_BITS = 32
RESIDUAL_SCALE_EXPONENT = 1
GRADIENT_SCALE_EXPONENT = 2


# --------------------------------------------------------------------------
# data containers
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VerticalDataset:
    """One party's rows: ids aligned with a feature matrix and, for the weak party, labels."""

    ids: tuple
    X: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = tuple(self.ids)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"features must be a 2-d array, got shape {X.shape}")
        if X.shape[0] != len(ids):
            raise DataError(f"{len(ids)} ids for {X.shape[0]} feature rows")
        if len(set(ids)) != len(ids):
            raise DataError("dataset ids are not unique")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (len(ids),):
                raise DataError("labels must be one per row")
            if not np.isin(y, (0, 1)).all():
                raise DataError("labels must be binary 0/1")
            object.__setattr__(self, "labels", y.astype(np.int8))
        object.__setattr__(self, "_index", {x: i for i, x in enumerate(ids)})

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def __len__(self):
        return len(self.ids)

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        idx = self._positions(ids)
        return self.X[idx]

    def labels_for(self, ids: Iterable[str]) -> np.ndarray:
        if self.labels is None:
            raise DataError("this dataset carries no labels")
        return self.labels[self._positions(ids)]

    def _positions(self, ids) -> list:
        try:
            return [self._index[x] for x in ids]
        except KeyError as exc:
            raise DataError(f"id {exc.args[0]!r} not present in dataset") from None

    def subset(self, ids: Iterable[str]) -> "VerticalDataset":
        ids = list(ids)
        labels = self.labels_for(ids) if self.labels is not None else None
        return VerticalDataset(tuple(ids), self.rows(ids), labels)


@dataclass
class ModelState:
    weights: np.ndarray
    learning_rate: float
    iteration: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise DivergenceError("weights are not finite")

    @classmethod
    def zeros(cls, dim: int, learning_rate: float) -> "ModelState":
        return cls(np.zeros(dim), learning_rate)

    def ascend(self, grad: np.ndarray) -> None:
        with np.errstate(over="ignore", invalid="ignore"):
            new = self.weights + self.learning_rate * np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"non-finite weights after iteration {self.iteration}")
        self.weights = new
        self.iteration += 1


@dataclass(frozen=True)
class Residual:
    id: str
    phi: float
    genuine: bool


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    loss: float
    auc: float
    weak_weights: tuple = ()
    strong_weights: tuple = ()

    @property
    def log_likelihood(self) -> float:
        return -self.loss


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def aucs(self) -> np.ndarray:
        return np.array([r.auc for r in self.records])

    def weights(self) -> np.ndarray:
        """(iterations, m_weak + m_strong) weight snapshots after each update."""
        return np.array([np.concatenate([r.weak_weights, r.strong_weights]) for r in self.records])

    def divergence(self, other: "TrainTrace") -> dict:
        """Max absolute per-iteration gaps in loss, AUC and any weight coordinate."""
        if len(self) != len(other):
            raise ValueError("traces have different lengths")
        if not len(self):
            return {"loss": 0.0, "auc": 0.0, "weights": 0.0}
        return {
            "loss": float(np.max(np.abs(self.losses - other.losses))),
            "auc": float(np.max(np.abs(self.aucs - other.aucs))),
            "weights": float(np.max(np.abs(self.weights() - other.weights()))),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "loss", "auc"])
            for r in self.records:
                writer.writerow([r.iteration, repr(r.loss), repr(r.auc)])

    @classmethod
    def read_csv(cls, path) -> "TrainTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([TraceRecord(int(r["iteration"]), float(r["loss"]), float(r["auc"])) for r in rows])


# --------------------------------------------------------------------------
# numerics
# --------------------------------------------------------------------------


def log1pexp(z):
    """Stable log(1 + exp(z))."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def auc(scores, labels) -> float:
    """Rank-based ROC AUC (Mann-Whitney U); tied scores count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def sample_mask(dim: int, rng: random.Random) -> list:
    return [rng.randrange(1, 1 << MASK_BITS) for _ in range(dim)]


# --------------------------------------------------------------------------
# protocol steps as plain functions
# --------------------------------------------------------------------------


def strong_partial_scores(model: ModelState, data: VerticalDataset, obf_ids: Sequence[str]) -> dict:
    obf_ids = list(obf_ids)
    return dict(zip(obf_ids, (data.rows(obf_ids) @ model.weights).tolist()))


def _genuine_logits(model, data, scores, ids) -> np.ndarray:
    try:
        s = np.array([scores[x] for x in ids], dtype=np.float64)
    except KeyError as exc:
        raise IntegrityError(f"no strong-side score for id {exc.args[0]!r}") from None
    return s + data.rows(ids) @ model.weights


def weak_residuals(model: ModelState, data: VerticalDataset, scores: Mapping[str, float],
                   intersection: Iterable[str], obf_ids: Sequence[str]) -> list:
    """phi = y - sigmoid(l) on the intersection, exactly 0 on dummies (in ``obf_ids`` order)."""
    inter = sorted(set(intersection))
    missing = set(inter) - set(obf_ids)
    if missing:
        raise DataError(f"intersection ids outside the obfuscated set: {sorted(missing)[:3]}")
    l = _genuine_logits(model, data, scores, inter)
    phi = data.labels_for(inter) - expit(l)
    genuine = dict(zip(inter, phi.tolist()))
    return [Residual(x, genuine.get(x, 0.0), x in genuine) for x in obf_ids]


def weak_loss_and_gradient(model: ModelState, data: VerticalDataset, scores: Mapping[str, float],
                           intersection: Iterable[str]):
    """Average log-likelihood over the intersection and its gradient in the weak weights."""
    inter = sorted(set(intersection))
    if not inter:
        raise EmptyIntersectionError("cannot train on an empty intersection")
    l = _genuine_logits(model, data, scores, inter)
    y = data.labels_for(inter)
    loglik = float(np.mean(y * l - log1pexp(l)))
    phi = y - expit(l)
    grad = data.rows(inter).T @ phi / len(inter)
    return loglik, grad


def encode_columns(codec: FixedPointCodec, X: np.ndarray) -> list:
    """Per-feature lists of encoded values (rows in the given order)."""
    return [codec.encode_array(X[:, j]) for j in range(X.shape[1])]


def strong_encrypted_gradient(pk, residual_cts: Mapping[str, Ciphertext], data: VerticalDataset,
                              obf_ids: Sequence[str], codec: FixedPointCodec,
                              encoded_columns: Optional[list] = None) -> list:
    """Enc(N * grad_s)_j = sum over obfuscated ids of Enc(phi_i) * x_ij, at scale^2."""
    obf_ids = list(obf_ids)
    try:
        cts = [residual_cts[x] for x in obf_ids]
    except KeyError as exc:
        raise IntegrityError(f"no residual ciphertext for id {exc.args[0]!r}") from None
    X = data.rows(obf_ids)
    bound = len(obf_ids) * max(float(np.max(np.abs(X), initial=0.0)), 1.0) * (1 << MASK_BITS)
    if bound * codec.scale ** 2 >= codec.max_abs:
        raise CodecOverflowError("masked gradient would overflow the plaintext space; use a larger key")
    if encoded_columns is None:
        encoded_columns = encode_columns(codec, X)
    return [hom_dot(pk, cts, col, k_scale=1) for col in encoded_columns]


def mask_gradient(pk, grad_cts: Sequence[Ciphertext], r: Sequence[int]) -> list:
    """Hadamard product with integer masks (scale unchanged)."""
    if len(r) != len(grad_cts):
        raise ValueError("mask length differs from gradient length")
    if any(int(v) <= 0 for v in r):
        raise ValueError("mask entries must be positive integers")
    return [hom_scalar_mul(pk, c, int(v)) for c, v in zip(grad_cts, r)]


def decrypt_masked_gradient(sk: HomKeypair, codec: FixedPointCodec, masked: Sequence[Ciphertext],
                            n_inter: int) -> np.ndarray:
    """Weak side: decode at the carried scale, then divide by the intersection size."""
    return np.array([codec.decode(hom_decrypt(sk, c), c.scale_exponent) for c in masked]) / n_inter


def unmask_gradient(masked_plain, r: Sequence[int], n_inter: int = 1) -> np.ndarray:
    """Hadamard division by the masks, after dividing by ``n_inter``."""
    r = np.asarray([int(v) for v in r], dtype=np.float64)
    if np.any(r == 0):
        raise ValueError("zero mask component")
    return np.asarray(masked_plain, dtype=np.float64) / n_inter / r


# --------------------------------------------------------------------------
# party sessions
# --------------------------------------------------------------------------


def _cts_to_wire(cts) -> list:
    return [c.to_wire() for c in cts]


def _cts_from_wire(items, pk) -> list:
    try:
        return [Ciphertext.from_wire(obj, pk) for obj in items]
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"malformed ciphertext from peer: {exc}") from exc


class StrongTrainer:
    """Strong participant: features over the obfuscated set, no labels, no secret key."""

    def __init__(self, data: VerticalDataset, obf_ids: Iterable[str], learning_rate: float,
                 rng: Optional[random.Random] = None):
        self.obf_ids = sorted(set(obf_ids))
        self.data = data.subset(self.obf_ids)
        self.model = ModelState.zeros(data.n_features, learning_rate)
        self.rng = default_rng(rng)
        self.pk: Optional[HomPublicKey] = None
        self.codec: Optional[FixedPointCodec] = None
        self._encoded = None
        self._mask = None
        self.history: list = []

    def accept_public_key(self, payload: dict) -> None:
        self.pk = HomPublicKey(int(payload["n"], 16))
        self.codec = FixedPointCodec(self.pk.n, int(payload["scale"]))
        self._encoded = encode_columns(self.codec, self.data.X)

    def partial_scores(self) -> dict:
        return strong_partial_scores(self.model, self.data, self.obf_ids)

    def encrypted_gradient(self, residual_cts: Sequence[Ciphertext]) -> list:
        if len(residual_cts) != len(self.obf_ids):
            raise IntegrityError("residual count differs from the obfuscated set size")
        return strong_encrypted_gradient(self.pk, dict(zip(self.obf_ids, residual_cts)), self.data,
                                         self.obf_ids, self.codec, self._encoded)

    def mask(self, grad_cts) -> list:
        self._mask = sample_mask(len(grad_cts), self.rng)
        return mask_gradient(self.pk, grad_cts, self._mask)

    def unmask_and_update(self, masked_plain) -> np.ndarray:
        if self._mask is None:
            raise ProtocolStateError("no outstanding masked gradient")
        grad = unmask_gradient(masked_plain, self._mask)
        self._mask = None
        self.model.ascend(grad)
        self.history.append(self.model.weights.copy())
        return grad

    def run(self, endpoint, iterations: int) -> ModelState:
        try:
            self.accept_public_key(endpoint.recv("avlr/1/public_key").payload)
            endpoint.send("avlr/2/ready", {"iterations": iterations, "n_obfuscated": len(self.obf_ids)})
            for _ in range(iterations):
                scores = self.partial_scores()
                endpoint.send("avlr/4/scores", {"ids": self.obf_ids, "scores": [scores[x] for x in self.obf_ids]})
                cts = _cts_from_wire(endpoint.recv("avlr/6/residuals").payload["ciphertexts"], self.pk)
                masked = self.mask(self.encrypted_gradient(cts))
                endpoint.send("avlr/9/masked_gradient", {"ciphertexts": _cts_to_wire(masked)})
                values = endpoint.recv("avlr/10/masked_plain").payload["values"]
                self.unmask_and_update(values)
            return self.model
        except Exception as exc:
            if not isinstance(exc, PeerAbortError):
                endpoint.abort("avlr", f"strong party failed: {exc}")
            raise


class WeakTrainer:
    """Weak participant: labels and features on the intersection, owns the Paillier key."""

    def __init__(self, data: VerticalDataset, intersection: Iterable[str], obf_ids: Iterable[str],
                 learning_rate: float, key_bits: int = DEFAULT_KEY_BITS, rng: Optional[random.Random] = None,
                 keypair: Optional[HomKeypair] = None, scale: int = DEFAULT_SCALE):
        if data.labels is None:
            raise DataError("the weak party's dataset must carry labels")
        self.intersection = sorted(set(intersection))
        if not self.intersection:
            raise EmptyIntersectionError("cannot train on an empty intersection")
        self.obf_ids = sorted(set(obf_ids))
        self.data = data.subset(self.intersection)
        self.model = ModelState.zeros(data.n_features, learning_rate)
        self.rng = default_rng(rng)
        self.key_bits = key_bits
        self.scale = scale
        self.sk = keypair
        self.codec: Optional[FixedPointCodec] = None
        self.trace = TrainTrace()
        # loss, AUC and weak-side gradient at the current weights (set in on_scores)
        self.last_loss: Optional[float] = None
        self.last_auc: Optional[float] = None
        self.last_gradient: Optional[np.ndarray] = None

    def setup(self) -> dict:
        if self.sk is None:
            self.sk = hom_keygen(self.key_bits, self.rng)
        self.codec = FixedPointCodec(self.sk.n, self.scale)
        return {"n": format(self.sk.n, "x"), "scale": self.scale}

    def on_scores(self, ids: Sequence[str], scores: Sequence[float]) -> list:
        """Steps 5-7: residuals, their encryptions, and the plaintext loss/gradient."""
        if list(ids) != self.obf_ids:
            raise IntegrityError("strong party scored a different id set than the obfuscated set")
        score_map = dict(zip(ids, (float(s) for s in scores)))
        residuals = weak_residuals(self.model, self.data, score_map, self.intersection, self.obf_ids)
        cts = [hom_encrypt(self.sk, self.codec.encode(r.phi), self.rng, RESIDUAL_SCALE_EXPONENT)
               for r in residuals]
        loglik, grad = weak_loss_and_gradient(self.model, self.data, score_map, self.intersection)
        logits = _genuine_logits(self.model, self.data, score_map, self.intersection)
        labels = self.data.labels_for(self.intersection)
        try:
            area = auc(logits, labels)
        except ValueError:
            area = float("nan")
        self.last_loss, self.last_auc, self.last_gradient = -loglik, area, grad
        return cts

    def on_masked_gradient(self, masked: Sequence[Ciphertext]) -> np.ndarray:
        return decrypt_masked_gradient(self.sk, self.codec, masked, len(self.intersection))

    def update(self) -> None:
        if self.last_gradient is None:
            raise ProtocolStateError("update before residuals were computed")
        k = self.model.iteration
        self.model.ascend(self.last_gradient)
        self.last_gradient = None
        self.trace.records.append(TraceRecord(k, self.last_loss, self.last_auc, tuple(self.model.weights.tolist())))

    def run(self, endpoint, iterations: int) -> ModelState:
        try:
            endpoint.send("avlr/1/public_key", self.setup())
            ready = endpoint.recv("avlr/2/ready").payload
            if ready["iterations"] != iterations:
                raise IntegrityError(f"peers disagree on iterations: {ready['iterations']} vs {iterations}")
            for _ in range(iterations):
                msg = endpoint.recv("avlr/4/scores").payload
                cts = self.on_scores(msg["ids"], msg["scores"])
                endpoint.send("avlr/6/residuals", {"ciphertexts": _cts_to_wire(cts)})
                masked = _cts_from_wire(endpoint.recv("avlr/9/masked_gradient").payload["ciphertexts"], self.sk)
                values = self.on_masked_gradient(masked)
                endpoint.send("avlr/10/masked_plain", {"values": values.tolist()})
                self.update()
            return self.model
        except Exception as exc:
            if not isinstance(exc, PeerAbortError):
                endpoint.abort("avlr", f"weak party failed: {exc}")
            raise


def merge_traces(weak: WeakTrainer, strong: StrongTrainer) -> TrainTrace:
    if len(weak.trace) != len(strong.history):
        raise ValueError("parties completed different numbers of iterations")
    return TrainTrace([
        TraceRecord(r.iteration, r.loss, r.auc, r.weak_weights, tuple(w.tolist()))
        for r, w in zip(weak.trace.records, strong.history)
    ])


def train(strong: StrongTrainer, weak: WeakTrainer, iterations: int, transport=None):
    """Drive both sessions to completion; returns ``(strong_model, weak_model, trace)``."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    ch_s, ch_w = transport if transport is not None else InProcChannel.pair()
    ep_s, ep_w = Endpoint(ch_s), Endpoint(ch_w)
    strong_model, weak_model = run_pair(lambda: strong.run(ep_s, iterations), lambda: weak.run(ep_w, iterations))
    return strong_model, weak_model, merge_traces(weak, strong)


def centralized_reference(X_weak, X_strong, y, learning_rate: float, iterations: int) -> TrainTrace:
    """Plaintext full-batch gradient ascent on the joint features; same record layout."""
    X_weak = np.asarray(X_weak, dtype=np.float64)
    X_strong = np.asarray(X_strong, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w_w = np.zeros(X_weak.shape[1])
    w_s = np.zeros(X_strong.shape[1])
    trace = TrainTrace()
    n = len(y)
    for k in range(iterations):
        l = X_strong @ w_s + X_weak @ w_w
        loglik = float(np.mean(y * l - log1pexp(l)))
        phi = y - expit(l)
        try:
            area = auc(l, y)
        except ValueError:
            area = float("nan")
        w_w = w_w + learning_rate * (X_weak.T @ phi / n)
        w_s = w_s + learning_rate * (X_strong.T @ phi / n)
        trace.records.append(TraceRecord(k, -loglik, area, tuple(w_w.tolist()), tuple(w_s.tolist())))
    return trace
