"""Dataset ingestion, vertical partitioning and experiment orchestration."""
from __future__ import annotations

import csv
import gzip
import json
import logging
import math
import os
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import apsi as apsi_mod
from .apsi import StrongApsiSession, WeakApsiSession, check_lambda, run_pair
from .avlr import (
    ModelState,
    StrongTrainer,
    TrainTrace,
    VerticalDataset,
    WeakTrainer,
    centralized_reference,
    merge_traces,
)
from .errors import DataError
from .federation import FederationProfile, classify
from .hom_crypto import DEFAULT_KEY_BITS, HomKeypair
from .ph_cipher import DEFAULT_GROUP_BITS, GroupParams, generate_group
from .transport import Endpoint, InProcChannel

log = logging.getLogger(__name__)

SEED_ENV = "AVFL_SEED"
DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)
TRACE_TOLERANCE = 1e-6


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------


def ingest_csv(path, id_column: str, feature_columns: Optional[Sequence[str]] = None,
               label_column: Optional[str] = None) -> VerticalDataset:
    """Read a headed CSV into a dataset.

    ``feature_columns`` defaults to every column other than the id and label.
    Duplicate ids, ragged rows and non-numeric cells are hard errors.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        for name in [id_column] + ([label_column] if label_column else []):
            if name not in col:
                raise DataError(f"{path}: missing column {name!r}")
        if feature_columns is None:
            feature_columns = [h for h in header if h not in (id_column, label_column)]
        unknown = [c for c in feature_columns if c not in col]
        if unknown:
            raise DataError(f"{path}: unknown feature columns {unknown}")
        feat_idx = [col[c] for c in feature_columns]
        ids, rows, labels = [], [], []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            ident = row[col[id_column]]
            if ident in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ident!r}")
            seen.add(ident)
            try:
                rows.append([float(row[i]) for i in feat_idx])
                if label_column:
                    labels.append(int(float(row[col[label_column]])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            ids.append(ident)
    X = np.array(rows, dtype=np.float64).reshape(len(ids), len(feat_idx))
    log.info("read %s: %d rows x %d features", path, X.shape[0], X.shape[1])
    return VerticalDataset(tuple(ids), X, np.array(labels) if label_column else None)


def write_csv(dataset: VerticalDataset, path, id_column: str = "id", label_column: str = "label",
              feature_prefix: str = "f") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        names = [f"{feature_prefix}{j}" for j in range(dataset.n_features)]
        header = [id_column] + names + ([label_column] if dataset.labels is not None else [])
        writer.writerow(header)
        for i, ident in enumerate(dataset.ids):
            row = [ident] + [repr(v) for v in dataset.X[i].tolist()]
            if dataset.labels is not None:
                row.append(int(dataset.labels[i]))
            writer.writerow(row)


def split_vertical(dataset: VerticalDataset, split: int, weak_fraction: float = 1.0,
                   seed: Optional[int] = 0):
    """Partition a labelled dataset between the two parties.

    The strong party receives every row and the feature block ``[split:]``; the
    weak party receives a random ``weak_fraction`` of the rows, the block
    ``[:split]`` and the labels.
    """
    m = dataset.n_features
    if not 0 < split < m:
        raise DataError(f"split must lie strictly between 0 and {m}, got {split}")
    if not 0 < weak_fraction <= 1:
        raise DataError("weak_fraction must lie in (0, 1]")
    if dataset.labels is None:
        raise DataError("splitting needs a labelled dataset")
    n = len(dataset)
    n_weak = max(1, int(round(weak_fraction * n)))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=n_weak, replace=False)) if n_weak < n else np.arange(n)
    strong = VerticalDataset(dataset.ids, dataset.X[:, split:])
    weak = VerticalDataset(tuple(dataset.ids[i] for i in chosen), dataset.X[chosen, :split],
                           dataset.labels[chosen])
    return strong, weak


def make_synthetic(n_rows: int = 500, n_features: int = 10, seed: int = 0,
                   separation: float = 1.0) -> VerticalDataset:
    """Two Gaussian classes whose means differ by ``2 * separation`` along a random unit direction."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n_rows)
    direction = rng.normal(size=n_features)
    direction /= np.linalg.norm(direction)
    X = rng.normal(size=(n_rows, n_features)) + np.outer(2 * y - 1, direction) * separation
    ids = tuple(f"id{i:06d}" for i in range(n_rows))
    return VerticalDataset(ids, X, y)


def mnist_label_rule(digits) -> np.ndarray:
    """Binarize digits: 5-9 are the positive class."""
    return (np.asarray(digits) >= 5).astype(np.int8)


def _bundled_mnist_path() -> Path:
    try:
        from mlxtend.data import mnist as mlx_mnist
    except ImportError as exc:
        raise DataError("no MNIST csv given and the optional 'mlxtend' package is not installed "
                        "(pip install 'artifact[mnist]')") from exc
    return Path(mlx_mnist.DATA_PATH)


def load_mnist(n_samples: int = 2000, seed: int = 0, path=None) -> VerticalDataset:
    """Random MNIST subsample with pixels scaled to [0, 1) by 1/256 and binarized labels.

    ``path`` is a headerless CSV with 784 pixel columns followed by the digit
    (optionally gzipped).  Without it the 5000-image subset shipped with
    mlxtend is used.
    """
    path = Path(path) if path is not None else _bundled_mnist_path()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",")
    if raw.ndim != 2 or raw.shape[1] != 785:
        raise DataError(f"{path}: expected 785 columns (784 pixels + digit), got {raw.shape}")
    if n_samples > raw.shape[0]:
        raise DataError(f"asked for {n_samples} samples, file has {raw.shape[0]}")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(raw.shape[0], size=n_samples, replace=False))
    X = raw[pick, :784] / 256.0
    y = mnist_label_rule(raw[pick, 784].astype(int))
    ids = tuple(f"mnist{int(i):05d}" for i in pick)
    return VerticalDataset(ids, X, y)


# --------------------------------------------------------------------------
# running both protocols for one party
# --------------------------------------------------------------------------


@dataclass
class PartyConfig:
    lam: float = 0.5
    eta: float = 0.15
    iterations: int = 150
    group_bits: int = DEFAULT_GROUP_BITS
    key_bits: int = DEFAULT_KEY_BITS
    seed: Optional[int] = None
    group: Optional[GroupParams] = None
    keypair: Optional[HomKeypair] = None

    def rng(self, role: str) -> Optional[random.Random]:
        return random.Random(f"{self.seed}/{role}") if self.seed is not None else None


@dataclass
class StrongOutcome:
    obfuscated: frozenset
    model: ModelState
    trainer: StrongTrainer


@dataclass
class WeakOutcome:
    intersection: frozenset
    obfuscated: frozenset
    model: ModelState
    trainer: WeakTrainer


def run_strong_party(data: VerticalDataset, endpoint: Endpoint, cfg: PartyConfig) -> StrongOutcome:
    rng = cfg.rng("strong")
    session = StrongApsiSession(data.ids, rng, group=cfg.group, group_bits=cfg.group_bits)
    result = session.run(endpoint)
    trainer = StrongTrainer(data, result.obfuscated, cfg.eta, rng)
    model = trainer.run(endpoint, cfg.iterations)
    return StrongOutcome(result.obfuscated, model, trainer)


def run_weak_party(data: VerticalDataset, endpoint: Endpoint, cfg: PartyConfig) -> WeakOutcome:
    rng = cfg.rng("weak")
    session = WeakApsiSession(data.ids, cfg.lam, rng)
    result = session.run(endpoint)
    trainer = WeakTrainer(data, result.intersection, result.obfuscated, cfg.eta, cfg.key_bits, rng,
                          keypair=cfg.keypair)
    model = trainer.run(endpoint, cfg.iterations)
    return WeakOutcome(result.intersection, result.obfuscated, model, trainer)


@dataclass
class ProtocolRun:
    strong: StrongOutcome
    weak: WeakOutcome
    trace: TrainTrace


def run_protocol(strong_data: VerticalDataset, weak_data: VerticalDataset, cfg: PartyConfig,
                 transport=None) -> ProtocolRun:
    """APSI followed by AVLR, both roles in this process (two threads)."""
    ch_s, ch_w = transport if transport is not None else InProcChannel.pair()
    ep_s, ep_w = Endpoint(ch_s), Endpoint(ch_w)
    try:
        strong, weak = run_pair(lambda: run_strong_party(strong_data, ep_s, cfg),
                                lambda: run_weak_party(weak_data, ep_w, cfg))
    finally:
        ep_s.close()
        ep_w.close()
    return ProtocolRun(strong, weak, merge_traces(weak.trainer, strong.trainer))


def reference_trace(strong_data: VerticalDataset, weak_data: VerticalDataset, intersection,
                    eta: float, iterations: int) -> TrainTrace:
    """Centralized plaintext logistic regression on the true intersection."""
    ids = sorted(intersection)
    return centralized_reference(weak_data.rows(ids), strong_data.rows(ids), weak_data.labels_for(ids),
                                 eta, iterations)


def preflight(strong_data: VerticalDataset, weak_data: VerticalDataset) -> str:
    profile = FederationProfile.from_sets(strong_data.ids, weak_data.ids)
    verdict = classify(profile)
    # party 1 is the strong-data holder in the harness
    return (f"|I1|={profile.n1} |I2|={profile.n2} |Iw|={profile.n_world} -> {verdict.describe()}")


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    data: str = "synthetic"  # synthetic | mnist | csv
    strong_csv: Optional[str] = None
    weak_csv: Optional[str] = None
    mnist_path: Optional[str] = None
    id_column: str = "id"
    label_column: str = "label"
    n_rows: int = 500
    n_features: int = 10
    split: Optional[int] = None
    weak_fraction: float = 0.2
    lambdas: tuple = DEFAULT_LAMBDAS
    eta: float = 0.15
    iterations: int = 150
    seed: int = 0
    group_bits: int = DEFAULT_GROUP_BITS
    key_bits: int = DEFAULT_KEY_BITS
    transport: str = "inproc"
    outdir: str = "runs"
    tolerance: float = TRACE_TOLERANCE

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        self.lambdas = tuple(check_lambda(v) for v in self.lambdas)
        if not self.lambdas:
            raise ValueError("need at least one security number")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError("transport must be 'inproc' or 'tcp'")


def resolve_seed(seed: Optional[int]) -> Optional[int]:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else seed


def load_partitions(cfg: ExperimentConfig):
    if cfg.data == "csv":
        if not (cfg.strong_csv and cfg.weak_csv):
            raise DataError("csv experiments need both strong_csv and weak_csv")
        strong = ingest_csv(cfg.strong_csv, cfg.id_column)
        weak = ingest_csv(cfg.weak_csv, cfg.id_column, label_column=cfg.label_column)
        return strong, weak
    if cfg.data == "mnist":
        full = load_mnist(cfg.n_rows, cfg.seed, cfg.mnist_path)
    elif cfg.data == "synthetic":
        full = make_synthetic(cfg.n_rows, cfg.n_features, cfg.seed)
    else:
        raise DataError(f"unknown data source {cfg.data!r}")
    split = cfg.split if cfg.split is not None else full.n_features // 2
    return split_vertical(full, split, cfg.weak_fraction, cfg.seed)


def lambda_label(lam: float) -> str:
    return f"{lam:g}"


@dataclass
class ExperimentReport:
    traces: dict = field(default_factory=dict)
    intersection_size: int = 0
    obfuscated_sizes: dict = field(default_factory=dict)
    divergence: dict = field(default_factory=dict)
    reference_divergence: dict = field(default_factory=dict)
    preflight: str = ""
    tolerance: float = TRACE_TOLERANCE
    elapsed: float = 0.0

    @property
    def max_divergence(self) -> float:
        gaps = [v for d in self.divergence.values() for k, v in d.items() if k in ("loss", "weights")]
        return max(gaps, default=0.0)

    @property
    def passed(self) -> bool:
        gaps = [self.max_divergence]
        gaps += [v for k, v in self.reference_divergence.items() if k in ("loss", "weights")]
        return max(gaps) <= self.tolerance

    def summary(self) -> dict:
        return {
            "preflight": self.preflight,
            "intersection_size": self.intersection_size,
            "obfuscated_sizes": self.obfuscated_sizes,
            "divergence_vs_first_lambda": self.divergence,
            "divergence_vs_plaintext_reference": self.reference_divergence,
            "max_divergence": self.max_divergence,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Run APSI + AVLR for each security number on shared data and seed."""
    start = time.perf_counter()
    strong_data, weak_data = load_partitions(cfg)
    report = ExperimentReport(tolerance=cfg.tolerance, preflight=preflight(strong_data, weak_data))
    log.info("%s", report.preflight)
    group = generate_group(cfg.group_bits, random.Random(f"{cfg.seed}/group"))
    runs = {}
    for lam in cfg.lambdas:
        party_cfg = PartyConfig(lam=lam, eta=cfg.eta, iterations=cfg.iterations, group_bits=cfg.group_bits,
                                key_bits=cfg.key_bits, seed=cfg.seed, group=group)
        t0 = time.perf_counter()
        run = run_protocol(strong_data, weak_data, party_cfg, _transport_pair(cfg))
        log.info("lambda=%s: |obf|=%d, %d iterations in %.1fs", lambda_label(lam),
                 len(run.strong.obfuscated), cfg.iterations, time.perf_counter() - t0)
        runs[lam] = run
        report.traces[lam] = run.trace
        report.obfuscated_sizes[lambda_label(lam)] = len(run.strong.obfuscated)
        report.intersection_size = len(run.weak.intersection)
    base = cfg.lambdas[0]
    for lam in cfg.lambdas[1:]:
        report.divergence[lambda_label(lam)] = report.traces[lam].divergence(report.traces[base])
    ref = reference_trace(strong_data, weak_data, runs[base].weak.intersection, cfg.eta, cfg.iterations)
    report.reference_divergence = report.traces[base].divergence(ref)
    report.elapsed = time.perf_counter() - start
    if write:
        write_outputs(cfg, report, runs)
    return report


def _transport_pair(cfg: ExperimentConfig):
    if cfg.transport == "inproc":
        return InProcChannel.pair()
    return loopback_tcp_pair()


def loopback_tcp_pair():
    """Two connected TCP channels on 127.0.0.1 (an ephemeral port)."""
    import socket

    from .transport import TcpChannel

    with socket.create_server(("127.0.0.1", 0)) as server:
        port = server.getsockname()[1]
        client = socket.create_connection(("127.0.0.1", port))
        conn, _ = server.accept()
    return TcpChannel(conn), TcpChannel(client)


def write_outputs(cfg: ExperimentConfig, report: ExperimentReport, runs: dict) -> None:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    for lam, trace in report.traces.items():
        label = lambda_label(lam)
        trace.to_csv(out / f"trace_lambda_{label}.csv")
        run = runs[lam]
        snapshot = {
            "lambda": lam,
            "iterations": cfg.iterations,
            "weak_weights": run.weak.model.weights.tolist(),
            "strong_weights": run.strong.model.weights.tolist(),
        }
        (out / f"weights_lambda_{label}.json").write_text(json.dumps(snapshot, indent=1) + "\n")
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
    (out / "summary.json").write_text(json.dumps({"config": config, **report.summary()}, indent=1) + "\n")
