"""Command line entry point: ``avfl <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path

from . import hom_crypto, ph_cipher
from .apsi import StrongApsiSession, WeakApsiSession, run_apsi
from .errors import AvflError
from .federation import FederationProfile, classify
from .harness import (
    DEFAULT_LAMBDAS,
    ExperimentConfig,
    PartyConfig,
    ingest_csv,
    lambda_label,
    preflight,
    resolve_seed,
    run_experiment,
    run_protocol,
    run_strong_party,
    run_weak_party,
)
from .transport import Endpoint, TcpChannel, parse_address

log = logging.getLogger("avfl")


def _seeded(seed, tag):
    return random.Random(f"{seed}/{tag}") if seed is not None else None


def read_ids(path) -> list:
    path = Path(path)
    if path.suffix == ".csv":
        import csv

        with open(path, newline="") as fh:
            return [row[0] for row in csv.reader(fh)][1:]
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def open_tcp(args):
    if bool(args.listen) == bool(args.connect):
        raise SystemExit("tcp transport needs exactly one of --listen or --connect")
    if args.listen:
        return TcpChannel.listen(*parse_address(args.listen))
    return TcpChannel.connect(*parse_address(args.connect))


def cmd_keygen_check(args) -> int:
    seed = resolve_seed(args.seed)
    t0 = time.perf_counter()
    group = ph_cipher.generate_group(args.group_bits, _seeded(seed, "group"))
    t1 = time.perf_counter()
    group.validate(args.group_bits)
    rng = _seeded(seed, "check") or random.SystemRandom()
    a, b = ph_cipher.keygen(group, rng), ph_cipher.keygen(group, rng)
    for _ in range(20):
        m = rng.randrange(1, group.p)
        ab = ph_cipher.encrypt(b, ph_cipher.encrypt(a, m))
        assert ab == ph_cipher.encrypt(a, ph_cipher.encrypt(b, m)), "commutativity failed"
        assert ph_cipher.decrypt(a, ph_cipher.encrypt(a, m)) == m, "roundtrip failed"
    print(f"group: {group.bits}-bit safe prime, generated in {t1 - t0:.2f}s; commutativity and roundtrip ok")
    t2 = time.perf_counter()
    kp = hom_crypto.hom_keygen(args.key_bits, _seeded(seed, "paillier"))
    t3 = time.perf_counter()
    for _ in range(20):
        m1, m2, k = rng.randrange(kp.n), rng.randrange(kp.n), rng.randrange(kp.n)
        c1, c2 = hom_crypto.hom_encrypt(kp, m1, rng), hom_crypto.hom_encrypt(kp.public_key, m2, rng)
        assert hom_crypto.hom_decrypt(kp, hom_crypto.hom_add(kp, c1, c2)) == (m1 + m2) % kp.n
        assert hom_crypto.hom_decrypt(kp, hom_crypto.hom_scalar_mul(kp, c1, k)) == m1 * k % kp.n
    print(f"paillier: {kp.bits}-bit modulus, generated in {t3 - t2:.2f}s; add and scalar-mul ok")
    return 0


def cmd_classify(args) -> int:
    if args.ids1 and args.ids2:
        profile = FederationProfile.from_sets(read_ids(args.ids1), read_ids(args.ids2))
    elif args.n1 and args.n2 and args.n_world:
        profile = FederationProfile(args.n1, args.n2, args.n_world)
    else:
        raise SystemExit("give either --ids1/--ids2 or --n1/--n2/--n-world")
    verdict = classify(profile)
    print(json.dumps({"n1": profile.n1, "n2": profile.n2, "n_world": profile.n_world,
                      "kind": verdict.kind, "weak_party": verdict.weak_party,
                      "strong_party": verdict.strong_party}))
    return 0


def _emit(obj, out):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_apsi(args) -> int:
    seed = resolve_seed(args.seed)
    if args.role == "both":
        strong_ids, weak_ids = read_ids(args.strong_ids), read_ids(args.weak_ids)
        print(preflight_ids(strong_ids, weak_ids))
        s, w = run_apsi(strong_ids, weak_ids, args.lam, args.group_bits, seed=seed)
        _emit({"strong": {"obfuscated": sorted(s.obfuscated)},
               "weak": {"intersection": sorted(w.intersection), "obfuscated": sorted(w.obfuscated)}}, args.out)
        return 0
    endpoint = Endpoint(open_tcp(args))
    try:
        if args.role == "strong":
            res = StrongApsiSession(read_ids(args.strong_ids), _seeded(seed, "strong"),
                                    group_bits=args.group_bits).run(endpoint)
            _emit({"obfuscated": sorted(res.obfuscated)}, args.out)
        else:
            res = WeakApsiSession(read_ids(args.weak_ids), args.lam, _seeded(seed, "weak")).run(endpoint)
            _emit({"intersection": sorted(res.intersection), "obfuscated": sorted(res.obfuscated)}, args.out)
    finally:
        endpoint.close()
    return 0


def preflight_ids(strong_ids, weak_ids) -> str:
    profile = FederationProfile.from_sets(strong_ids, weak_ids)
    return f"preflight: {classify(profile).describe()} (|I1|={profile.n1}, |I2|={profile.n2}, |Iw|={profile.n_world})"


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    cfg = PartyConfig(lam=args.lam, eta=args.eta, iterations=args.iterations, group_bits=args.group_bits,
                      key_bits=args.key_bits, seed=seed)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    label = lambda_label(args.lam)
    strong_data = ingest_csv(args.strong_csv, args.id_column) if args.role in ("both", "strong") else None
    weak_data = (ingest_csv(args.weak_csv, args.id_column, label_column=args.label_column)
                 if args.role in ("both", "weak") else None)
    if args.role == "both":
        print("preflight: " + preflight(strong_data, weak_data))
        run = run_protocol(strong_data, weak_data, cfg)
        run.trace.to_csv(outdir / f"trace_lambda_{label}.csv")
        _write_weights(outdir / f"weights_lambda_{label}.json", args, run.weak.model, run.strong.model)
        last = run.trace.records[-1] if len(run.trace) else None
        print(f"|intersection|={len(run.weak.intersection)} |obfuscated|={len(run.strong.obfuscated)}"
              + (f" final loss={last.loss:.6f} auc={last.auc:.4f}" if last else ""))
        return 0
    endpoint = Endpoint(open_tcp(args))
    try:
        if args.role == "strong":
            out = run_strong_party(strong_data, endpoint, cfg)
            _write_weights(outdir / f"weights_strong_lambda_{label}.json", args, None, out.model)
        else:
            out = run_weak_party(weak_data, endpoint, cfg)
            out.trainer.trace.to_csv(outdir / f"trace_lambda_{label}.csv")
            _write_weights(outdir / f"weights_weak_lambda_{label}.json", args, out.model, None)
    finally:
        endpoint.close()
    return 0


def _write_weights(path, args, weak_model, strong_model):
    obj = {"lambda": args.lam, "iterations": args.iterations}
    if weak_model is not None:
        obj["weak_weights"] = weak_model.weights.tolist()
    if strong_model is not None:
        obj["strong_weights"] = strong_model.weights.tolist()
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def cmd_experiment(args) -> int:
    seed = resolve_seed(args.seed)
    cfg = ExperimentConfig(
        data=args.data, strong_csv=args.strong_csv, weak_csv=args.weak_csv, mnist_path=args.mnist_path,
        id_column=args.id_column, label_column=args.label_column, n_rows=args.n_rows,
        n_features=args.n_features, split=args.split, weak_fraction=args.weak_fraction,
        lambdas=tuple(float(v) for v in args.lambdas.split(",")), eta=args.eta, iterations=args.iterations,
        seed=0 if seed is None else seed, group_bits=args.group_bits, key_bits=args.key_bits,
        transport=args.transport, outdir=args.outdir, tolerance=args.tolerance,
    )
    report = run_experiment(cfg)
    print("preflight: " + report.preflight)
    for lam, trace in report.traces.items():
        tail = f" final loss={trace.records[-1].loss:.6f} auc={trace.records[-1].auc:.4f}" if len(trace) else ""
        print(f"lambda={lambda_label(lam)} |obf|={report.obfuscated_sizes[lambda_label(lam)]}{tail}")
    print(f"max divergence across lambdas: {report.max_divergence:.3e}; "
          f"vs plaintext reference: {report.reference_divergence.get('weights', 0.0):.3e}; "
          f"{'PASS' if report.passed else 'FAIL'} at tolerance {cfg.tolerance:g} ({report.elapsed:.1f}s)")
    return 0 if report.passed else 1


def _add_crypto_args(p, group_default=ph_cipher.DEFAULT_GROUP_BITS, key_default=hom_crypto.DEFAULT_KEY_BITS):
    p.add_argument("--group-bits", type=int, default=group_default)
    p.add_argument("--key-bits", type=int, default=key_default)
    p.add_argument("--seed", type=int, default=None, help="overridden by $AVFL_SEED")


def _add_transport_args(p):
    p.add_argument("--role", choices=("both", "strong", "weak"), default="both")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--connect", metavar="HOST:PORT")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen-check", help="generate a group and a Paillier key and self-test them")
    _add_crypto_args(p)
    p.set_defaults(func=cmd_keygen_check)

    p = sub.add_parser("classify", help="SVFL/AVFL verdict for two ID spaces")
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.add_argument("--n-world", type=int)
    p.add_argument("--ids1")
    p.add_argument("--ids2")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("apsi", help="run asymmetric private set intersection")
    p.add_argument("--strong-ids")
    p.add_argument("--weak-ids")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--out")
    _add_crypto_args(p)
    _add_transport_args(p)
    p.set_defaults(func=cmd_apsi)

    p = sub.add_parser("train", help="APSI then AVLR training on CSV data")
    p.add_argument("--strong-csv")
    p.add_argument("--weak-csv")
    p.add_argument("--id-column", default="id")
    p.add_argument("--label-column", default="label")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=0.15)
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--outdir", default="runs")
    _add_crypto_args(p)
    _add_transport_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="sweep security numbers and compare traces")
    p.add_argument("--data", choices=("synthetic", "mnist", "csv"), default="synthetic")
    p.add_argument("--strong-csv")
    p.add_argument("--weak-csv")
    p.add_argument("--mnist-path")
    p.add_argument("--id-column", default="id")
    p.add_argument("--label-column", default="label")
    p.add_argument("--n-rows", type=int, default=500)
    p.add_argument("--n-features", type=int, default=10)
    p.add_argument("--split", type=int)
    p.add_argument("--weak-fraction", type=float, default=0.2)
    p.add_argument("--lambdas", default=",".join(f"{v:g}" for v in DEFAULT_LAMBDAS))
    p.add_argument("--eta", type=float, default=0.15)
    p.add_argument("--iterations", type=int, default=150)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--outdir", default="runs")
    _add_crypto_args(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "role", "both") != "both" and getattr(args, "transport", "tcp") != "tcp":
        raise SystemExit("--role strong|weak requires --transport tcp")
    try:
        return args.func(args)
    except AvflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
