import math
import random

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from avfl.avlr import (
    ModelState,
    StrongTrainer,
    TraceRecord,
    TrainTrace,
    VerticalDataset,
    WeakTrainer,
    auc,
    centralized_reference,
    decrypt_masked_gradient,
    log1pexp,
    mask_gradient,
    strong_encrypted_gradient,
    strong_partial_scores,
    train,
    unmask_gradient,
    weak_loss_and_gradient,
    weak_residuals,
)
from avfl.errors import (
    CodecOverflowError,
    DataError,
    DivergenceError,
    EmptyIntersectionError,
    IntegrityError,
    ProtocolStateError,
)
from avfl.harness import PartyConfig, make_synthetic, reference_trace, run_protocol, split_vertical
from avfl.hom_crypto import FixedPointCodec, hom_decrypt, hom_encrypt


def plain_loglik(w, X, y):
    """Average log-likelihood, written out term by term."""
    total = 0.0
    for xi, yi in zip(X, y):
        z = sum(a * b for a, b in zip(w, xi))
        total += yi * z - math.log1p(math.exp(z)) if z < 30 else yi * z - z - math.log1p(math.exp(-z))
    return total / len(y)


def pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------- numerics


def test_log1pexp_stable():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    out = log1pexp(z)
    assert np.all(np.isfinite(out))
    assert out[2] == pytest.approx(math.log(2))
    assert out[4] == pytest.approx(800.0)
    assert out[1] == pytest.approx(math.log1p(math.exp(-30)))


def test_auc_four_points():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_against_oracles():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = np.round(rng.normal(size=n), 1)  # plenty of ties
        assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels))
        assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores))


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


# ------------------------------------------------------------ step functions


def tiny_parties():
    weak = VerticalDataset(("a", "b"), [[1.0], [2.0]], [1, 0])
    strong = VerticalDataset(("a", "b", "c"), [[0.5, 1.0], [1.5, -1.0], [3.0, 3.0]])
    return weak, strong


def test_zero_weights_scores_loss_gradient():
    weak, strong = tiny_parties()
    m_s, m_w = ModelState.zeros(2, 0.1), ModelState.zeros(1, 0.1)
    scores = strong_partial_scores(m_s, strong, ["a", "b", "c"])
    assert scores == {"a": 0.0, "b": 0.0, "c": 0.0}
    loglik, grad = weak_loss_and_gradient(m_w, weak, scores, ["a", "b"])
    assert loglik == pytest.approx(-math.log(2))
    # phi = (0.5, -0.5); grad = (1 * 0.5 + 2 * -0.5) / 2
    assert grad == pytest.approx([-0.25])


def test_single_row_gradient_half():
    weak = VerticalDataset(("a",), [[1.0]], [1])
    loglik, grad = weak_loss_and_gradient(ModelState.zeros(1, 0.1), weak, {"a": 0.0}, ["a"])
    assert loglik == pytest.approx(-math.log(2))
    assert grad == pytest.approx([0.5])


def test_residuals_genuine_and_dummy():
    weak, strong = tiny_parties()
    m_w = ModelState(np.array([0.3]), 0.1)
    scores = {"a": 0.2, "b": -0.4, "c": 9.0}
    res = weak_residuals(m_w, weak, scores, ["a", "b"], ["a", "b", "c"])
    assert [r.id for r in res] == ["a", "b", "c"]
    assert [r.genuine for r in res] == [True, True, False]
    assert res[0].phi == pytest.approx(1 - 1 / (1 + math.exp(-(0.2 + 0.3))))
    assert res[1].phi == pytest.approx(0 - 1 / (1 + math.exp(-(-0.4 + 0.6))))
    assert res[2].phi == 0.0


def test_residuals_reject_intersection_outside_obfuscated():
    weak, _ = tiny_parties()
    with pytest.raises(DataError):
        weak_residuals(ModelState.zeros(1, 0.1), weak, {"a": 0.0, "b": 0.0}, ["a", "b"], ["a"])


def test_missing_score_is_integrity_error():
    weak, _ = tiny_parties()
    with pytest.raises(IntegrityError):
        weak_loss_and_gradient(ModelState.zeros(1, 0.1), weak, {"a": 0.0}, ["a", "b"])


def test_empty_intersection():
    weak, _ = tiny_parties()
    with pytest.raises(EmptyIntersectionError):
        weak_loss_and_gradient(ModelState.zeros(1, 0.1), weak, {}, [])


def test_weak_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 3))
    y = rng.integers(0, 2, size=40)
    ids = tuple(f"r{i}" for i in range(40))
    data = VerticalDataset(ids, X, y)
    scores = dict(zip(ids, rng.normal(size=40).tolist()))
    offset = np.array([scores[i] for i in sorted(ids)])
    Xs, ys = data.rows(sorted(ids)), data.labels_for(sorted(ids))
    for w in [np.zeros(3), rng.normal(size=3), 2 * rng.normal(size=3)]:
        loglik, grad = weak_loss_and_gradient(ModelState(w, 0.1), data, scores, ids)

        def f(v):
            return plain_loglik(list(v) + [1.0], np.hstack([Xs, offset[:, None]]), ys)

        assert loglik == pytest.approx(f(w), rel=1e-12)
        h = 1e-6
        fd = [(f(w + h * e) - f(w - h * e)) / (2 * h) for e in np.eye(3)]
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)


# ----------------------------------------------------- encrypted gradient path


def enc_residuals(kp, codec, phis, rng):
    return [hom_encrypt(kp, codec.encode(p), rng, 1) for p in phis]


def test_encrypted_gradient_single_row(keypair512):
    codec = FixedPointCodec(keypair512.n)
    rng = random.Random(0)
    data = VerticalDataset(("a",), [[2.0, -4.0]])
    cts = dict(zip(["a"], enc_residuals(keypair512, codec, [0.5], rng)))
    grad = strong_encrypted_gradient(keypair512.public_key, cts, data, ["a"], codec)
    assert [c.scale_exponent for c in grad] == [2, 2]
    assert [codec.decode(hom_decrypt(keypair512, c), 2) for c in grad] == [1.0, -2.0]


def test_encrypted_gradient_all_zero(keypair512):
    codec = FixedPointCodec(keypair512.n)
    data = VerticalDataset(("a", "b"), [[2.0, -4.0], [1.0, 7.0]])
    cts = dict(zip(["a", "b"], enc_residuals(keypair512, codec, [0.0, 0.0], random.Random(1))))
    grad = strong_encrypted_gradient(keypair512.public_key, cts, data, ["a", "b"], codec)
    assert [hom_decrypt(keypair512, c) for c in grad] == [0, 0]


def test_dummies_do_not_change_gradient(keypair512):
    codec = FixedPointCodec(keypair512.n)
    rng = random.Random(2)
    X = np.random.default_rng(2).normal(size=(30, 4))
    ids = [f"r{i}" for i in range(30)]
    data = VerticalDataset(tuple(ids), X)
    genuine = ids[:8]
    phis = np.random.default_rng(3).uniform(-1, 1, size=8)
    all_cts = dict(zip(ids, enc_residuals(keypair512, codec, list(phis) + [0.0] * 22, rng)))
    full = strong_encrypted_gradient(keypair512.public_key, all_cts, data, ids, codec)
    only = strong_encrypted_gradient(keypair512.public_key, {k: all_cts[k] for k in genuine}, data, genuine, codec)
    decoded_full = [codec.decode(hom_decrypt(keypair512, c), 2) for c in full]
    decoded_only = [codec.decode(hom_decrypt(keypair512, c), 2) for c in only]
    assert decoded_full == decoded_only
    np.testing.assert_allclose(decoded_full, X[:8].T @ phis, atol=1e-9)


def test_mask_unmask_example(keypair512):
    codec = FixedPointCodec(keypair512.n)
    rng = random.Random(5)
    pk = keypair512.public_key
    grad_cts = [hom_encrypt(keypair512, codec.encode(v, 2), rng, 2) for v in (6.0, -3.0)]
    masked = mask_gradient(pk, grad_cts, [2, 5])
    plain = decrypt_masked_gradient(keypair512, codec, masked, n_inter=1)
    assert plain.tolist() == [12.0, -15.0]
    assert unmask_gradient(plain, [2, 5]).tolist() == [6.0, -3.0]


def test_mask_validation(keypair512):
    ct = hom_encrypt(keypair512, 1, random.Random(0))
    with pytest.raises(ValueError):
        mask_gradient(keypair512.public_key, [ct], [0])
    with pytest.raises(ValueError):
        mask_gradient(keypair512.public_key, [ct], [1, 2])
    with pytest.raises(ValueError):
        unmask_gradient([1.0], [0])


def test_overflow_guard(keypair512):
    codec = FixedPointCodec(keypair512.n)
    data = VerticalDataset(("a",), [[1e130]])
    cts = {"a": hom_encrypt(keypair512, 0, random.Random(0), 1)}
    with pytest.raises(CodecOverflowError):
        strong_encrypted_gradient(keypair512.public_key, cts, data, ["a"], codec)


def test_dummy_residual_ciphertexts_are_distinct(keypair512):
    weak, strong = tiny_parties()
    trainer = WeakTrainer(weak, ["a"], ["a", "b", "c"], 0.1, rng=random.Random(0), keypair=keypair512)
    trainer.setup()
    cts = trainer.on_scores(["a", "b", "c"], [0.0, 0.0, 0.0])
    assert len({c.value for c in cts}) == 3
    # two dummies both decrypt to zero yet look unrelated
    assert [hom_decrypt(keypair512, c) for c in cts[1:]] == [0, 0]


# --------------------------------------------------------------- state checks


def test_model_state():
    with pytest.raises(ValueError):
        ModelState.zeros(2, 0.0)
    m = ModelState.zeros(2, 0.5)
    m.ascend(np.array([1.0, -2.0]))
    assert m.weights.tolist() == [0.5, -1.0] and m.iteration == 1
    with pytest.raises(DivergenceError):
        m.ascend(np.array([np.inf, 0.0]))


def test_trainer_order_errors(keypair512):
    weak, strong = tiny_parties()
    s = StrongTrainer(strong, ["a", "b"], 0.1, random.Random(0))
    with pytest.raises(ProtocolStateError):
        s.unmask_and_update([0.0, 0.0])
    w = WeakTrainer(weak, ["a"], ["a", "b"], 0.1, keypair=keypair512)
    with pytest.raises(ProtocolStateError):
        w.update()
    w.setup()
    with pytest.raises(IntegrityError):
        w.on_scores(["a"], [0.0])


def test_weak_needs_labels_and_intersection():
    _, strong = tiny_parties()
    with pytest.raises(DataError):
        WeakTrainer(strong, ["a"], ["a"], 0.1)
    weak, _ = tiny_parties()
    with pytest.raises(EmptyIntersectionError):
        WeakTrainer(weak, [], ["a"], 0.1)


def test_trace_csv_roundtrip(tmp_path):
    trace = TrainTrace([TraceRecord(0, 0.6931471805599453, 0.5), TraceRecord(1, 0.1 + 0.2, float("nan"))])
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,auc"
    back = TrainTrace.read_csv(tmp_path / "t.csv")
    assert back.losses.tolist() == trace.losses.tolist()
    assert math.isnan(back.aucs[1])


# ------------------------------------------------------------- full training


@pytest.fixture(scope="module")
def small_partitions():
    data = make_synthetic(80, 6, seed=11)
    return split_vertical(data, 3, weak_fraction=0.25, seed=1)


def run_small(parts, lam, iterations, keypair, group, seed=0):
    strong, weak = parts
    cfg = PartyConfig(lam=lam, eta=0.15, iterations=iterations, seed=seed, group=group, keypair=keypair)
    return run_protocol(strong, weak, cfg)


def test_zero_iterations(small_partitions, keypair512, group64):
    run = run_small(small_partitions, 0.5, 0, keypair512, group64)
    assert len(run.trace) == 0
    assert run.strong.model.weights.tolist() == [0.0] * 3
    assert run.weak.model.weights.tolist() == [0.0] * 3


def test_lambda_zero_matches_reference(small_partitions, keypair512, group64):
    strong, weak = small_partitions
    run = run_small(small_partitions, 0.0, 8, keypair512, group64)
    assert run.weak.obfuscated == run.weak.intersection
    ref = reference_trace(strong, weak, run.weak.intersection, 0.15, 8)
    div = run.trace.divergence(ref)
    assert max(div.values()) < 1e-6


def test_reference_against_plain_python_loop(small_partitions):
    strong, weak = small_partitions
    ids = sorted(weak.ids)
    Xw, Xs, y = weak.rows(ids), strong.rows(ids), weak.labels_for(ids)
    trace = centralized_reference(Xw, Xs, y, 0.15, 5)
    X = np.hstack([Xw, Xs]).tolist()
    w = [0.0] * 6
    for k in range(5):
        assert trace.records[k].loss == pytest.approx(-plain_loglik(w, X, y), rel=1e-12)
        z = [sum(a * b for a, b in zip(w, xi)) for xi in X]
        phi = [yi - 1 / (1 + math.exp(-zi)) for yi, zi in zip(y, z)]
        w = [w[j] + 0.15 * sum(p * xi[j] for p, xi in zip(phi, X)) / len(y) for j in range(6)]
        np.testing.assert_allclose(trace.weights()[k], w, rtol=1e-12, atol=1e-14)


def test_lambda_invariance_and_monotone_loss(small_partitions, keypair512, group64):
    runs = {lam: run_small(small_partitions, lam, 6, keypair512, group64) for lam in (0.0, 0.5, 1.0)}
    sizes = [len(r.weak.obfuscated) for r in runs.values()]
    assert sizes[0] < sizes[1] < sizes[2] == 80
    for lam in (0.5, 1.0):
        assert max(runs[0.0].trace.divergence(runs[lam].trace).values()) < 1e-6
    losses = runs[1.0].trace.losses
    assert np.all(np.diff(losses) < 0)


def test_train_direct(small_partitions, keypair512):
    strong, weak = small_partitions
    inter = sorted(set(strong.ids) & set(weak.ids))
    obf = inter + [x for x in strong.ids if x not in set(inter)][:10]
    s = StrongTrainer(strong, obf, 0.15, random.Random(0))
    w = WeakTrainer(weak, inter, obf, 0.15, rng=random.Random(1), keypair=keypair512)
    s_model, w_model, trace = train(s, w, 3)
    ref = centralized_reference(weak.rows(inter), strong.rows(inter), weak.labels_for(inter), 0.15, 3)
    assert max(trace.divergence(ref).values()) < 1e-6
    with pytest.raises(ValueError):
        train(s, w, -1)


def test_divergence_detected(keypair512):
    # a huge step size on separable data drives the weights to overflow
    X = np.array([[1e200], [-1e200]])
    weak = VerticalDataset(("a", "b"), X, [1, 0])
    strong = VerticalDataset(("a", "b"), [[1.0], [1.0]])
    s = StrongTrainer(strong, ["a", "b"], 1e200, random.Random(0))
    w = WeakTrainer(weak, ["a", "b"], ["a", "b"], 1e200, rng=random.Random(1), keypair=keypair512)
    with pytest.raises((DivergenceError, CodecOverflowError)):
        train(s, w, 3)
