import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _oracles import finite_difference, max_relative_error
from stageids.ae import (AeConfig, AePredictor, AeSample, MultiInputRnn, build_ae_dataset, class_weights,
                         evaluate_ae, loss_and_grads, majority_baseline_f1, predict_target_risk, read_ae_dataset,
                         rnn_forward, rnn_forward_many, rnn_step, split_targets, train_rnn, write_ae_dataset)
from stageids.detector import Detection
from stageids.errors import BundleFormatError, DegenerateLabels, DimensionMismatch, EmptyDataset
from stageids.flow_model import FeatureSchema, FlowRecord, LabeledDataset, StageLabel
from stageids.gcn import Embedding
from stageids.optim import Adam


def scalar_model(w1=0.0, w2=0.0, wh=0.0, b=0.0, head=(0.0, 0.0), by=(0.0, 0.0)):
    m = MultiInputRnn.zeros(1, 1)
    m.w_hx1[:], m.w_hx2[:], m.w_hh[:], m.b_h[:] = w1, w2, wh, b
    m.w_yh[:, 0] = head
    m.b_y[:] = by
    return m


def random_sample(rng, t, d, label=0, fill=None):
    n1 = int(rng.integers(1, t + 1)) if fill is None else fill
    n2 = int(rng.integers(1, t + 1)) if fill is None else fill
    s1, s2 = np.zeros((t, d)), np.zeros((t, d))
    s1[:n1] = rng.normal(size=(n1, d))
    s2[:n2] = rng.normal(size=(n2, d))
    return AeSample("t", s1, s2, np.arange(t) < n1, np.arange(t) < n2, label)


def test_step_examples():
    assert rnn_step(MultiInputRnn.zeros(3, 4), np.ones(3), np.ones(3), np.zeros(4)).tolist() == [0.0] * 4
    m = scalar_model(w1=1.0, w2=1.0)
    assert rnn_step(m, [0.5], [-0.5], [0.0]).tolist() == [0.0]
    assert rnn_step(scalar_model(w1=1.0), [1.0], [0.0], [0.0])[0] == pytest.approx(0.761594, abs=1e-6)


def test_step_masks_and_dims():
    m = scalar_model(w1=1.0, w2=2.0, wh=0.5)
    assert rnn_step(m, [3.0], [1.0], [0.2], masks=(False, False)).tolist() == [0.2]
    assert rnn_step(m, [3.0], [1.0], [0.2], masks=(False, True))[0] == pytest.approx(math.tanh(0.1 + 2.0), abs=1e-15)
    with pytest.raises(DimensionMismatch):
        rnn_step(m, [1.0, 2.0], [1.0], [0.0])


def test_forward_zero_model_and_normalization(rng):
    s = random_sample(rng, 5, 3)
    assert rnn_forward(MultiInputRnn.zeros(3, 4), s).tolist() == [0.5, 0.5]
    p = rnn_forward(MultiInputRnn.init(3, 4, seed=2), s)
    assert abs(p.sum() - 1.0) < 1e-9


def test_forward_matches_hand_unrolled_scalar_model():
    m = scalar_model(0.7, -1.3, 0.4, 0.1, head=(2.0, -1.5), by=(0.3, -0.2))
    s = AeSample("t", [[0.5], [-2.0]], [[1.5], [0.25]], [True, True], [True, True], 0)
    h1 = math.tanh(0.7 * 0.5 - 1.3 * 1.5 + 0.1)
    h2 = math.tanh(0.7 * -2.0 - 1.3 * 0.25 + 0.4 * h1 + 0.1)
    l0, l1 = 2.0 * h2 + 0.3, -1.5 * h2 - 0.2
    p1 = math.exp(l1) / (math.exp(l0) + math.exp(l1))
    assert abs(rnn_forward(m, s)[1] - p1) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_bptt_gradients(seed):
    rng = np.random.default_rng(seed)
    samples = [random_sample(rng, 4, 2, label=k % 2) for k in range(5)]
    m = MultiInputRnn.init(2, 3, seed=seed)
    m.w_yh[:] = rng.normal(size=m.w_yh.shape)
    m.b_y[:] = rng.normal(size=2) * 0.1
    x = (np.stack([s.seq1 for s in samples]), np.stack([s.mask1 for s in samples]),
         np.stack([s.seq2 for s in samples]), np.stack([s.mask2 for s in samples]))
    y = np.array([s.label for s in samples])
    w = class_weights(y)[y]
    _, grads = loss_and_grads(m, *x, y, w)
    numeric = finite_difference(lambda: loss_and_grads(m, *x, y, w)[0], m.params)
    assert max_relative_error(grads, numeric) < 1e-4


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 5))
def test_padding_is_a_no_op(seed, t, extra):
    rng = np.random.default_rng(seed)
    s = random_sample(rng, t, 3)
    m = MultiInputRnn.init(3, 4, seed=seed % 100)
    m.w_yh[:] = rng.normal(size=m.w_yh.shape)
    assert np.array_equal(rnn_forward(m, s.padded(extra)), rnn_forward(m, s))


def test_risk_threshold_rule():
    zero = MultiInputRnn.zeros(2, 3)
    s = random_sample(np.random.default_rng(0), 3, 2)
    assert predict_target_risk(zero, s) == (0.5, True)
    m = MultiInputRnn.zeros(2, 3)
    m.b_y[1] = math.log(0.7 / 0.3)
    p, hit = predict_target_risk(m, s)
    assert p == pytest.approx(0.7, abs=1e-12) and hit
    assert predict_target_risk(m, s, threshold=0.8)[1] is False


def mean_sign_dataset(seed, n=160, t=6, d=3):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        s = random_sample(rng, t, d)
        s.seq2[s.mask2] += rng.choice([-0.8, 0.8])
        s.label = int(s.seq2[s.mask2].mean() > 0)
        s.target_ip = f"10.0.{k // 256}.{k % 256}"
        out.append(s)
    return out


def test_learns_mean_of_second_sequence():
    samples = mean_sign_dataset(1)
    train, test = split_targets(samples, 0.3, seed=1)
    model, losses = train_rnn(train, AeConfig(hidden_dim=8, epochs=200, seed=3))
    assert losses[-1] < losses[0]
    assert evaluate_ae(model, train, test)["f1"] >= 0.8


def test_training_is_deterministic():
    samples = mean_sign_dataset(2, n=40)
    cfg = AeConfig(hidden_dim=4, epochs=25, seed=1)
    m1, l1 = train_rnn(samples, cfg)
    m2, l2 = train_rnn(samples, cfg)
    assert l1 == l2
    assert m1.to_dict() == m2.to_dict()


def test_training_needs_both_labels(rng):
    with pytest.raises(DegenerateLabels):
        train_rnn([random_sample(rng, 3, 2, label=1) for _ in range(4)])
    with pytest.raises(EmptyDataset):
        train_rnn([])


def test_class_weights_balance():
    y = np.array([0, 0, 0, 1])
    w = class_weights(y)[y]
    assert w.mean() == 1.0
    assert w[y == 0].sum() == w[y == 1].sum()


def test_adam_clips_global_norm():
    p = [np.zeros(2)]
    opt = Adam(p, step_size=0.1, clip_norm=1.0)
    opt.step([np.array([30.0, 40.0])])
    # first Adam step moves each coordinate by about step_size in the gradient sign
    assert np.allclose(p[0], [-0.1, -0.1], atol=1e-6)
    assert np.allclose(opt.m[0], [0.06, 0.08])


def truth_and_detection(events):
    """events: (ts, src, dst, stage, flagged_stage or None)."""
    flows, labels, embs = [], [], {1: [], 2: []}
    for i, (ts, src, dst, stage, flagged) in enumerate(events):
        flows.append(FlowRecord(float(ts), src, 1, dst, 2, "tcp", (), (), "normal"))
        labels.append(StageLabel(stage))
        if flagged in (1, 2):
            embs[flagged].append(Embedding(np.array([float(i), -float(i)]), i, 0))
    truth = LabeledDataset(flows, FeatureSchema([], [], dropped_names=[]), labels)
    return Detection([], embs, {}), truth


def test_build_dataset_labels():
    det, truth = truth_and_detection([
        (1, "a", "hit", 1, 1), (2, "a", "hit", 2, 2), (3, "a", "hit", 3, None),
        (4, "a", "miss", 1, 1), (5, "a", "miss", 2, 2),
        (6, "a", "only1", 1, 1),
        (7, "a", "late", 1, 1), (8, "a", "late", 2, 2), (100, "a", "late", 3, None),
    ])
    samples = build_ae_dataset(det, truth, T=3)
    by_ip = {s.target_ip: s for s in samples}
    assert sorted(by_ip) == ["hit", "late", "miss"]
    assert by_ip["hit"].label == 1 and by_ip["miss"].label == 0 and by_ip["late"].label == 1
    assert build_ae_dataset(det, truth, T=3, horizon=50)[1].label == 0
    assert by_ip["hit"].mask1.tolist() == [True, False, False]
    assert by_ip["hit"].seq1[0].tolist() == [0.0, -0.0]


def test_stage3_before_last_stage2_does_not_count():
    det, truth = truth_and_detection([(1, "a", "x", 1, 1), (2, "a", "x", 3, None), (3, "a", "x", 2, 2)])
    assert build_ae_dataset(det, truth)[0].label == 0


def test_truncation_keeps_newest():
    events = [(k, "a", "x", 1, 1) for k in range(5)] + [(10, "a", "x", 2, 2)]
    det, truth = truth_and_detection(events)
    s = build_ae_dataset(det, truth, T=2)[0]
    assert s.seq1[:, 0].tolist() == [3.0, 4.0]
    assert s.mask1.all()


def test_no_target_with_both_stages():
    det, truth = truth_and_detection([(1, "a", "x", 1, 1), (2, "a", "y", 2, 2)])
    with pytest.raises(EmptyDataset):
        build_ae_dataset(det, truth)


def test_dataset_file_round_trip(tmp_path, rng):
    samples = [random_sample(rng, 4, 3, label=k % 2) for k in range(3)]
    write_ae_dataset(samples, tmp_path / "ae.jsonl")
    assert (tmp_path / "ae.jsonl").read_text().splitlines()[0] == "stageids-ae-dataset v1 dim=3"
    back = read_ae_dataset(tmp_path / "ae.jsonl")
    for a, b in zip(samples, back):
        for f in ("seq1", "seq2", "mask1", "mask2"):
            assert np.array_equal(getattr(a, f), getattr(b, f))
        assert a.label == b.label
    (tmp_path / "bad.jsonl").write_text("something else\n")
    with pytest.raises(BundleFormatError):
        read_ae_dataset(tmp_path / "bad.jsonl")


def test_predictor_bundle_round_trip(tmp_path, rng):
    m = MultiInputRnn.init(3, 4, seed=5)
    m.w_yh[:] = rng.normal(size=m.w_yh.shape)
    AePredictor(m, AeConfig(T=4)).save(tmp_path / "ae.bundle")
    back = AePredictor.load(tmp_path / "ae.bundle")
    s = random_sample(rng, 4, 3)
    assert np.array_equal(rnn_forward(back.model, s), rnn_forward(m, s))
    assert back.config.T == 4


def test_batch_equals_single(rng):
    samples = [random_sample(rng, 5, 3) for _ in range(6)]
    m = MultiInputRnn.init(3, 4, seed=1)
    m.w_yh[:] = rng.normal(size=m.w_yh.shape)
    many = rnn_forward_many(m, samples)
    for s, p in zip(samples, many):
        assert np.allclose(rnn_forward(m, s), p, atol=1e-14)


def test_majority_baseline():
    assert majority_baseline_f1([1, 1, 0], [True, False]) == (1, pytest.approx(2 / 3))
    assert majority_baseline_f1([0, 0, 1], [True, False]) == (0, 0.0)


def test_split_targets_is_stratified():
    samples = mean_sign_dataset(4, n=50)
    train, test = split_targets(samples, 0.3, seed=2)
    assert len(train) + len(test) == 50
    assert {s.label for s in test} == {0, 1}
    assert not {s.target_ip for s in train} & {s.target_ip for s in test}
