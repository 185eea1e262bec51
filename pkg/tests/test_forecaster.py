import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motforecast.forecaster import (ForecasterConfig, ForecasterParams, LearnedPredictor, PastSequence,
                                    TrainConfig, TrainingDiverged, TrainingSample, collate, decode_future,
                                    decode_past, desk_config, desk_train_config, encode_embedding,
                                    encode_past, forecast, forecast_batch, forecast_loss, init_params,
                                    loss_and_grad, loss_future, loss_past, samples_from_tracks, train,
                                    trajectory_concat, uncertainty_loss, write_training_log, zero_params)
from motforecast.motion import NotReadyError, cv_predict
from oracles import gradient_check, random_batch

SMALL = ForecasterConfig(p=4, q=5, hidden=8, feat_dim=6, embed_dim=3)


def _past(n=4, p=4, v=(2.0, 1.0, 0.0, 0.0)):
    boxes = np.array([100, 120, 20, 40.0]) + np.arange(n)[:, None] * np.asarray(v)
    return PastSequence.from_boxes(boxes, p)


def test_reference_defaults():
    cfg = ForecasterConfig()
    assert (cfg.p, cfg.q, cfg.hidden, cfg.feat_dim, cfg.embed_dim, cfg.concat_dim) == (10, 60, 256, 256, 256, 512)
    t = TrainConfig()
    assert (t.epochs, t.batch_size, t.lr, t.lr_decayed, t.decay_epoch) == (30, 8, 1e-4, 1e-5, 20)
    assert (t.beta1, t.beta2, t.adam_eps, t.log_var_init) == (0.9, 0.999, 1e-8, 0.0)
    assert t.lr_at(19) == 1e-4 and t.lr_at(20) == 1e-5


def test_config_validation():
    assert ForecasterConfig(p=1).violations()
    assert ForecasterConfig(q=0).violations()
    assert ForecasterConfig(hidden=0).violations()
    assert TrainConfig(log_var_init=6).violations()


def test_zero_weight_encoder():
    params = zero_params(SMALL)
    params.tensors["encfc_b"][:] = np.linspace(-1, 1, SMALL.feat_dim)
    h, phi_B = encode_past(_past(), params)
    np.testing.assert_array_equal(h, 0)
    np.testing.assert_array_equal(phi_B, np.maximum(params["encfc_b"], 0))
    assert h.shape == (SMALL.hidden,) and phi_B.shape == (SMALL.feat_dim,)


def test_reference_widths():
    cfg = ForecasterConfig(p=4, q=3)
    params = init_params(cfg, 0)
    h, phi_B = encode_past(_past(), params)
    assert h.shape == (256,) and phi_B.shape == (256,)
    assert encode_embedding(np.zeros(256), params).shape == (256,)
    assert params["fd_Wx"].shape[1] == 512


def test_encode_deterministic_and_nonnegative():
    params = init_params(SMALL, 3)
    a = encode_past(_past(), params)
    b = encode_past(_past(), params)
    np.testing.assert_array_equal(a[1], b[1])
    assert (a[1] >= 0).all()


def test_encode_not_ready():
    with pytest.raises(NotReadyError):
        encode_past(_past(n=1), init_params(SMALL, 0))


def test_encode_embedding():
    params = zero_params(SMALL)
    np.testing.assert_array_equal(encode_embedding(np.zeros(3), params), 0)
    params = init_params(SMALL, 1)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert (encode_embedding(rng.normal(size=3) * 5, params) >= 0).all()
    with pytest.raises(ValueError):
        encode_embedding(np.zeros(4), params)


def test_zero_weight_decoders():
    params = zero_params(SMALL)
    params.tensors["pd_bo"][:] = np.arange(8)
    params.tensors["fd_bo"][:] = [1, -1, 0.5, 0]
    h = np.zeros(SMALL.hidden)
    phi = np.zeros(SMALL.feat_dim)
    past = decode_past(h, phi, params)
    assert past.shape == (SMALL.p, 8)
    # outputs are rescaled to pixels, so compare against the first row
    assert np.allclose(past, past[0])
    vel = decode_future(h, phi, phi, params)
    assert vel.shape == (SMALL.q, 4)
    assert np.allclose(vel, vel[0])


def test_future_decoder_uses_context():
    params = init_params(SMALL, 7)
    h, phi_B = encode_past(_past(), params)
    a = decode_future(h, phi_B, encode_embedding(np.ones(3), params), params)
    b = decode_future(h, phi_B, encode_embedding(-np.ones(3) * 2, params), params)
    assert not np.allclose(a, b)


def test_trajectory_concat_examples():
    v = np.tile([1.0, 0, 0, 0], (3, 1))
    corr = trajectory_concat((10, 10, 4, 8), v, "corrected").boxes
    np.testing.assert_array_equal(corr, [(11, 10, 4, 8), (12, 10, 4, 8), (13, 10, 4, 8)])
    lit = trajectory_concat((10, 10, 4, 8), v, "literal").boxes
    np.testing.assert_array_equal(lit[:, 0], [11, 14, 19])
    for mode in ("corrected", "literal"):
        np.testing.assert_array_equal(trajectory_concat((10, 10, 4, 8), np.zeros((4, 4)), mode).boxes,
                                      [(10, 10, 4, 8)] * 4)
    with pytest.raises(ValueError):
        trajectory_concat((10, 10, 4, 8), v, "other")


@settings(max_examples=200)
@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=4, max_size=4),
       st.integers(1, 30))
def test_concat_matches_cv(last, v, q):
    last = np.array(last) + np.array([0, 0, 100, 100])
    prev = last - np.array(v) * np.array([1, 1, 0.1, 0.1])
    got = trajectory_concat(last, np.tile(last - prev, (q, 1))).boxes
    want = cv_predict([prev, last], q).boxes
    np.testing.assert_array_equal(got, want)


def test_loss_examples():
    truth = PastSequence(np.zeros((3, 8)), 1)
    pred = np.zeros((3, 8))
    pred[-1] = 1.0
    pred[0] = 99.0  # padding row is ignored
    assert loss_past(truth, pred) == 1.0
    assert loss_past(truth, truth.steps) == 0.0
    truth = PastSequence(np.zeros((3, 8)), 2)
    pred = np.zeros((3, 8))
    pred[1, :2] = 1.0
    pred[2, :2] = 1.0
    assert loss_past(truth, pred) == 0.25
    assert loss_future(np.zeros((3, 4)), np.full((3, 4), 2.0), 1) == 2.0
    assert loss_future(np.ones((3, 4)), np.ones((3, 4)), 3) == 0.0
    a = loss_future(np.zeros((3, 4)), np.full((3, 4), 0.5), 2)
    assert loss_future(np.zeros((3, 4)), np.full((3, 4), 1.0), 2) == 2 * a
    with pytest.raises(ValueError):
        loss_past(PastSequence(np.zeros((3, 8)), 0), np.zeros((3, 8)))
    assert forecast_loss(0, 0) == 0 and forecast_loss(1.0, 2.0) == 3.0 and forecast_loss(0.25, 0) == 0.25


def test_uncertainty_examples():
    assert uncertainty_loss([2, 4, 6], [0, 0, 0]) == 6.0
    assert uncertainty_loss([("for", 3.0)], [0.0]) == 1.5
    # d/ds of 0.5 (e^-s L + s) = 0.5 (1 - e^-s L)
    L, s, h = 3.0, 0.4, 1e-6
    fd = (uncertainty_loss([L], [s + h]) - uncertainty_loss([L], [s - h])) / (2 * h)
    assert fd == pytest.approx(0.5 * (1 - math.exp(-s) * L), abs=1e-8)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(-2, 5)), min_size=1, max_size=6), st.randoms())
def test_uncertainty_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert uncertainty_loss([l for l, _ in pairs], [s for _, s in pairs]) == \
        uncertainty_loss([l for l, _ in shuffled], [s for _, s in shuffled])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(1, 6), st.integers(0, 1000))
def test_masking_invariance(valid, extra, seed):
    params = init_params(SMALL, seed)
    past = _past(n=valid, p=SMALL.p)
    longer = past.padded(extra)
    h1, b1 = encode_past(past, params)
    h2, b2 = encode_past(longer, params)
    np.testing.assert_array_equal(h1, h2)
    np.testing.assert_array_equal(b1, b2)
    pred = np.random.default_rng(seed).normal(size=(SMALL.p, 8))
    pred_long = np.vstack([np.random.default_rng(seed + 1).normal(size=(extra, 8)), pred])
    assert loss_past(past, pred) == loss_past(longer, pred_long)


def test_batch_loss_masking_invariance():
    rng = np.random.default_rng(0)
    cfg = SMALL
    batch = random_batch(cfg, rng, 4)
    params = init_params(cfg, 0)
    base = loss_and_grad(params, batch, need_grad=False)[0]
    wide = ForecasterConfig(**{**cfg.__dict__, "p": cfg.p + 3})
    padded = batch.__class__(np.concatenate([np.zeros((4, 3, 8)), batch.X], 1),
                             np.concatenate([np.zeros((4, 3)), batch.pmask], 1),
                             batch.F, batch.fmask, batch.last, batch.ctx)
    other = ForecasterParams(wide, params.tensors)
    assert loss_and_grad(other, padded, need_grad=False)[0].total == base.total


def test_gradient_check_small():
    rng = np.random.default_rng(1)
    errs = gradient_check(SMALL, random_batch(SMALL, rng), seed=1)
    assert max(errs.values()) <= 1e-4, errs


def test_s_det_s_id_get_zero_gradient():
    _, grads = loss_and_grad(init_params(SMALL, 0), random_batch(SMALL, np.random.default_rng(0)))
    assert grads["log_vars"][0] == 0 and grads["log_vars"][1] == 0 and grads["log_vars"][2] != 0


def test_serialization_round_trip(tmp_path):
    params = init_params(SMALL, 5)
    params.save(tmp_path / "m.npz")
    back = ForecasterParams.load(tmp_path / "m.npz")
    assert back.config == params.config
    ctx = np.array([0.3, -1, 2])
    np.testing.assert_array_equal(forecast(_past(), ctx, params).boxes, forecast(_past(), ctx, back).boxes)
    assert back.digest() == params.digest()


def test_load_rejects_shape_mismatch(tmp_path):
    params = init_params(SMALL, 5)
    params.tensors["fd_Wo"] = np.zeros((3, 3))
    params.save(tmp_path / "bad.npz")
    with pytest.raises(ValueError, match="fd_Wo"):
        ForecasterParams.load(tmp_path / "bad.npz")


def test_forecast_shape_and_determinism():
    params = init_params(SMALL, 2)
    a = forecast(_past(), None, params)
    assert len(a) == SMALL.q
    np.testing.assert_array_equal(a.boxes, forecast(_past(), None, params).boxes)
    with pytest.raises(NotReadyError):
        forecast(_past(n=1), None, params)
    batch = forecast_batch([_past(), _past(n=3)], None, params)
    np.testing.assert_allclose(batch[0], a.boxes, atol=1e-12)


def _one_sample():
    past = _past(n=4, p=SMALL.p, v=(3.0, -1.0, 0.2, 0.4))
    fut = past.steps[-1, :4] + np.arange(1, SMALL.q + 1)[:, None] * np.array([3.0, -1.0, 0.2, 0.4])
    return TrainingSample(past, fut, SMALL.q, past.last_box, np.array([0.5, -0.5, 1.0]))


def test_zero_lr_leaves_params_unchanged():
    start = init_params(SMALL, 0)
    params, _ = train([_one_sample()] * 4, SMALL, TrainConfig(epochs=2, batch_size=2, lr=0.0, lr_decayed=0.0),
                      params=start)
    for k in start.tensors:
        assert np.array_equal(params[k], start[k])


def test_training_deterministic():
    data = [_one_sample()] * 6
    settings_ = desk_train_config(epochs=3, batch_size=2)
    a, ha = train(data, SMALL, settings_)
    b, hb = train(data, SMALL, settings_)
    assert a.digest() == b.digest() and ha == hb


def test_overfit_one_sample_loss_curve(tmp_path):
    sample = _one_sample()
    # 200 copies with batch 1: 200 steps per epoch, 10 epochs = 2000 steps
    cfg = TrainConfig(epochs=10, batch_size=1, lr=1e-3, lr_decayed=1e-5, decay_epoch=5)
    _, hist = train([sample] * 200, SMALL, cfg)
    l_for = [h.l_for for h in hist]
    assert all(b < a for a, b in zip(l_for, l_for[1:])), l_for
    assert l_for[-1] < 0.05 * l_for[0]
    write_training_log(hist, tmp_path / "log.csv")
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,l_for,lr" and len(rows) == 11


def test_overfit_one_sample_reconstruction():
    sample = _one_sample()
    cfg = ForecasterConfig(p=4, q=5, hidden=16, feat_dim=16, embed_dim=3)
    params = None
    # L1 under Adam settles to a band proportional to the step size, so anneal in stages
    for lr, steps in [(3e-3, 3000), (1e-3, 3000), (3e-4, 3000), (1e-4, 3000), (3e-5, 2000)]:
        params, _ = train([sample], cfg, TrainConfig(epochs=steps, batch_size=1, lr=lr, lr_decayed=lr,
                                                     decay_epoch=steps), params=params)
    h, phi_B = encode_past(sample.past, params)
    recon = decode_past(h, phi_B, params)
    assert np.abs(recon - sample.past.steps).mean() < 1e-2


def test_diverged_training_names_batch():
    sample = _one_sample()
    bad = TrainingSample(sample.past, sample.future_boxes * np.nan, SMALL.q, sample.last_box, sample.context)
    with pytest.raises(TrainingDiverged, match="sample indices"):
        train([bad], SMALL, TrainConfig(epochs=1, batch_size=1))


def test_samples_from_tracks_splits_gaps_and_needs_three():
    cfg = ForecasterConfig(p=4, q=5)
    tracks = {1: [(f, (f, 0, 10, 10)) for f in [1, 2, 3, 4, 10, 11]], 2: [(1, (0, 0, 1, 1)), (2, (1, 0, 1, 1))]}
    samples = samples_from_tracks(tracks, cfg)
    # frames 1-4 give anchors at index 2 and 3; the 2-frame run after the gap gives none
    assert len(samples) == 2
    assert [s.future_valid_len for s in samples] == [2, 1]
    assert samples_from_tracks({2: tracks[2]}, cfg) == []


def test_learned_predictor_trained_on_linear_tracks():
    cfg = desk_config(p=10, q=10, hidden=16, feat_dim=16)
    rng = np.random.default_rng(0)

    def tracks(n, offset):
        out = {}
        for k in range(n):
            v = np.r_[rng.uniform(-3, 3, 2), 0, 0]
            start = np.r_[rng.uniform(200, 800, 2), rng.uniform(20, 40), rng.uniform(40, 80)]
            out[k + offset] = [(f, tuple(start + f * v)) for f in range(40)]
        return out

    train_set = samples_from_tracks(tracks(30, 0), cfg, stride=2, full_future=True)
    params, _ = train(train_set, cfg, desk_train_config(epochs=30))
    errs = []
    for rows in tracks(10, 100).values():
        boxes = np.array([b for _, b in rows])
        pred = LearnedPredictor(params)
        for b in boxes[:10]:
            pred.observe(b)
        hz = pred.predict(10).boxes
        errs.append(np.hypot(*(hz[:, :2] - boxes[10:20, :2]).T).mean())
    assert np.mean(errs) < 2.0


def test_collate_masks():
    b = collate([_one_sample(), TrainingSample(_past(n=2, p=SMALL.p), np.zeros((SMALL.q, 4)), 2,
                                               _past(n=2, p=SMALL.p).last_box, np.zeros(3))], SMALL)
    np.testing.assert_array_equal(b.pmask[1], [0, 0, 1, 1])
    np.testing.assert_array_equal(b.fmask[1], [1, 1, 0, 0, 0])
