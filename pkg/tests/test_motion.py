import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motforecast.motion import (ConstantVelocityPredictor, KalmanConfig, KalmanPredictor, KalmanState,
                                NotReadyError, cv_predict, kf_forecast, kf_init, kf_predict_step,
                                kf_update_step)

# noise-free model: no position process noise, near-zero measurement noise
EXACT = KalmanConfig(std_weight_position=0.0, std_weight_measurement=1e-9)


def test_cv_examples():
    hz = cv_predict([(0, 0, 2, 2), (1, 0, 2, 2)], 3)
    np.testing.assert_array_equal(hz.boxes, [(2, 0, 2, 2), (3, 0, 2, 2), (4, 0, 2, 2)])
    hz = cv_predict([(3, 3, 2, 2), (3, 3, 2, 2)], 2)
    np.testing.assert_array_equal(hz.boxes, [(3, 3, 2, 2)] * 2)
    with pytest.raises(NotReadyError):
        cv_predict([(0, 0, 2, 2)], 3)


def test_cv_floors_size():
    hz = cv_predict([(0, 0, 4, 4), (0, 0, 2, 2)], 5)
    assert (hz.boxes[:, 2:] > 0).all()


def test_kf_init_examples():
    st_ = kf_init((10, 10, 4, 8))
    np.testing.assert_array_equal(st_.mean, [10, 10, 4, 8, 0, 0, 0, 0])
    assert np.count_nonzero(st_.covariance - np.diag(np.diag(st_.covariance))) == 0


def test_kf_predict_examples():
    st_ = KalmanState(np.array([0, 0, 2, 2, 1, 0, 0, 0], float), np.eye(8))
    nxt = kf_predict_step(st_)
    np.testing.assert_array_equal(nxt.mean, [1, 0, 2, 2, 1, 0, 0, 0])
    assert np.trace(nxt.covariance) > np.trace(st_.covariance)
    still = kf_predict_step(kf_init((5, 5, 2, 4)))
    np.testing.assert_array_equal(still.mean[:4], [5, 5, 2, 4])


def test_kf_update_examples():
    prior = kf_predict_step(kf_init((10, 10, 4, 8), EXACT), EXACT)
    post = kf_update_step(prior, prior.mean[:4], EXACT)
    np.testing.assert_allclose(post.mean[:4], prior.mean[:4], atol=1e-9)
    post = kf_update_step(prior, (11, 9, 4, 8))
    assert np.trace(post.covariance[:4, :4]) < np.trace(prior.covariance[:4, :4])


def test_kf_update_singular():
    st_ = KalmanState(np.array([0, 0, 2, 2, 0, 0, 0, 0], float), np.zeros((8, 8)))
    with pytest.raises(np.linalg.LinAlgError):
        kf_update_step(st_, (0, 0, 2, 2), KalmanConfig(std_weight_measurement=0.0))


def test_kf_forecast_examples():
    hz = kf_forecast(kf_init((3, 4, 2, 2)), 4)
    np.testing.assert_array_equal(hz.boxes, [(3, 4, 2, 2)] * 4)
    st_ = KalmanState(np.array([0, 0, 2, 2, 1, 0, 0, 0], float), np.eye(8))
    hz = kf_forecast(st_, 3)
    assert len(hz) == 3
    np.testing.assert_array_equal(hz.boxes[:, 0], [1, 2, 3])


def test_kf_forecast_equals_repeated_predict():
    rng = np.random.default_rng(0)
    st_ = KalmanState(rng.normal(size=8) + np.r_[0, 0, 20, 40, 0, 0, 0, 0], np.eye(8))
    ref, s = [], st_
    for _ in range(7):
        s = kf_predict_step(s)
        ref.append(s.mean[:4])
    np.testing.assert_allclose(kf_forecast(st_, 7).boxes, ref, atol=1e-12)


def _linear_track(n, v=(1.5, -0.5, 0.0, 0.0), start=(100, 80, 20, 40)):
    return [np.asarray(start, float) + k * np.asarray(v) for k in range(n)]


def test_kf_exact_on_noise_free_track():
    track = _linear_track(7)
    st_ = kf_init(track[0], EXACT)
    for box in track[1:6]:
        st_ = kf_update_step(kf_predict_step(st_, EXACT), box, EXACT)
    one_step = kf_predict_step(st_, EXACT).mean[:4]
    assert np.abs(one_step - track[6]).max() < 1e-6
    future = np.array(_linear_track(16))[6:16]
    err = np.hypot(*(kf_forecast(st_, 10, EXACT).boxes[:, :2] - future[:, :2]).T)
    assert err.mean() < 1e-3


def test_cv_exact_on_noise_free_track():
    track = _linear_track(20)
    hz = cv_predict(track[:10], 10)
    np.testing.assert_allclose(hz.boxes, track[10:], rtol=0, atol=1e-9)


def test_kf_covariance_spd_over_random_cycles():
    rng = np.random.default_rng(11)
    st_ = kf_init((300, 200, 30, 60))
    for _ in range(10_000):
        st_ = kf_predict_step(st_)
        obs = st_.mean[:4] + rng.normal(0, 3, 4)
        obs[2:] = np.abs(obs[2:]) + 1
        st_ = kf_update_step(st_, obs)
        assert np.abs(st_.covariance - st_.covariance.T).max() <= 1e-9
        np.linalg.cholesky(st_.covariance)
        assert np.isfinite(st_.mean).all()


@pytest.mark.parametrize("cls", [ConstantVelocityPredictor, KalmanPredictor])
def test_predictor_contract(cls):
    pred = cls()
    with pytest.raises(NotReadyError):
        pred.predict(5)
    pred.observe((0, 0, 2, 2))
    with pytest.raises(NotReadyError):
        pred.predict(5)
    pred.observe((1, 0, 2, 2))
    assert len(pred.predict(5)) == 5
    pred.reset()
    assert not pred.ready


def test_cv_predictor_gap_gives_per_frame_velocity():
    pred = ConstantVelocityPredictor()
    pred.observe((0, 0, 2, 2))
    pred.observe((6, 0, 2, 2), gap=3)
    np.testing.assert_allclose(pred.predict(2).boxes[:, 0], [8, 10])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.integers(2, 30))
def test_cv_linear_exactness_property(v, q):
    track = _linear_track(q + 2, v=(v[0], v[1], 0.0, 0.0))
    hz = cv_predict(track[:2], q)
    np.testing.assert_allclose(hz.boxes, track[2:], rtol=0, atol=1e-9)
