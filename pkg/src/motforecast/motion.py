"""Baseline motion predictors: constant velocity and a constant-velocity Kalman filter.

Both work in the centroid box parameterization ``(x, y, w, h)``; the Kalman state
appends the four per-frame rates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import EPS_SIZE, BoundingBox, boxes_to_array, floor_size


class NotReadyError(RuntimeError):
    """Raised when a predictor is asked to forecast from fewer than two observations."""


@dataclass(frozen=True)
class ForecastHorizon:
    boxes: np.ndarray  # (q, 4), centroid form
    origin_frame: int = 0

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, i: int) -> BoundingBox:
        return BoundingBox(*map(float, self.boxes[i]))


def cv_predict(history: Sequence[Sequence[float]], q: int, origin_frame: int = 0) -> ForecastHorizon:
    arr = boxes_to_array(history)
    if len(arr) < 2:
        raise NotReadyError("constant-velocity forecast needs at least two boxes")
    vel = arr[-1] - arr[-2]
    # running sum rather than i * vel: same arithmetic as the learned model's concatenation layer
    return ForecastHorizon(floor_size(arr[-1] + np.cumsum(np.tile(vel, (q, 1)), axis=0)), origin_frame)


@dataclass
class KalmanConfig:
    """Noise standard deviations as fractions of box height."""

    std_weight_position: float = 1.0 / 20
    std_weight_velocity: float = 1.0 / 160
    std_weight_measurement: float = 1.0 / 20
    init_velocity_factor: float = 10.0


@dataclass
class KalmanState:
    mean: np.ndarray  # (8,)
    covariance: np.ndarray  # (8, 8)

    def copy(self) -> "KalmanState":
        return KalmanState(self.mean.copy(), self.covariance.copy())

    @property
    def box(self) -> BoundingBox:
        return BoundingBox(*map(float, self.mean[:4]))


_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)


def _height(mean: np.ndarray) -> float:
    return max(abs(float(mean[3])), EPS_SIZE)


def kf_init(box: Sequence[float], cfg: Optional[KalmanConfig] = None) -> KalmanState:
    cfg = cfg or KalmanConfig()
    mean = np.concatenate([np.asarray(box, dtype=np.float64), np.zeros(4)])
    h = _height(mean)
    std = np.r_[
        np.full(4, 2 * cfg.std_weight_position * h),
        np.full(4, cfg.init_velocity_factor * cfg.std_weight_velocity * h),
    ]
    return KalmanState(mean, np.diag(std**2))


def _process_noise(mean: np.ndarray, cfg: KalmanConfig) -> np.ndarray:
    h = _height(mean)
    std = np.r_[np.full(4, cfg.std_weight_position * h), np.full(4, cfg.std_weight_velocity * h)]
    return np.diag(std**2)


def kf_predict_step(state: KalmanState, cfg: Optional[KalmanConfig] = None) -> KalmanState:
    cfg = cfg or KalmanConfig()
    mean = _F @ state.mean
    cov = _F @ state.covariance @ _F.T + _process_noise(state.mean, cfg)
    return KalmanState(mean, 0.5 * (cov + cov.T))


def kf_update_step(state: KalmanState, obs: Sequence[float], cfg: Optional[KalmanConfig] = None) -> KalmanState:
    cfg = cfg or KalmanConfig()
    h = _height(state.mean)
    R = np.eye(4) * (cfg.std_weight_measurement * h) ** 2
    P = state.covariance
    S = _H @ P @ _H.T + R
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular innovation covariance; check noise configuration") from exc
    PHt = P @ _H.T
    # K = P H^T S^-1 via two triangular solves
    gain = np.linalg.solve(chol.T, np.linalg.solve(chol, PHt.T)).T
    innovation = np.asarray(obs, dtype=np.float64) - state.mean[:4]
    mean = state.mean + gain @ innovation
    # Joseph form keeps the posterior positive-definite
    IKH = np.eye(8) - gain @ _H
    cov = IKH @ P @ IKH.T + gain @ R @ gain.T
    return KalmanState(mean, 0.5 * (cov + cov.T))


def kf_forecast(state: KalmanState, q: int, cfg: Optional[KalmanConfig] = None,
                origin_frame: int = 0) -> ForecastHorizon:
    # only the means are read out, and the mean recursion is covariance-free
    out = np.empty((q, 4))
    mean = state.mean.copy()
    for i in range(q):
        mean = _F @ mean
        out[i] = mean[:4]
    return ForecastHorizon(floor_size(out), origin_frame)


class MotionPredictor:
    """Per-track motion model fed with detections in frame order.

    ``observe(box, gap)`` records a detection ``gap`` frames after the previous one;
    ``predict(q)`` returns boxes for the next ``q`` frames after the last observation.
    """

    name = "base"

    def __init__(self):
        self.n_observed = 0

    @property
    def ready(self) -> bool:
        return self.n_observed >= 2

    def observe(self, box: Sequence[float], gap: int = 1) -> None:
        raise NotImplementedError

    def predict(self, q: int, context=None, origin_frame: int = 0) -> ForecastHorizon:
        raise NotImplementedError

    def reset(self) -> None:
        self.n_observed = 0


class ConstantVelocityPredictor(MotionPredictor):
    name = "cv"

    def __init__(self):
        super().__init__()
        self._last: Optional[np.ndarray] = None
        self._vel = np.zeros(4)

    def observe(self, box, gap: int = 1) -> None:
        box = np.asarray(box, dtype=np.float64)
        if self._last is not None:
            self._vel = (box - self._last) / max(gap, 1)
        self._last = box
        self.n_observed += 1

    def predict(self, q: int, context=None, origin_frame: int = 0) -> ForecastHorizon:
        if not self.ready:
            raise NotReadyError("constant-velocity predictor needs two observations")
        return cv_predict([self._last - self._vel, self._last], q, origin_frame)

    def reset(self) -> None:
        super().reset()
        self._last = None
        self._vel = np.zeros(4)


class KalmanPredictor(MotionPredictor):
    name = "kalman"

    def __init__(self, cfg: Optional[KalmanConfig] = None):
        super().__init__()
        self.cfg = cfg or KalmanConfig()
        self.state: Optional[KalmanState] = None

    def observe(self, box, gap: int = 1) -> None:
        if self.state is None:
            self.state = kf_init(box, self.cfg)
        else:
            for _ in range(max(gap, 1)):
                self.state = kf_predict_step(self.state, self.cfg)
            self.state = kf_update_step(self.state, box, self.cfg)
        self.n_observed += 1

    def predict(self, q: int, context=None, origin_frame: int = 0) -> ForecastHorizon:
        if not self.ready:
            raise NotReadyError("Kalman predictor needs two observations")
        return kf_forecast(self.state, q, self.cfg, origin_frame)

    def reset(self) -> None:
        super().reset()
        self.state = None
