"""Multi-object tracking with a recurrent box forecaster in the association loop."""
from .assignment import AssignmentResult, solve
from .association import Tracker, TrackState, outputs_to_frames, run_sequence
from .core import BoundingBox, FrameObservations, iou
from .forecaster import ForecasterConfig, ForecasterParams, forecast, train
from .metrics import ForecastReport, TrackingReport, clear_mot, evaluate_forecasts, idf1
from .io import RunConfig, TrackerConfig, load_config, read_mot, write_mot
from .motion import ConstantVelocityPredictor, ForecastHorizon, KalmanPredictor, cv_predict
from .simdata import generate, make_suite, standard_suites

__version__ = "0.1.0"

__all__ = [
    "AssignmentResult", "BoundingBox", "ConstantVelocityPredictor", "ForecastHorizon", "ForecastReport",
    "ForecasterConfig", "ForecasterParams", "FrameObservations", "KalmanPredictor", "TrackState",
    "Tracker", "TrackingReport", "clear_mot", "cv_predict", "evaluate_forecasts", "forecast", "idf1",
    "iou", "run_sequence", "solve", "train", "outputs_to_frames", "RunConfig", "TrackerConfig", "load_config",
    "read_mot", "write_mot", "generate", "make_suite", "standard_suites",
]
