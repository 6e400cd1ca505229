"""Backdoor-client detection for federated averaging from model output
representations and local outlier factors."""

from .detector import DetectorConfig, calibrate_epsilon_d, detect, detect_iterative, detect_refined
from .experiment import ExperimentConfig, run_experiment, timing_scan
from .fl import ClientState, RoundPlan, fedavg, run_rounds
from .metrics import accuracy, attack_success_rate, detection_metrics
from .outlier import lof_all
from .representation import client_distance_matrix, extract_rdm, pearson_distance

__all__ = [
    "ClientState", "DetectorConfig", "ExperimentConfig", "RoundPlan",
    "accuracy", "attack_success_rate", "calibrate_epsilon_d", "client_distance_matrix",
    "detect", "detect_iterative", "detect_refined", "detection_metrics", "extract_rdm",
    "fedavg", "lof_all", "pearson_distance", "run_experiment", "run_rounds", "timing_scan",
]
