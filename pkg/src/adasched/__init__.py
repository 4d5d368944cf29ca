"""RL-assisted mapping and fusion scheduler for periodic DAG pipelines on CPU/GPU platforms."""

from .qlearn import QNetwork, load_checkpoint, save_checkpoint
from .rollout import SchedulePlan, admit, compare, edf_baseline, infer_plan
from .safesched import ControllerConfig, deploy, replay
from .simenv import HyperSnapshot, advance, apply_mapping, observe_state
from .taskgraph import DagInstance, DagSpec, OracleRequest, TaskNode, expand_hyperperiod
from .trainer import TrainConfig, Trainer, train
from .workload import build_benchmark_suite, enumerate_requests, synthesize_fusion_profile

__version__ = "0.1.0"

__all__ = [
    "ControllerConfig", "DagInstance", "DagSpec", "HyperSnapshot", "OracleRequest", "QNetwork",
    "SchedulePlan", "TaskNode", "TrainConfig", "Trainer", "admit", "advance", "apply_mapping",
    "build_benchmark_suite", "compare", "deploy", "edf_baseline", "enumerate_requests",
    "expand_hyperperiod", "infer_plan", "load_checkpoint", "observe_state", "replay",
    "save_checkpoint", "synthesize_fusion_profile", "train",
]
