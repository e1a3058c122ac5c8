# ALIVE Package
# Self-play reasoning loop: one policy constructs, solves and reviews its own tasks
# Toy (tabular numpy) and remote (chat-completion) execution share one engine

__version__ = "0.1.0"
__description__ = "Self-play construct / solve / review reinforcement loop with feedback-conditional training"

from .config import Config
from .datamodel import LoopConfig, count_batch_items, validate_config
from .engine import AliveEngine, RunMode, StepPlan, build_remote_engine, build_toy_engine
from .reporting import RunReporter

__all__ = [
    "AliveEngine",
    "Config",
    "LoopConfig",
    "RunMode",
    "RunReporter",
    "StepPlan",
    "build_remote_engine",
    "build_toy_engine",
    "count_batch_items",
    "validate_config",
]
