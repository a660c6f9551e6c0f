"""Two-level offer-based meta-scheduler spanning several clusters."""

from .model import Endpoint, JobRecord, JobSpec, JobState, ResourceVector
from .scheduler import MetaScheduler, SchedulerConfig, restore

__version__ = "0.1.0"

__all__ = ["Endpoint", "JobRecord", "JobSpec", "JobState", "MetaScheduler", "ResourceVector",
           "SchedulerConfig", "restore"]
