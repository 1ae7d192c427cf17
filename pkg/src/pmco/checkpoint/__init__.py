"""Checkpoint/restart runtime: image format, worker processes and the coordinator."""

from .coordinator import Coordinator, Finished, Status, TaskHandle, run_plain
from .image import CheckpointImage, ImageMeta, decode, peek_meta

__all__ = ["CheckpointImage", "ImageMeta", "decode", "peek_meta", "Coordinator", "Finished",
           "Status", "TaskHandle", "run_plain"]
