"""Verifiable rewards, GRPO losses and 3D box metrics for perception RL."""

from .geometry import Box9DoF, RigidTransform, iou3d, transform_box
from .grpo import GRPOConfig, RolloutGroup, chunked_loss, group_advantages, grpo_loss
from .parsing import TaskKind, format_reward, parse_response
from .rewards import RewardBreakdown, detection_reward, grounding_reward, reasoning_reward

__version__ = "0.1.0"
