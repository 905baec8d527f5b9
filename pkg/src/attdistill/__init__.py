"""Dataset distillation by matching expert training trajectories.

The student unroll length used for matching is either fixed (``ftl``) or
picked per iteration as the step closest to the expert target (``att``).
"""

from .nn import Architecture, LabeledBatch
from .buffer import TrajectoryBuffer, load_buffer, save_buffer, train_expert
from .metagrad import SyntheticDataset, match_loss, meta_gradients, unroll
from .engine import ATT, FTL, MatchConfig, distill, init_synth

__version__ = "0.1.0"
