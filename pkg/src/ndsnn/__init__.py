"""Dynamic sparse training for spiking neural networks.

Leaky integrate-and-fire layers trained with surrogate-gradient BPTT,
with masks that drop small weights and regrow high-gradient ones while
the overall density shrinks on a cubic schedule.
"""

from .errors import NdsnnError
from .schedule import NDSNN, RIGL, SET, GrowthPolicy
from .snn import LifParams, SpikingNetwork, bptt_backward, forward_pass
from .sparse import MaskedLayer, erk_allocate
from .trainer import train

__all__ = [
    "NDSNN",
    "RIGL",
    "SET",
    "GrowthPolicy",
    "LifParams",
    "MaskedLayer",
    "NdsnnError",
    "SpikingNetwork",
    "bptt_backward",
    "erk_allocate",
    "forward_pass",
    "train",
]

__version__ = "0.1.0"
