"""Internal DLA driven by critical branching random walks on Z^d."""

__version__ = "0.1.0"

from .lattice import FiniteDomain, ball_sites, exterior_boundary, volume_radius  # noqa: E402
from .offspring import OffspringLaw, make_law, sample_offspring  # noqa: E402
from .stacks import InstructionStacks, fresh_stream, instruction_at  # noqa: E402
from .engine import Bidla, ParticleConfig, bidla_step, jump_chain, stabilize, topple  # noqa: E402

__all__ = [
    "Bidla",
    "FiniteDomain",
    "InstructionStacks",
    "OffspringLaw",
    "ParticleConfig",
    "ball_sites",
    "bidla_step",
    "exterior_boundary",
    "fresh_stream",
    "instruction_at",
    "jump_chain",
    "make_law",
    "sample_offspring",
    "stabilize",
    "topple",
    "volume_radius",
]
