"""Prompt-tuned interpretation of heterogeneous BEV features.

A single interpreter network plus per-neighbor learnable prompts translates
intermediate perception features from frozen, mutually heterogeneous encoders
into an ego agent's semantic space. Training happens in two phases: joint
base training with known neighbor types, then prompt-only adaptation when a
new neighbor type joins.
"""

__version__ = "0.1.0"
