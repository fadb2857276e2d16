"""Soma-cube assembly engine.

Subpackages cover puzzle geometry, the constraint-masked assembly MDP, an
exhaustive solver oracle, a hierarchical masked DQN, curriculum training,
and ZYZ singularity-safe motion planning; `somacube.cli` wires them into a
command-line tool.
"""

__version__ = "0.1.0"
