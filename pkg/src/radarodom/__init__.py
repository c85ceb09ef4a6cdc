"""Radar odometry from consecutive 4D radar point clouds.

Modules: ``engine`` (reverse-mode autodiff), ``geom`` (poses, trajectory
errors), ``pointops`` (sampling, grouping, backbone), ``lcm`` (local
completion), ``cam`` (context-aware association), ``com`` (clip-window
optimization), ``dataio``, ``harness`` and ``cli``.
"""

__version__ = "0.1.0"
