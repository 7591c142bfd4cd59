"""Navigation through volumetric density fields.

Subpackages cover rigid-body geometry, analytic and learned radiance
fields, volume rendering with pose derivatives, differentially flat
multirotor dynamics, collision-aware trajectory optimization, a
vision-only pose filter, sampling and polynomial baselines, and a
closed-loop simulation harness.
"""

__version__ = "0.1.0"
