"""desktamp: a deterministic tabletop manipulation pipeline.

Synthetic perception over a 2.5-D extruded-polygon world, instruction
grounding to predicate goals, skeleton-enumeration + particle-optimization
task-and-motion planning, RRT-Connect motion planning, and open-loop
impedance-controlled execution with seeded trial evaluation.
"""

__version__ = "0.1.0"

from . import errors, execution, geom, ground, motion, percept, plan, scene

__all__ = ["errors", "execution", "geom", "ground", "motion", "percept", "plan", "scene", "__version__"]
