"""Planning for small multirotors that accounts for self-induced airflow near surfaces.

Modules, in pipeline order: ``voxel_map`` (occupancy and distances),
``disturbance`` (surface-induced variance field and calibration),
``reachability`` (ellipsoidal error tubes), ``kinodynamic`` (primitive
search), ``trajectory_opt`` (B-spline refinement), ``planner`` (the chain),
``simulation`` (Monte-Carlo checks and margin comparison) and ``cli``.
"""

__version__ = "0.1.0"
