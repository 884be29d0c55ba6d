"""Two-phase gait-video health-indicator estimation at desk scale.

Phase I trains a spatial-temporal encoder on synthetic 3D pose; phase II
freezes it and regresses BMI, age, height and weight with per-indicator SVRs.
"""

__version__ = "0.1.0"
