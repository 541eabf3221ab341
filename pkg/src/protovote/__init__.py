"""Few-shot 3D point-cloud object detection on a synthetic benchmark.

Prototype-bank voting detector: PointNet++-style backbone, a momentum
memory bank of class-agnostic geometric prototypes guiding seed features
through cross-attention, episodic class prototypes refining proposals,
and an AP evaluator, all on a from-scratch float64 autodiff core.
"""

__version__ = "0.1.0"
