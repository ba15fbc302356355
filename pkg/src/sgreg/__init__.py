"""Structure-guided image registration on synthetic 2D data.

Learns an image representation network jointly with a transformation
predictor, supports per-pair iterative refinement of the predicted
transformation, and ships a synthetic benchmark where intensity-optimal
and structure-optimal alignment deliberately disagree.
"""

__version__ = "0.1.0"
