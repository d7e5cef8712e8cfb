"""Two-robot scene-graph matching and egocentric pose estimation.

The pipeline has two levels: graph-attention correspondence identification
with non-overlap detection, and a position-aware cross-attention network
that regresses the teammate's relative pose once views are known to
overlap. A compact binary packet format carries one robot's scene graph to
the other. Everything runs on a small float64 autodiff substrate; hot
kernels have numba fast paths (see egomatch.kernels).
"""

__version__ = "0.1.0"
