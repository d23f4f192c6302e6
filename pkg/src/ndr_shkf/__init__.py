"""N-Deep Recurrent Sage-Husa Kalman filtering.

A recurrent policy predicts the per-step blending coefficients of a
Sage-Husa noise-covariance estimator running inside an extended Kalman
filter, and is trained end to end through the filter recursion.
"""

__version__ = "0.1.0"
