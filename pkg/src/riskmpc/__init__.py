"""Risk-aware adaptive tube MPC.

A tube MPC whose constraint tightening comes from two online loops: a
Gaussian-process-guided search for critical uncertainty scenarios that sizes
the learned prediction-error set, and a stochastic-approximation regulator
that tunes a scalar safety margin until the empirical violation rate matches
a target.
"""

__version__ = "0.1.0"
