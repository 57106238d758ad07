"""Narrow-lane negotiation sandbox: a two-vehicle corridor simulator, a
Frenet-frame sampling planner with a learned prediction-horizon policy,
and the training plus evaluation harness around them."""

__version__ = "0.1.0"
