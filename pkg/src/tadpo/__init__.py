"""Teacher action distillation on top of PPO, with a desk-scale 2D driving testbed."""

__version__ = "0.1.0"
