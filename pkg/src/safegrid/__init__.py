"""Safe RL with textual constraints on a seeded hazard grid."""

__version__ = "0.1.0"
