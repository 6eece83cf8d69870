"""Action-guided distillation of a toy VLA policy into a routed student."""

__version__ = "0.1.0"
