"""Referring-expression grounding laboratory.

Synthetic scenes and expressions, a simulated annotation pipeline that
separates easy, hard and adversarial instances, small numpy grounding
models with hand-written gradients, and an experiment harness.
"""

__version__ = "0.1.0"
