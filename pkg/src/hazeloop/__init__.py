"""Closed-loop image dehazing with task feedback and text-instruction guidance.

Pipeline: synthesize haze analytically, restore with a small transformer
encoder-decoder, then adapt the restoration at inference time using
downstream-task feedback (TFGA) and instruction semantics (IGM) without
retraining the base network.
"""

__version__ = "0.1.0"
