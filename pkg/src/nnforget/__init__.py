"""Forgetting curves and spaced review for dense networks.

Train an MLP, store per-class prototype hidden states, track how the
prototype-similarity recall of withheld classes decays, trigger review
sessions when it falls below a threshold, and fit classic memory-decay
models to the resulting curves.
"""

__version__ = "0.1.0"
