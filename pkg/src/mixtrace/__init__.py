"""Same-entity account tracing through mixer transactions with an edge-aware
dynamic graph encoder trained by randomized sliding-window gradients."""

__version__ = "0.1.0"
