"""modgate: a desk-scale image content-moderation gateway.

The package covers the full loop: procedural catalog generation, synthetic
logo superimposition with pixel-exact box annotations, binary-signature
similarity search, a pluggable two-stage detector pipeline over durable
queues, budgeted human review, and the metric/tuning kit that closes the
feedback cycle.
"""

__version__ = "0.1.0"
