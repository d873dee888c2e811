"""Disentangled gait representations: per-frame appearance/canonical/pose
feature splitting, temporal aggregation into gait signatures, fused cosine
matching, a synthetic factorized-data generator, and a biometric evaluation
harness."""

__version__ = "0.1.0"
