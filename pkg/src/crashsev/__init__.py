"""Crash-severity modeling pipeline.

Curates multi-level crash records into vehicle samples, searches a
feature-selection x learner configuration space under repeated stratified
cross-validation with bias-corrected winner estimation, aggregates feature
signatures by cross-subset stability, trains a final model on the pooled
subsets, and explains it with exact additive attributions.
"""

__version__ = "0.1.0"
