"""Cross-modal joint-embedding predictive pretraining for point clouds at desk scale."""

__version__ = "0.1.0"
