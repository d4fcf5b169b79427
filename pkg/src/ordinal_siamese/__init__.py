"""Weighted Siamese triplet networks for ordinal progression levels on 3D volumes."""

from .loss import ALL_LEVELS, ProgressionLevel, alpha_of, unweighted_loss, weighted_loss

__version__ = "0.1.0"

__all__ = ["ALL_LEVELS", "ProgressionLevel", "alpha_of", "unweighted_loss", "weighted_loss"]
