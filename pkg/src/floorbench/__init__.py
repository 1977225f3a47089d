"""Egocentric BEV floormap benchmark engine: synthesis, curation, baselines and masked scoring."""

from .grid import BevGrid, eval_region, jaccard_distance

__all__ = ["BevGrid", "eval_region", "jaccard_distance"]
__version__ = "0.1.0"
