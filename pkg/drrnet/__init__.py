"""DRRNet - camouflaged object detection with macro-micro fusion and dual reverse refinement."""

__version__ = "0.1.0"
