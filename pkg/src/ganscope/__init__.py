"""ganscope: mode-collapse diagnostics for toy image generators.

Measures what a generator does not draw, at two levels: per-class pixel
statistics with the Frechet segmentation distance over a procedural scene
domain, and instance-level reconstruction via layer-wise generator inversion.
"""

__version__ = "0.1.0"
