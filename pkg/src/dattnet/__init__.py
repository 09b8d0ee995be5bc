"""Speaker verification with dual (self + mutual) attention pooling.

Subpackages are imported lazily by the CLI so that environment knobs such
as DATT_DETERMINISTIC can pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
