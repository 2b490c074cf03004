"""Direction-aware spatial context shadow detection, trainable on a CPU.

Submodules are imported explicitly (``from dscnet import tensor, network``)
so the command-line front end can pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
