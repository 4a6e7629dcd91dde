"""bagbid: constrained auction simulation, hindsight expert bidding, and
an expert-token bag-reward decision transformer for offline auto-bidding.
"""

from bagbid._kernels import BACKEND as KERNEL_BACKEND

__all__ = ["KERNEL_BACKEND"]
__version__ = "0.1.0"
