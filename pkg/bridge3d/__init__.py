"""Desk-scale back-view knowledge injection for two-stage voxel generation.

A prompt-conditioned flow-matching bridge turns front views into back views;
its intermediate hidden states condition a two-stage voxel generator through a
zero-initialized cross-attention branch.
"""
import os

# BLAS thread count must be pinned before numpy loads; K3_THREADS=1 keeps
# matmul reductions in a fixed order.
_threads = os.getenv("K3_THREADS", "1").strip() or "1"
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.3.0"
