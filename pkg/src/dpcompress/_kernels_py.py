"""numpy implementations of the per-example gradient kernels.

Same signatures and in-place semantics as the compiled ``_kernels`` module.
"""

import numpy as np


def _outer(A, D, M, masked):
    G = A[:, :, None] * D[:, None, :]
    if masked:
        G *= M
    return G


def sqnorm_outer(A, D, M, masked, out):
    G = _outer(A, D, M, masked)
    out += np.einsum("sij,sij->s", G, G)


def sqnorm_rows(D, out):
    out += np.einsum("sj,sj->s", D, D)


def accum_outer(A, D, M, masked, c, out):
    G = _outer(A, D, M, masked)
    G *= c[:, None, None]
    # axis-0 reduction of a C-contiguous array adds slices in index order
    out += G.sum(axis=0)


def accum_rows(D, c, out):
    out += (D * c[:, None]).sum(axis=0)


def clip_rows(G, clip_norm, norms):
    norms[:] = np.sqrt(np.einsum("sj,sj->s", G, G))
    over = norms > clip_norm
    if np.any(over):
        G[over] *= (clip_norm / norms[over])[:, None]
