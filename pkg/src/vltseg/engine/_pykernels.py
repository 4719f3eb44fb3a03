"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``.

Same accumulation order as the compiled path, so both agree bitwise.
"""

import numpy as np


def matmul3(a, b):
    """Batched product of (n, m, k) and (n, k, p) arrays."""
    n, m, kk = a.shape
    if b.shape[0] != n or b.shape[1] != kk:
        raise ValueError("matmul3: incompatible shapes")
    out = np.zeros((n, m, b.shape[2]), dtype=np.float64)
    for k in range(kk):
        # outer product for a single k; the add is a separate rounding step
        out += a[:, :, k, None] * b[:, None, k, :]
    return out
