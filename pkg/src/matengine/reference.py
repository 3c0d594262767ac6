"""Reference tile GEMM with the engine's exact fp32 rounding sequence."""

from __future__ import annotations

import numpy as np

from .isa import to_bf16


def reference_gemm_tile(c, a, b, dm: bool = False) -> np.ndarray:
    """``C + A @ B`` with bf16 inputs and fp32 accumulation in ascending k.

    Every product and every partial sum is rounded to fp32, the order a
    north-to-south partial-sum chain produces. With ``dm`` the even and odd k
    terms are summed in two separate chains (the even chain seeded with C, the
    odd one with +0.0) and the two chains are added once at the end.
    """
    c = np.asarray(c, dtype=np.float32)
    a = to_bf16(a)
    b = to_bf16(b)
    t_m, t_k = a.shape
    if b.shape[0] != t_k or c.shape != (t_m, b.shape[1]):
        raise ValueError(f"shape mismatch: C{c.shape} A{a.shape} B{b.shape}")
    if dm and t_k % 2:
        raise ValueError("double-multiplier accumulation needs an even k depth")

    def chain(start, ks):
        acc = start.copy()
        for k in ks:
            acc = (acc + (a[:, k : k + 1] * b[k : k + 1, :]).astype(np.float32)).astype(np.float32)
        return acc

    with np.errstate(over="ignore", invalid="ignore"):
        if not dm:
            return chain(c, range(t_k))
        even = chain(c, range(0, t_k, 2))
        odd = chain(np.zeros_like(c), range(1, t_k, 2))
        return (even + odd).astype(np.float32)


def reference_gemm(c, a, b, t_k: int, dm: bool = False) -> np.ndarray:
    """Whole-matrix GEMM accumulated one k-tile at a time, as a lowered trace runs it.

    ``a`` and ``b`` are zero padded to a multiple of ``t_k`` along k.
    """
    c = np.asarray(c, dtype=np.float32)
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    k = a.shape[1]
    k_pad = -(-k // t_k) * t_k
    a_p = np.zeros((a.shape[0], k_pad), np.float32)
    a_p[:, :k] = a
    b_p = np.zeros((k_pad, b.shape[1]), np.float32)
    b_p[:k] = b
    out = c
    for k0 in range(0, k_pad, t_k):
        out = reference_gemm_tile(out, a_p[:, k0 : k0 + t_k], b_p[k0 : k0 + t_k], dm=dm)
    return out
