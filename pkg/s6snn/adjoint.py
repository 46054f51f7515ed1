"""Adjoints for the sampler, the kernel path and the bilinear discretization.

The state equation is linear, so the gradient of the convolutional path is
computed exactly by one reverse linear recurrence over the kernel length
instead of back-propagating through an unrolled time graph. Extra memory is
O(n·L) per head.
"""

import logging

import numpy as np
from scipy.linalg import lu_solve

from s6snn.errors import NonFiniteError, SingularMatrixError
from s6snn.ssm import (
    ContinuousSSMParams,
    DiscreteSSMParams,
    Kernel,
    anticausal_convolve,
    causal_correlate,
)

logger = logging.getLogger(__name__)


def surrogate_spike_grad(upstream: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Gradient of the sampler through its expectation E[S] = p.

    Passes ``upstream`` through where p is strictly inside (0, 1) and zeroes it
    where the preceding σ saturated.
    """
    p = np.asarray(p)
    return np.where((p > 0.0) & (p < 1.0), upstream, 0.0)


def kernel_grad(g: np.ndarray, x: np.ndarray, heads: int) -> np.ndarray:
    """dLoss/dK from upstream g and inputs x, both (batch, N, L).

    Sums over the batch, and over neurons when the layer shares one kernel.
    """
    dK = causal_correlate(g, x).sum(axis=0)
    if heads == 1 and dK.shape[0] != 1:
        dK = dK.sum(axis=0, keepdims=True)
    return dK


def backward_conv(
    k: Kernel,
    d: DiscreteSSMParams,
    x: np.ndarray,
    g: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of y = build_kernel(d) * x.

    Args:
        k: kernel from the forward pass (its cached basis v_i = Ā^i B̄ is reused).
        d: discrete parameters with a head axis, Ā (H, n, n).
        x: forward inputs, (batch, N, L) with N == H or H == 1.
        g: upstream gradient dLoss/dy, same shape as x.

    Returns:
        (grad_x, grad_A_bar, grad_B_bar, grad_C_bar) shaped like x, Ā, B̄, C̄.
    """
    n = d.state_dim
    A = np.asarray(d.A_bar).reshape(-1, n, n)
    C = np.asarray(d.C_bar).reshape(-1, n)
    heads, L = A.shape[0], k.length

    grad_x = anticausal_convolve(k.weights.reshape(heads, L), g)
    dK = kernel_grad(g, x, heads)

    # λ_{L-1} = C̄ᵀ dK[L-1];  λ_t = Āᵀ λ_{t+1} + C̄ᵀ dK[t]
    lam = np.empty((heads, L, n))
    At = np.swapaxes(A, -1, -2)
    state = C * dK[:, L - 1, None]
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(L - 1, -1, -1):
            lam[:, t] = state
            if t:
                state = np.matmul(At, state[..., None])[..., 0] + C * dK[:, t - 1, None]
    if not np.all(np.isfinite(lam)):
        raise NonFiniteError(f"adjoint recurrence overflowed over L={L}")

    grad_A_bar = np.einsum("htn,htm->hnm", lam[:, 1:], k.basis[:, :-1])
    grad_B_bar = lam[:, 0, :, None]
    grad_C_bar = np.einsum("ht,htn->hn", dK, k.basis)[:, None, :]
    return (
        grad_x,
        grad_A_bar.reshape(d.A_bar.shape),
        grad_B_bar.reshape(d.B_bar.shape),
        grad_C_bar.reshape(np.shape(d.C_bar)),
    )


def backward_discretize(
    p: ContinuousSSMParams,
    d: DiscreteSSMParams,
    grad_A_bar: np.ndarray,
    grad_B_bar: np.ndarray,
    grad_C_bar: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Chain rule through the bilinear map, reusing the forward LU factors.

    With M = I - Δ/2·A and P = I + Δ/2·A: Ā = M⁻¹P and B̄ = M⁻¹ΔB, so
    gP = M⁻ᵀ gĀ, gY = M⁻ᵀ gB̄ and gM = -(gP Āᵀ + gY B̄ᵀ).

    Returns:
        (grad_A, grad_B, grad_C, grad_log_delta); log_delta gets no gradient
        where the Δ clamp is active.
    """
    if not d.lu_factors:
        raise SingularMatrixError("discrete parameters carry no LU factors; call discretize() first")
    n = p.state_dim
    A = np.asarray(p.A, dtype=np.float64).reshape(-1, n, n)
    B = np.asarray(p.B, dtype=np.float64).reshape(-1, n, 1)
    A_bar = np.asarray(d.A_bar).reshape(-1, n, n)
    B_bar = np.asarray(d.B_bar).reshape(-1, n, 1)
    gAb = np.asarray(grad_A_bar).reshape(-1, n, n)
    gBb = np.asarray(grad_B_bar).reshape(-1, n, 1)
    heads = A.shape[0]

    grad_A = np.empty_like(A)
    grad_B = np.empty_like(B)
    grad_delta = np.empty(heads)
    for h in range(heads):
        lu = d.lu_factors[h]
        delta = d.delta[h]
        gP = lu_solve(lu, gAb[h], trans=1)
        gY = lu_solve(lu, gBb[h], trans=1)
        gM = -(gP @ A_bar[h].T) - (gY @ B_bar[h].T)
        grad_A[h] = 0.5 * delta * (gP - gM)
        grad_B[h] = delta * gY
        grad_delta[h] = np.sum(gY * B[h]) + 0.5 * np.sum((gP - gM) * A[h])

    interior = np.broadcast_to(p.delta_is_interior, np.shape(p.log_delta)).reshape(-1)
    grad_log_delta = np.where(interior, grad_delta * d.delta, 0.0)
    return (
        grad_A.reshape(np.shape(p.A)),
        grad_B.reshape(np.shape(p.B)),
        np.array(grad_C_bar, dtype=np.float64).reshape(np.shape(p.C)),
        grad_log_delta.reshape(np.shape(p.log_delta)),
    )
