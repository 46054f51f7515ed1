"""Core SSM — continuous/discrete state-space neurons and their two forward paths.

A neuron (or a stack of H neurons sharing a leading axis) is described by
continuous parameters (A, B, C, Δ). Bilinear discretization turns them into
(Ā, B̄, C̄); unrolling the recurrence gives a length-L kernel K_i = C̄ Ā^i B̄
that is applied to a spike train by causal convolution. The recurrent path is
kept as the exactness oracle for the convolutional one.

Array conventions: time is the LAST axis for kernels and inputs in this
module. Parameter arrays may carry a leading head axis: A is (n, n) or
(H, n, n), B is (n, 1) or (H, n, 1), C is (1, n) or (H, 1, n).
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import irfft, next_fast_len, rfft
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from s6snn.errors import LengthMismatchError, NonFiniteError, SingularMatrixError

logger = logging.getLogger(__name__)

# Step-size range for Δ
DELTA_MIN = 1e-3
DELTA_MAX = 1e-1

# Below this length the convolution is summed directly instead of via FFT
DIRECT_SUM_MAX_LEN = 64


@dataclass(frozen=True)
class ContinuousSSMParams:
    """Learnable continuous dynamics h' = A h + B x, p = C h (+ D x, D fixed at 0)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    log_delta: np.ndarray | float
    D: float = 0.0

    def __post_init__(self):
        if self.D != 0.0:
            raise ValueError("D is fixed at 0; skip paths are handled by the residual connection")

    @property
    def state_dim(self) -> int:
        return self.A.shape[-1]

    @property
    def delta(self) -> np.ndarray:
        """Step size exp(log_delta) clamped to [DELTA_MIN, DELTA_MAX]."""
        return np.clip(np.exp(np.asarray(self.log_delta, dtype=np.float64)), DELTA_MIN, DELTA_MAX)

    @property
    def delta_is_interior(self) -> np.ndarray:
        """True where the clamp on Δ is inactive (gradient flows to log_delta)."""
        raw = np.exp(np.asarray(self.log_delta, dtype=np.float64))
        return (raw > DELTA_MIN) & (raw < DELTA_MAX)


@dataclass(frozen=True)
class DiscreteSSMParams:
    """(Ā, B̄, C̄) from bilinear discretization.

    ``lu_factors`` and ``delta`` are kept from the forward solve so the
    backward pass can reuse the factorization.
    """

    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    delta: np.ndarray = field(default=None, repr=False, compare=False)
    lu_factors: tuple = field(default=(), repr=False, compare=False)

    @property
    def state_dim(self) -> int:
        return self.A_bar.shape[-1]


@dataclass(frozen=True)
class Kernel:
    """Length-L impulse response. ``basis`` caches v_i = Ā^i B̄, shape (H, L, n)."""

    weights: np.ndarray
    length: int
    basis: np.ndarray = field(default=None, repr=False, compare=False)


def hippo_legs(n: int) -> np.ndarray:
    """HiPPO-LegS (scaled Legendre) state matrix.

    M[m][k] = -sqrt(2m+1)·sqrt(2k+1) for m > k, -(m+1) on the diagonal, 0 above it.
    """
    if n < 1:
        raise ValueError(f"state dimension must be >= 1, got {n}")
    idx = np.arange(n, dtype=np.float64)
    root = np.sqrt(2.0 * idx + 1.0)
    return -np.tril(np.outer(root, root), k=-1) - np.diag(idx + 1.0)


def init_continuous(
    n: int,
    heads: int,
    rng: np.random.Generator,
) -> ContinuousSSMParams:
    """Default initialization for ``heads`` neurons with state dimension ``n``.

    A = HiPPO-LegS, B = ones/sqrt(n), C ~ N(0, 1/n), log Δ log-uniform on the Δ range.
    """
    A = np.broadcast_to(hippo_legs(n), (heads, n, n)).copy()
    B = np.full((heads, n, 1), 1.0 / np.sqrt(n))
    C = rng.normal(0.0, 1.0 / np.sqrt(n), size=(heads, 1, n))
    log_delta = rng.uniform(np.log(DELTA_MIN), np.log(DELTA_MAX), size=heads)
    return ContinuousSSMParams(A=A, B=B, C=C, log_delta=log_delta)


def _as_heads(arr: np.ndarray, tail: tuple[int, ...]) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64).reshape((-1,) + tail)


def lu_checked(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial-pivot LU of M; raises SingularMatrixError instead of warning."""
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            lu, piv = lu_factor(M, check_finite=True)
        except (LinAlgWarning, ValueError, np.linalg.LinAlgError) as exc:
            raise SingularMatrixError(f"(I - Δ/2·A) is not invertible: {exc}") from exc
    if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0.0):
        raise SingularMatrixError("(I - Δ/2·A) is numerically singular")
    return lu, piv


def discretize(p: ContinuousSSMParams) -> DiscreteSSMParams:
    """Bilinear (Tustin) transform.

    Ā = (I - Δ/2·A)^-1 (I + Δ/2·A), B̄ = (I - Δ/2·A)^-1 Δ B, C̄ = C.
    Uses one LU factorization per head and two solves; no explicit inverse.
    """
    n = p.state_dim
    lead = p.A.shape[:-2]
    A = _as_heads(p.A, (n, n))
    B = _as_heads(p.B, (n, 1))
    heads = A.shape[0]
    delta = np.broadcast_to(p.delta, lead).reshape(-1) if lead else np.atleast_1d(p.delta)
    if delta.shape[0] != heads:
        delta = np.broadcast_to(delta, (heads,))

    eye = np.eye(n)
    A_bar = np.empty_like(A)
    B_bar = np.empty_like(B)
    factors = []
    for h in range(heads):
        half = 0.5 * delta[h] * A[h]
        lu = lu_checked(eye - half)
        A_bar[h] = lu_solve(lu, eye + half)
        B_bar[h] = lu_solve(lu, delta[h] * B[h])
        factors.append(lu)

    C_bar = np.array(p.C, dtype=np.float64, copy=True)
    return DiscreteSSMParams(
        A_bar=A_bar.reshape(lead + (n, n)),
        B_bar=B_bar.reshape(lead + (n, 1)),
        C_bar=C_bar,
        delta=np.array(delta, copy=True),
        lu_factors=tuple(factors),
    )


def spectral_radius(A_bar: np.ndarray) -> float:
    A = _as_heads(A_bar, A_bar.shape[-2:])
    with np.errstate(all="ignore"):
        finite = [a for a in A if np.all(np.isfinite(a))]
        if not finite:
            return float("inf")
        return float(max(np.max(np.abs(np.linalg.eigvals(a))) for a in finite))


def build_kernel(d: DiscreteSSMParams, L: int) -> Kernel:
    """Unroll K_i = C̄ Ā^i B̄ for i = 0..L-1 by iterating v <- Ā v from v = B̄.

    Cost O(n²L) per head. The basis v_0..v_{L-1} is cached on the kernel for
    the adjoint pass.
    """
    if L < 1:
        raise ValueError(f"kernel length must be >= 1, got {L}")
    n = d.state_dim
    lead = d.A_bar.shape[:-2]
    A = _as_heads(d.A_bar, (n, n))
    v = _as_heads(d.B_bar, (n, 1))[..., 0]
    C = _as_heads(d.C_bar, (1, n))[:, 0, :]

    basis = np.empty((A.shape[0], L, n))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(L):
            basis[:, i] = v
            v = np.matmul(A, v[..., None])[..., 0]

    if not np.all(np.isfinite(basis)):
        rho = spectral_radius(d.A_bar)
        raise NonFiniteError(
            f"kernel power iteration overflowed at L={L}; spectral radius of Ā is {rho:.4f} "
            "(values above 1 make Ā^i grow without bound)"
        )

    weights = np.einsum("hn,hln->hl", C, basis)
    return Kernel(weights=weights.reshape(lead + (L,)), length=L, basis=basis)


def forward_recurrent(d: DiscreteSSMParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Step the discrete recurrence h[t] = Ā h[t-1] + B̄ x[t], y[t] = C̄ h[t] from h = 0.

    Args:
        d: single-head discrete parameters.
        x: input spikes, shape (L,) or (batch, L).

    Returns:
        (states of shape x.shape + (n,), pre-σ outputs of shape x.shape)
    """
    x = np.asarray(x, dtype=np.float64)
    n = d.state_dim
    A = np.asarray(d.A_bar, dtype=np.float64).reshape(n, n)
    B = np.asarray(d.B_bar, dtype=np.float64).reshape(n)
    C = np.asarray(d.C_bar, dtype=np.float64).reshape(n)

    states = np.empty(x.shape + (n,))
    h = np.zeros(x.shape[:-1] + (n,))
    for t in range(x.shape[-1]):
        h = h @ A.T + x[..., t, None] * B
        states[..., t, :] = h
    return states, states @ C


def causal_convolve(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y[..., i] = Σ_{k<=i} w[..., k] x[..., i-k] (non-circular), in float64."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if L < DIRECT_SUM_MAX_LEN:
        y = np.zeros(np.broadcast_shapes(w.shape, x.shape))
        for k in range(L):
            y[..., k:] += w[..., k : k + 1] * x[..., : L - k]
        return y
    nfft = next_fast_len(2 * L - 1, real=True)
    return irfft(rfft(w, nfft) * rfft(x, nfft), nfft)[..., :L]


def causal_correlate(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    """c[..., k] = Σ_t g[..., t] x[..., t-k]: the gradient of causal_convolve w.r.t. w."""
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    if L < DIRECT_SUM_MAX_LEN:
        shape = np.broadcast_shapes(g.shape, x.shape)
        c = np.empty(shape)
        for k in range(L):
            c[..., k] = np.sum(g[..., k:] * x[..., : L - k], axis=-1)
        return c
    nfft = next_fast_len(2 * L - 1, real=True)
    return irfft(rfft(g, nfft) * np.conj(rfft(x, nfft)), nfft)[..., :L]


def anticausal_convolve(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d[..., i] = Σ_{t>=i} w[..., t-i] g[..., t]: the gradient of causal_convolve w.r.t. x."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    L = g.shape[-1]
    if L < DIRECT_SUM_MAX_LEN:
        d = np.zeros(np.broadcast_shapes(w.shape, g.shape))
        for k in range(L):
            d[..., : L - k] += w[..., k : k + 1] * g[..., k:]
        return d
    nfft = next_fast_len(2 * L - 1, real=True)
    return irfft(rfft(g, nfft) * np.conj(rfft(w, nfft)), nfft)[..., :L]


def forward_conv(k: Kernel, x: np.ndarray) -> np.ndarray:
    """Pre-σ output of the convolutional path: y = K * x along the last axis."""
    x = np.asarray(x)
    if x.shape[-1] != k.length:
        raise LengthMismatchError(f"kernel length {k.length} != sequence length {x.shape[-1]}")
    return causal_convolve(k.weights, x)


def sigma_clip(y: np.ndarray) -> np.ndarray:
    """σ: clamp to [0, 1]."""
    return np.clip(y, 0.0, 1.0)


def sigma_logistic(y: np.ndarray) -> np.ndarray:
    """Smooth alternative to the clamp, selected with model.sigma = "logistic"."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(y, dtype=np.float64)))
