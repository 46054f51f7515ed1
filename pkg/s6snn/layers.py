"""Spiking layers — SpikeSampler, neuron mixer, encoder/decoder, S6 block and LIF baseline.

Each public operation works on plain numpy arrays. The same computations are
exposed as ``*_on_tape`` building blocks that S6Network chains on a recording
Tape, so the training path and the standalone operations share one
implementation.

Block pipeline:
    S6 conv per neuron -> σ -> SpikeSampler -> mixer (gelu) -> + block input
    -> normalization -> σ -> SpikeSampler (omitted in the final block)
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from s6snn.adjoint import backward_conv, backward_discretize, surrogate_spike_grad
from s6snn.errors import NonFiniteError, ProbabilityOutOfRangeError, ShapeMismatchError
from s6snn.ssm import ContinuousSSMParams, build_kernel, discretize, forward_conv
from s6snn.tape import (
    Tape,
    Variable,
    add,
    batch_norm,
    clip_unit,
    gelu,
    layer_norm,
    last_step,
    logistic,
    matmul,
    mean_time,
    straight_through,
)

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class ParamSharing(str, Enum):
    PER_LAYER = "per_layer"
    PER_NEURON = "per_neuron"


class NormKind(str, Enum):
    BATCH = "batch"
    LAYER = "layer"


class Mode(str, Enum):
    TRAIN_SAMPLE = "train_sample"
    EVAL_SAMPLE = "eval_sample"
    EVAL_EXPECTED = "eval_expected"

    @property
    def sampled(self) -> bool:
        return self is not Mode.EVAL_EXPECTED


class Readout(str, Enum):
    """Which steps of the final block feed the decoder."""

    POOL = "pool"
    PER_STEP = "per_step"
    LAST = "last"


@dataclass(frozen=True)
class S6LayerConfig:
    num_neurons: int
    state_dim: int
    param_sharing: ParamSharing = ParamSharing.PER_LAYER
    norm: NormKind = NormKind.BATCH
    residual: bool = True
    sigma: str = "clip"

    def __post_init__(self):
        if self.num_neurons < 1 or self.state_dim < 1:
            raise ValueError(
                f"num_neurons and state_dim must be >= 1, got N={self.num_neurons}, n={self.state_dim}"
            )
        if self.sigma not in ("clip", "logistic"):
            raise ValueError(f"sigma must be 'clip' or 'logistic', got {self.sigma!r}")
        object.__setattr__(self, "param_sharing", ParamSharing(self.param_sharing))
        object.__setattr__(self, "norm", NormKind(self.norm))

    @property
    def heads(self) -> int:
        """Number of distinct (A, B, C, Δ) sets in the layer."""
        return 1 if self.param_sharing is ParamSharing.PER_LAYER else self.num_neurons


@dataclass(frozen=True)
class MixerWeights:
    W_fc: np.ndarray


@dataclass(frozen=True)
class EncoderWeights:
    W_e: np.ndarray
    b_e: np.ndarray | None = None


@dataclass(frozen=True)
class DecoderWeights:
    W_d: np.ndarray
    b_d: np.ndarray | None = None


@dataclass(frozen=True)
class S6BlockParams:
    ssm: ContinuousSSMParams
    mixer: MixerWeights
    norm_gamma: np.ndarray
    norm_beta: np.ndarray


@dataclass(frozen=True)
class LIFParams:
    tau_m: float = 20.0
    u_rest: float = 0.0
    R: float = 1.0
    v_th: float = 1.0
    dt: float = 1.0

    def __post_init__(self):
        if self.tau_m <= 0 or self.dt <= 0:
            raise ValueError(f"tau_m and dt must be positive, got tau_m={self.tau_m}, dt={self.dt}")
        if self.dt > self.tau_m:
            raise ValueError(f"forward Euler needs dt <= tau_m, got dt={self.dt}, tau_m={self.tau_m}")


# --- SpikeSampler ---


def _philox_key(seed: int, site: int, sample_id: int) -> np.ndarray:
    # hashed, so no (site, id) pair aliases another
    return np.random.SeedSequence([int(seed) & _MASK64, int(site), int(sample_id)]).generate_state(2, dtype=np.uint64)


def spike_sample(
    p: np.ndarray,
    rng_seed: int,
    sample_ids: np.ndarray | None = None,
    site: int = 0,
) -> np.ndarray:
    """Draw Bernoulli spikes: z ~ U(0, 1], S = 1 iff z <= p.

    Every sequence along axis 0 gets its own counter-based Philox stream keyed
    by (rng_seed, site, sample id), so a sequence's spikes do not depend on
    which batch it lands in or where.

    Args:
        p: probabilities, shape (batch, ...).
        rng_seed: root seed of the draw.
        sample_ids: stable id per sequence; defaults to the batch position.
        site: index of the sampler layer inside the network.

    Returns:
        float array of 0.0/1.0 with the shape of ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all((p >= 0.0) & (p <= 1.0)):
        bad = p[~((p >= 0.0) & (p <= 1.0))]
        raise ProbabilityOutOfRangeError(
            f"{bad.size} spike probabilities outside [0, 1] (e.g. {bad.flat[0]!r})"
        )
    if p.ndim == 0:
        p = p[None]
        squeeze = True
    else:
        squeeze = False
    ids = np.arange(p.shape[0]) if sample_ids is None else np.asarray(sample_ids)
    if ids.shape != (p.shape[0],):
        raise ShapeMismatchError(f"need one sample id per sequence: {ids.shape} vs batch {p.shape[0]}")

    spikes = np.empty(p.shape)
    for b, sample_id in enumerate(ids):
        gen = np.random.Generator(np.random.Philox(key=_philox_key(rng_seed, site, sample_id)))
        z = 1.0 - gen.random(p.shape[1:])
        spikes[b] = z <= p[b]
    return spikes[0] if squeeze else spikes


@dataclass(frozen=True)
class SamplerContext:
    """How SpikeSampler layers behave during one forward pass."""

    mode: Mode
    seed: int = 0
    sample_ids: np.ndarray | None = None

    def sample_on_tape(self, tape: Tape, p: Variable, site: int) -> Variable:
        if self.mode.sampled:
            value = spike_sample(p.value, self.seed, self.sample_ids, site)
        else:
            value = p.value
        return straight_through(tape, p, value, surrogate_spike_grad)


# --- shared building blocks ---


def sigma_on_tape(tape: Tape, y: Variable, kind: str) -> Variable:
    return logistic(tape, y) if kind == "logistic" else clip_unit(tape, y)


def norm_on_tape(
    tape: Tape,
    x: Variable,
    kind: NormKind,
    gamma: Variable,
    beta: Variable,
    running: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Variable, tuple[np.ndarray, np.ndarray] | None]:
    if kind is NormKind.LAYER:
        return layer_norm(tape, x, gamma, beta), None
    out, stats = batch_norm(tape, x, gamma, beta, running=running)
    return out, (None if running is not None else stats)


def guard_finite(name: str, v: Variable) -> Variable:
    if not np.all(np.isfinite(v.value)):
        raise NonFiniteError(f"non-finite activations in {name}", layer=name)
    return v


def ssm_conv_on_tape(
    tape: Tape,
    s: Variable,
    A: Variable,
    B: Variable,
    C: Variable,
    log_delta: Variable,
) -> Variable:
    """S6 convolution of every neuron's input channel: (batch, L, N) -> (batch, L, N) pre-σ.

    The kernel is rebuilt from the continuous parameters on every call; the
    backward pass is the exact adjoint (no unrolled time graph).
    """
    params = ContinuousSSMParams(A=A.value, B=B.value, C=C.value, log_delta=log_delta.value)
    d = discretize(params)
    k = build_kernel(d, s.shape[1])
    x = np.moveaxis(s.value, 1, 2)
    y = forward_conv(k, x)

    def backward(g):
        gx, gAb, gBb, gCb = backward_conv(k, d, x, np.moveaxis(g, 1, 2))
        gA, gB, gC, gld = backward_discretize(params, d, gAb, gBb, gCb)
        return np.moveaxis(gx, 2, 1), gA, gB, gC, gld

    return tape.push("ssm_conv", (s, A, B, C, log_delta), np.moveaxis(y, 2, 1), backward)


@dataclass
class BlockOutput:
    p_s6: Variable
    s_s6: Variable
    p_out: Variable
    s_out: Variable
    norm_stats: tuple[np.ndarray, np.ndarray] | None


def block_on_tape(
    tape: Tape,
    s_in: Variable,
    leaves: dict[str, Variable],
    cfg: S6LayerConfig,
    ctx: SamplerContext,
    index: int,
    final: bool = False,
    running: tuple[np.ndarray, np.ndarray] | None = None,
) -> BlockOutput:
    """One S6 encoder block. ``leaves`` holds A, B, C, log_delta, W_fc, gamma, beta."""
    name = f"block{index}"
    try:
        y = ssm_conv_on_tape(tape, s_in, leaves["A"], leaves["B"], leaves["C"], leaves["log_delta"])
    except NonFiniteError as exc:
        raise NonFiniteError(f"{name}.s6: {exc}", layer=f"{name}.s6") from exc
    guard_finite(f"{name}.s6", y)
    p_s6 = sigma_on_tape(tape, y, cfg.sigma)
    s_s6 = ctx.sample_on_tape(tape, p_s6, site=1 + 2 * index)

    z = gelu(tape, matmul(tape, s_s6, leaves["W_fc"]))
    if cfg.residual:
        z = add(tape, z, s_in)
    z, stats = norm_on_tape(tape, z, cfg.norm, leaves["gamma"], leaves["beta"], running)
    guard_finite(f"{name}.out", z)
    p_out = sigma_on_tape(tape, z, cfg.sigma)
    s_out = p_out if final else ctx.sample_on_tape(tape, p_out, site=2 + 2 * index)
    return BlockOutput(p_s6=p_s6, s_s6=s_s6, p_out=p_out, s_out=s_out, norm_stats=stats)


# --- standalone operations ---


def mixer_forward(spikes: np.ndarray, w: MixerWeights) -> np.ndarray:
    """gelu(I_s[t] · W_fc) at every step. With binary spikes the product only
    accumulates selected rows of W_fc."""
    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.shape[-1] != w.W_fc.shape[0]:
        raise ShapeMismatchError(f"spikes have {spikes.shape[-1]} neurons, W_fc expects {w.W_fc.shape[0]}")
    tape = Tape(record=False)
    return gelu(tape, matmul(tape, tape.constant(spikes), tape.constant(w.W_fc))).value


def encoder_on_tape(
    tape: Tape,
    x: Variable,
    W: Variable,
    b: Variable | None,
    sigma: str,
    norm: NormKind | None = None,
    gamma: Variable | None = None,
    beta: Variable | None = None,
    running: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Variable, tuple[np.ndarray, np.ndarray] | None]:
    pre = matmul(tape, x, W)
    if b is not None:
        pre = add(tape, pre, b)
    stats = None
    if norm is not None:
        pre, stats = norm_on_tape(tape, pre, norm, gamma, beta, running)
    guard_finite("encoder", pre)
    return sigma_on_tape(tape, pre, sigma), stats


def encode_input(
    x: np.ndarray,
    w: EncoderWeights,
    norm: NormKind | None = None,
    sigma: str = "clip",
) -> np.ndarray:
    """Affine map of (batch, L, F) inputs to N channels, optional normalization,
    then σ. The result is the probability sequence fed to the first sampler."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.W_e.shape[0]:
        raise ShapeMismatchError(f"input has {x.shape[-1]} features, W_e expects {w.W_e.shape[0]}")
    tape = Tape(record=False)
    N = w.W_e.shape[1]
    b = None if w.b_e is None else tape.constant(w.b_e)
    gamma = tape.constant(np.ones(N)) if norm is not None else None
    beta = tape.constant(np.zeros(N)) if norm is not None else None
    p, _ = encoder_on_tape(
        tape, tape.constant(x), tape.constant(w.W_e), b, sigma,
        norm=None if norm is None else NormKind(norm), gamma=gamma, beta=beta,
    )
    return p.value


def decoder_on_tape(tape: Tape, p: Variable, W: Variable, b: Variable | None, readout: Readout | str) -> Variable:
    readout = Readout(readout)
    if readout is Readout.POOL:
        h = mean_time(tape, p)
    elif readout is Readout.LAST:
        h = last_step(tape, p)
    else:
        h = p
    logits = matmul(tape, h, W)
    return logits if b is None else add(tape, logits, b)


def decode_sequence(
    p_final: np.ndarray,
    w: DecoderWeights,
    num_classes: int,
    per_step: bool = False,
    readout: Readout | str | None = None,
) -> np.ndarray:
    """Mean-pool (batch, L, N) over time and map to (batch, num_classes) logits.

    With ``per_step=True`` the affine map is applied at every step instead,
    giving (batch, L, num_classes). ``readout="last"`` decodes only the final
    step.
    """
    if readout is None:
        readout = Readout.PER_STEP if per_step else Readout.POOL
    p_final = np.asarray(p_final, dtype=np.float64)
    if p_final.ndim != 3 or p_final.shape[1] == 0:
        raise ShapeMismatchError(f"expected non-empty (batch, L, N) input, got {p_final.shape}")
    if w.W_d.shape != (p_final.shape[-1], num_classes):
        raise ShapeMismatchError(
            f"decoder weight {w.W_d.shape} does not map {p_final.shape[-1]} neurons to {num_classes} classes"
        )
    tape = Tape(record=False)
    b = None if w.b_d is None else tape.constant(w.b_d)
    return decoder_on_tape(tape, tape.constant(p_final), tape.constant(w.W_d), b, readout).value


def s6_block_forward(
    spikes_in: np.ndarray,
    params: S6BlockParams,
    cfg: S6LayerConfig,
    mode: Mode,
    rng_seed: int = 0,
    index: int = 0,
    final: bool = False,
    sample_ids: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Run one block on (batch, L, N) input spikes.

    Returns:
        (output probabilities, output spikes, activity stats). For the final
        block the "spikes" are the probabilities themselves.
    """
    spikes_in = np.asarray(spikes_in, dtype=np.float64)
    if spikes_in.ndim != 3 or spikes_in.shape[-1] != cfg.num_neurons:
        raise ShapeMismatchError(f"expected (batch, L, {cfg.num_neurons}) input, got {spikes_in.shape}")
    tape = Tape(record=False)
    leaves = {
        "A": tape.constant(params.ssm.A),
        "B": tape.constant(params.ssm.B),
        "C": tape.constant(params.ssm.C),
        "log_delta": tape.constant(params.ssm.log_delta),
        "W_fc": tape.constant(params.mixer.W_fc),
        "gamma": tape.constant(params.norm_gamma),
        "beta": tape.constant(params.norm_beta),
    }
    ctx = SamplerContext(mode=Mode(mode), seed=rng_seed, sample_ids=sample_ids)
    out = block_on_tape(tape, tape.constant(spikes_in), leaves, cfg, ctx, index, final=final)
    stats = {
        "s6_rate": float(out.s_s6.value.mean()),
        "out_rate": float(out.s_out.value.mean()),
        "mean_probability": float(out.p_out.value.mean()),
    }
    return out.p_out.value, out.s_out.value, stats


# --- LIF baseline ---


def lif_step(u, I, p: LIFParams):
    """One forward-Euler step of τ_m du/dt = -(u - u_rest) + R·I.

    Crossing v_th emits a spike and resets the potential to u_rest.
    """
    u = np.asarray(u, dtype=np.float64)
    u_next = u + (p.dt / p.tau_m) * (-(u - p.u_rest) + p.R * np.asarray(I, dtype=np.float64))
    spike = u_next > p.v_th
    u_next = np.where(spike, p.u_rest, u_next)
    return u_next, spike.astype(np.float64)


def lif_run(currents: np.ndarray, p: LIFParams, u0=None) -> tuple[np.ndarray, np.ndarray]:
    """Iterate lif_step over currents of shape (L,) or (L, N).

    Returns (potentials, spikes), both shaped like ``currents``.
    """
    currents = np.asarray(currents, dtype=np.float64)
    u = np.full(currents.shape[1:], p.u_rest) if u0 is None else np.asarray(u0, dtype=np.float64)
    potentials = np.empty_like(currents)
    spikes = np.empty_like(currents)
    for t in range(currents.shape[0]):
        u, s = lif_step(u, currents[t], p)
        potentials[t] = u
        spikes[t] = s
    return potentials, spikes


def lif_period(I: float, p: LIFParams, max_steps: int = 100_000) -> int | None:
    """Steps between consecutive spikes under constant current; None if it never fires."""
    u = p.u_rest
    last = None
    for t in range(max_steps):
        u, s = lif_step(u, I, p)
        if s:
            if last is not None:
                return t - last
            last = t
    return None
