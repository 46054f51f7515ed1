"""S6Network — encoder, M stacked S6 blocks and a sequence decoder.

Parameters live in a flat, ordered ``params`` dict keyed by dotted names
(``encoder.W``, ``block0.ssm.A``, ``block0.mixer.W``, ``decoder.b`` ...), which
is what the optimizer, the checkpoint writer and the gradient checks iterate
over. Batch-norm running statistics are kept separately in ``running``.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from s6snn.layers import (
    Mode,
    NormKind,
    ParamSharing,
    S6LayerConfig,
    SamplerContext,
    block_on_tape,
    decoder_on_tape,
    encoder_on_tape,
)
from s6snn.ssm import build_kernel, discretize, init_continuous, ContinuousSSMParams
from s6snn.tape import Tape, Variable

logger = logging.getLogger(__name__)

ENCODER_BIAS_INIT = 0.5
BN_MOMENTUM = 0.1

_BLOCK_LEAVES = {
    "A": "ssm.A",
    "B": "ssm.B",
    "C": "ssm.C",
    "log_delta": "ssm.log_delta",
    "W_fc": "mixer.W",
    "gamma": "norm.gamma",
    "beta": "norm.beta",
}


@dataclass(frozen=True)
class NetworkConfig:
    num_blocks: int
    num_neurons: int
    state_dim: int
    input_features: int = 1
    num_classes: int = 10
    param_sharing: str = "per_layer"
    norm: str = "batch"
    residual: bool = True
    sigma: str = "clip"
    encoder_norm: bool = False
    decoder: str = "pool"

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.input_features < 1 or self.num_classes < 2:
            raise ValueError(
                f"need input_features >= 1 and num_classes >= 2, got {self.input_features}, {self.num_classes}"
            )
        if self.decoder not in ("pool", "per_step", "last"):
            raise ValueError(f"decoder must be 'pool', 'per_step' or 'last', got {self.decoder!r}")

    @property
    def layer(self) -> S6LayerConfig:
        return S6LayerConfig(
            num_neurons=self.num_neurons,
            state_dim=self.state_dim,
            param_sharing=ParamSharing(self.param_sharing),
            norm=NormKind(self.norm),
            residual=self.residual,
            sigma=self.sigma,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    logits: Variable
    leaves: dict[str, Variable]
    rates: dict[str, float]
    batch_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    traces: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


class S6Network:
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        self.layer_cfg = cfg.layer
        self.params: dict[str, np.ndarray] = {}
        self.running: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        N, F, H = cfg.num_neurons, cfg.input_features, self.layer_cfg.heads
        self.params["encoder.W"] = rng.normal(0.0, 1.0 / np.sqrt(F), size=(F, N))
        self.params["encoder.b"] = np.full(N, ENCODER_BIAS_INIT)
        if cfg.encoder_norm:
            self.params["encoder.norm.gamma"] = np.ones(N)
            self.params["encoder.norm.beta"] = np.zeros(N)
            if self.layer_cfg.norm is NormKind.BATCH:
                self.running["encoder.norm"] = (np.zeros(N), np.ones(N))
        for m in range(cfg.num_blocks):
            ssm = init_continuous(cfg.state_dim, H, rng)
            self.params[f"block{m}.ssm.A"] = ssm.A
            self.params[f"block{m}.ssm.B"] = ssm.B
            self.params[f"block{m}.ssm.C"] = ssm.C
            self.params[f"block{m}.ssm.log_delta"] = ssm.log_delta
            self.params[f"block{m}.mixer.W"] = rng.normal(0.0, 1.0 / np.sqrt(N), size=(N, N))
            self.params[f"block{m}.norm.gamma"] = np.ones(N)
            self.params[f"block{m}.norm.beta"] = np.zeros(N)
            if self.layer_cfg.norm is NormKind.BATCH:
                self.running[f"block{m}.norm"] = (np.zeros(N), np.ones(N))
        self.params["decoder.W"] = rng.normal(0.0, 1.0 / np.sqrt(N), size=(N, cfg.num_classes))
        self.params["decoder.b"] = np.zeros(cfg.num_classes)
        logger.debug("Initialized %d parameter tensors (%d values)", len(self.params), self.num_values)

    @property
    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def layer_names(self) -> list[str]:
        """Spiking layers in order; these are the layers an IFR is reported for."""
        names = ["encoder"]
        for m in range(self.cfg.num_blocks):
            names += [f"block{m}.s6", f"block{m}.out"]
        return names

    def layer_ops(self, L: int) -> list[tuple[str, float]]:
        """Synaptic accumulate operations per time step of every layer.

        encoder F·N, S6 convolution N·(L+1)/2 (mean causal taps per step),
        mixer N·N, decoder N·C.
        """
        cfg = self.cfg
        N = cfg.num_neurons
        ops = [("encoder", float(cfg.input_features * N))]
        for m in range(cfg.num_blocks):
            ops.append((f"block{m}.s6", N * (L + 1) / 2.0))
            ops.append((f"block{m}.mixer", float(N * N)))
        ops.append(("decoder", float(N * cfg.num_classes)))
        return ops

    def ssm_params(self, m: int) -> ContinuousSSMParams:
        return ContinuousSSMParams(
            A=self.params[f"block{m}.ssm.A"],
            B=self.params[f"block{m}.ssm.B"],
            C=self.params[f"block{m}.ssm.C"],
            log_delta=self.params[f"block{m}.ssm.log_delta"],
        )

    def kernels(self, m: int, L: int) -> np.ndarray:
        """Per-neuron kernels of block m, (N, L)."""
        w = build_kernel(discretize(self.ssm_params(m)), L).weights
        return np.broadcast_to(w.reshape(-1, L), (self.cfg.num_neurons, L))

    def forward(
        self,
        x: np.ndarray,
        mode: Mode | str = Mode.EVAL_EXPECTED,
        seed: int = 0,
        sample_ids: np.ndarray | None = None,
        training: bool = False,
        tape: Tape | None = None,
        record_traces: bool = False,
    ) -> ForwardResult:
        """Run (batch, L, F) inputs through the network.

        Args:
            x: real inputs.
            mode: sampler behaviour (sampled or probability propagation).
            seed: sampler seed for this pass.
            sample_ids: stable per-sequence ids that key the sampler streams.
            training: normalize with batch statistics instead of running ones.
            tape: recording tape for backward(); a non-recording one if None.
            record_traces: keep (spikes, probabilities) of every spiking layer.

        Returns:
            ForwardResult with logits (batch, C) or (batch, L, C) for the
            per-step decoder.
        """
        cfg = self.cfg
        tape = tape or Tape(record=False)
        x = np.asarray(x, dtype=np.float64)
        leaves = {name: tape.leaf(value, name) for name, value in self.params.items()}
        ctx = SamplerContext(mode=Mode(mode), seed=seed, sample_ids=sample_ids)
        result = ForwardResult(logits=None, leaves=leaves, rates={})

        def running(key):
            return None if training else self.running.get(key)

        def observe(name, spikes, probs):
            result.rates[name] = float(np.mean(spikes.value))
            if record_traces:
                result.traces[name] = (spikes.value, probs.value)

        p_enc, stats = encoder_on_tape(
            tape,
            tape.constant(x),
            leaves["encoder.W"],
            leaves["encoder.b"],
            cfg.sigma,
            norm=self.layer_cfg.norm if cfg.encoder_norm else None,
            gamma=leaves.get("encoder.norm.gamma"),
            beta=leaves.get("encoder.norm.beta"),
            running=running("encoder.norm"),
        )
        if stats is not None:
            result.batch_stats["encoder.norm"] = stats
        s = ctx.sample_on_tape(tape, p_enc, site=0)
        observe("encoder", s, p_enc)

        for m in range(cfg.num_blocks):
            block_leaves = {k: leaves[f"block{m}.{v}"] for k, v in _BLOCK_LEAVES.items()}
            out = block_on_tape(
                tape, s, block_leaves, self.layer_cfg, ctx, m,
                final=m == cfg.num_blocks - 1,
                running=running(f"block{m}.norm"),
            )
            if out.norm_stats is not None:
                result.batch_stats[f"block{m}.norm"] = out.norm_stats
            observe(f"block{m}.s6", out.s_s6, out.p_s6)
            observe(f"block{m}.out", out.s_out, out.p_out)
            s = out.s_out

        result.logits = decoder_on_tape(
            tape, s, leaves["decoder.W"], leaves["decoder.b"], readout=cfg.decoder
        )
        return result

    def update_running_stats(
        self,
        batch_stats: dict[str, tuple[np.ndarray, np.ndarray]],
        momentum: float = BN_MOMENTUM,
    ) -> None:
        for key, (mean, var) in batch_stats.items():
            if key not in self.running:
                continue
            r_mean, r_var = self.running[key]
            self.running[key] = (
                (1.0 - momentum) * r_mean + momentum * mean,
                (1.0 - momentum) * r_var + momentum * var,
            )

    # --- flat tensor view used by checkpoints ---

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for key, (mean, var) in self.running.items():
            out[f"running.{key}.mean"] = mean
            out[f"running.{key}.var"] = var
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> list[str]:
        """Copy matching tensors in; returns the names whose shapes disagree or are missing."""
        expected = self.tensors()
        bad = [
            name for name, value in expected.items()
            if name not in tensors or np.shape(tensors[name]) != np.shape(value)
        ]
        bad += [name for name in tensors if name not in expected]
        if bad:
            return bad
        for name in self.params:
            self.params[name] = np.array(tensors[name], dtype=np.float64)
        for key in self.running:
            self.running[key] = (
                np.array(tensors[f"running.{key}.mean"], dtype=np.float64),
                np.array(tensors[f"running.{key}.var"], dtype=np.float64),
            )
        return []
