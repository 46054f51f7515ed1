"""Analysis — spiking-activity statistics and normalized-operations energy accounting.

Outputs are plot-ready files, not figures:

    raster.csv     schema_version, layer, neuron, t   (one row per spike event,
                   first run / first sample)
    activity.csv   schema_version, layer, t, activity (fraction of neurons
                   spiking, averaged over runs and samples)
    histogram.json per-layer histogram of per-neuron mean spike probability
                   plus exponential-kernel KDE curves
    energy.json    per-layer IFR and op counts, Norm#OPS and e

Op-counting rule (accumulates per time step): encoder F·N, S6 convolution
N·(L+1)/2, mixer N·N, decoder N·C. IFR of layer i weights the ops of the
layer that consumes its spikes, layer i+1.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.neighbors import KernelDensity

from s6snn.errors import EmptyTraceError, ProbabilityOutOfRangeError, ShapeMismatchError
from s6snn.layers import Mode
from s6snn.model import S6Network
from s6snn.tasks import SequenceDataset
from s6snn.trainer import derive_seed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ANN_OPS_RATIO = 5.1
INF_SENTINEL = "inf"


@dataclass(frozen=True)
class LayerTrace:
    """Spikes and probabilities of one layer, both (runs, batch, L, N)."""

    name: str
    spikes: np.ndarray
    probs: np.ndarray


@dataclass
class SpikeStats:
    activity: dict[str, np.ndarray]
    rasters: dict[str, np.ndarray]
    histograms: dict[str, dict]
    mean_probs: dict[str, np.ndarray]
    ifr: dict[str, float]


@dataclass(frozen=True)
class EnergyReport:
    layer_names: list[str]
    ifr: list[float]
    layer_ops: list[float]
    norm_ops: float
    efficiency_factor: float
    counting_rule: str = "accumulates per step: encoder F*N, s6 N*(L+1)/2, mixer N*N, decoder N*C"
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        e = self.efficiency_factor
        return {
            "schema_version": SCHEMA_VERSION,
            "layers": [
                {"name": n, "ifr": f, "consumer_ops": o}
                for n, f, o in zip(self.layer_names, self.ifr, self.layer_ops[1:])
            ],
            "layer_ops": self.layer_ops,
            "norm_ops": self.norm_ops,
            "efficiency_factor": INF_SENTINEL if math.isinf(e) else e,
            "counting_rule": self.counting_rule,
            "metadata": self.metadata,
        }


def collect_traces(
    model: S6Network,
    ds: SequenceDataset,
    runs: int = 20,
    samples: int = 16,
    seed: int = 0,
    mode: Mode | str = Mode.EVAL_SAMPLE,
) -> list[LayerTrace]:
    """Record every spiking layer on the first ``samples`` sequences for ``runs`` seeds."""
    mode = Mode(mode)
    count = min(samples, len(ds))
    if count == 0:
        raise EmptyTraceError("dataset has no sequences to trace")
    x = ds.inputs[:count]
    ids = ds.sample_ids[:count]
    runs = runs if mode.sampled else 1
    per_layer: dict[str, tuple[list, list]] = {}
    for r in range(runs):
        result = model.forward(x, mode=mode, seed=derive_seed(seed, r, 3), sample_ids=ids, record_traces=True)
        for name, (spikes, probs) in result.traces.items():
            s_list, p_list = per_layer.setdefault(name, ([], []))
            s_list.append(spikes)
            p_list.append(probs)
    return [LayerTrace(name, np.stack(s), np.stack(p)) for name, (s, p) in per_layer.items()]


def spike_stats(traces: list[LayerTrace], bins: int = 20) -> SpikeStats:
    """Layer activity series, rasters and per-neuron mean-probability histograms.

    activity[layer][t] is the fraction of neurons spiking at step t averaged
    over runs and samples; raster is (N, L) from run 0, sample 0; the
    histogram bins each neuron's probability averaged over runs, samples and
    time on [0, 1]. Each layer also gets its IFR (mean spike count per neuron
    per step), and "all" pools the histogram over layers.
    """
    if not traces or any(t.spikes.size == 0 for t in traces):
        raise EmptyTraceError("no recorded spikes to summarize")
    activity, rasters, histograms, mean_probs, ifr = {}, {}, {}, {}, {}
    edges = np.linspace(0.0, 1.0, bins + 1)
    for tr in traces:
        activity[tr.name] = tr.spikes.mean(axis=(0, 1, 3))
        rasters[tr.name] = tr.spikes[0, 0].T.astype(np.uint8)
        mp = tr.probs.mean(axis=(0, 1, 2))
        mean_probs[tr.name] = mp
        counts, _ = np.histogram(np.clip(mp, 0.0, 1.0), bins=edges)
        histograms[tr.name] = {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}
        ifr[tr.name] = float(tr.spikes.mean())
    pooled = np.concatenate(list(mean_probs.values()))
    counts, _ = np.histogram(np.clip(pooled, 0.0, 1.0), bins=edges)
    histograms["all"] = {"edges": edges.tolist(), "counts": counts.astype(int).tolist()}
    return SpikeStats(activity, rasters, histograms, mean_probs, ifr)


def kde_exponential(
    samples: np.ndarray,
    bandwidth: float,
    grid: np.ndarray | None = None,
    points: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Density (1/n)·Σ (1/2b)·exp(-|x - s|/b) on ``grid`` (default: ``points`` values on [0, 1])."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 1)
    if grid is None:
        grid = np.linspace(0.0, 1.0, points)
    grid = np.asarray(grid, dtype=np.float64)
    if samples.shape[0] == 0:
        return grid, np.zeros_like(grid)
    kde = KernelDensity(kernel="exponential", bandwidth=bandwidth).fit(samples)
    return grid, np.exp(kde.score_samples(grid.reshape(-1, 1)))


def efficiency_factor(norm_ops: float) -> float:
    """e = (Norm#OPS / 5.1)^-1; infinite for a silent network."""
    if norm_ops == 0:
        return math.inf
    return ANN_OPS_RATIO / norm_ops


def energy_report(
    layer_ops: list[float],
    ifrs: list[float],
    layer_names: list[str] | None = None,
    metadata: dict | None = None,
) -> EnergyReport:
    """Norm#OPS = Σ_i IFR_i · ops_{i+1} / Σ ops, and e = 5.1 / Norm#OPS.

    ``layer_ops`` has one more entry than ``ifrs``: ops[0] is the layer fed by
    the raw input, ops[i+1] the layer fed by the spikes whose rate is ifrs[i].
    """
    ops = [float(o) for o in layer_ops]
    rates = [float(f) for f in ifrs]
    if len(ops) != len(rates) + 1:
        raise ShapeMismatchError(f"need len(layer_ops) == len(ifrs) + 1, got {len(ops)} and {len(rates)}")
    if layer_names is not None and len(layer_names) != len(rates):
        raise ShapeMismatchError(f"{len(layer_names)} layer names for {len(rates)} IFR values")
    if any(not 0.0 <= f <= 1.0 for f in rates):
        raise ProbabilityOutOfRangeError(f"IFR values must lie in [0, 1], got {rates}")
    if any(o < 0 for o in ops) or sum(ops) <= 0:
        raise ShapeMismatchError(f"layer op counts must be non-negative with a positive total, got {ops}")
    norm_ops = sum(f * o for f, o in zip(rates, ops[1:])) / sum(ops)
    return EnergyReport(
        layer_names=list(layer_names) if layer_names is not None else [f"layer{i}" for i in range(len(rates))],
        ifr=rates,
        layer_ops=ops,
        norm_ops=norm_ops,
        efficiency_factor=efficiency_factor(norm_ops),
        metadata=metadata or {},
    )


def model_energy_report(model: S6Network, stats: SpikeStats, L: int) -> EnergyReport:
    names = model.layer_names
    missing = [n for n in names if n not in stats.ifr]
    if missing:
        raise ShapeMismatchError(f"traces lack layers {missing}")
    ops = [o for _, o in model.layer_ops(L)]
    return energy_report(
        ops,
        [stats.ifr[n] for n in names],
        layer_names=names,
        metadata={"sequence_length": L, "ifr_averaging": "mean over runs, batch, time and neurons"},
    )


def write_bundle(
    out_dir: Path,
    stats: SpikeStats,
    report: EnergyReport,
    bandwidth: float = 0.05,
    kde_points: int = 256,
) -> dict[str, Path]:
    """Write raster/activity CSVs and histogram/energy JSON into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    events = []
    for layer, raster in stats.rasters.items():
        neuron, t = np.nonzero(raster)
        events.append(pd.DataFrame({"layer": layer, "neuron": neuron, "t": t}))
    raster_df = pd.concat(events, ignore_index=True) if events else pd.DataFrame(columns=["layer", "neuron", "t"])
    raster_df.insert(0, "schema_version", SCHEMA_VERSION)

    activity_df = pd.concat(
        [
            pd.DataFrame({"layer": layer, "t": np.arange(series.size), "activity": series})
            for layer, series in stats.activity.items()
        ],
        ignore_index=True,
    )
    activity_df.insert(0, "schema_version", SCHEMA_VERSION)

    kde = {}
    for layer, mp in stats.mean_probs.items():
        grid, density = kde_exponential(mp, bandwidth, points=kde_points)
        kde[layer] = {"grid": grid.tolist(), "density": density.tolist()}
    hist_doc = {
        "schema_version": SCHEMA_VERSION,
        "bandwidth": bandwidth,
        "histograms": stats.histograms,
        "kde": kde,
    }

    paths = {
        "raster": out_dir / "raster.csv",
        "activity": out_dir / "activity.csv",
        "histogram": out_dir / "histogram.json",
        "energy": out_dir / "energy.json",
    }
    raster_df.to_csv(paths["raster"], index=False)
    activity_df.to_csv(paths["activity"], index=False)
    paths["histogram"].write_text(json.dumps(hist_doc, indent=2), encoding="utf-8")
    paths["energy"].write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    logger.info("Wrote analysis bundle (%d raster events) to %s", len(raster_df), out_dir)
    return paths
