"""Report — Markdown run digest.

Collects the config, final training/eval metrics and the energy summary of a
run into reports/{run_name}_summary.md.
"""

import json
import logging
from pathlib import Path

from s6snn.config import report_dir

logger = logging.getLogger(__name__)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_digest(
    run_name: str,
    config: dict,
    train_history: list[dict] | None = None,
    eval_metrics: dict | None = None,
    energy: dict | None = None,
    seed_summary: dict | None = None,
) -> str:
    lines = [
        f"# S6 run digest — {run_name}",
        f"**Task:** {config.get('data', {}).get('task', 'N/A')} | "
        f"**Blocks:** {config.get('model', {}).get('num_blocks', 'N/A')} | "
        f"**Neurons:** {config.get('model', {}).get('num_neurons', 'N/A')} | "
        f"**State dim:** {config.get('model', {}).get('state_dim', 'N/A')}",
        "",
        "---",
        "",
    ]

    lines.append("## Training")
    if train_history:
        last = train_history[-1]
        lines.append(f"- Epochs run: {len(train_history)}")
        for key in ("train_loss", "train_accuracy", "val_loss", "val_accuracy", "test_accuracy"):
            if key in last:
                lines.append(f"- Final {key.replace('_', ' ')}: {_fmt(last[key])}")
    else:
        lines.append("*No training history.*")
    lines.append("")

    if seed_summary:
        lines.append("## Seeds")
        lines.append(f"- Runs: {len(seed_summary['seeds'])} (seeds {', '.join(str(s) for s in seed_summary['seeds'])})")
        lines.append(f"- Eval mode: {seed_summary.get('mode', 'N/A')}")
        lines.append("| metric | mean | std |")
        lines.append("|--------|------|-----|")
        for metric in ("accuracy", "macro_f1", "loss"):
            if metric in seed_summary:
                lines.append(f"| {metric} | {seed_summary[metric]['mean']:.4f} | {seed_summary[metric]['std']:.4f} |")
        lines.append("")

    lines.append("## Evaluation")
    if eval_metrics:
        lines.append(f"- Mode: {eval_metrics.get('mode', 'N/A')} (R={eval_metrics.get('repeats', 'N/A')})")
        lines.append(f"- Accuracy: {_fmt(eval_metrics.get('accuracy', 0.0))}")
        lines.append(f"- Loss: {_fmt(eval_metrics.get('loss', 0.0))}")
        lines.append(f"- Macro F1: {_fmt(eval_metrics.get('macro_f1', 0.0))}")
    else:
        lines.append("*Not evaluated.*")
    lines.append("")

    lines.append("## Spiking activity and energy")
    if energy:
        lines.append("| layer | IFR | consumer ops/step |")
        lines.append("|-------|-----|-------------------|")
        for layer in energy.get("layers", []):
            lines.append(f"| {layer['name']} | {layer['ifr']:.4f} | {layer['consumer_ops']:.0f} |")
        lines.append("")
        lines.append(f"- Norm#OPS: {_fmt(energy.get('norm_ops'))}")
        lines.append(f"- Efficiency factor e: {_fmt(energy.get('efficiency_factor'))}")
        lines.append(f"- Counting rule: {energy.get('counting_rule', '')}")
    else:
        lines.append("*No analysis run.*")
    lines.append("")

    lines.append("## Config")
    lines.append("```json")
    lines.append(json.dumps(config, indent=2, sort_keys=True))
    lines.append("```")
    return "\n".join(lines)


def run(
    run_name: str,
    config: dict,
    train_history: list[dict] | None = None,
    eval_metrics: dict | None = None,
    energy: dict | None = None,
    reports_dir: Path | None = None,
    seed_summary: dict | None = None,
) -> Path:
    """Write the digest and return its path.

    Args:
        run_name: used in the title and the file name.
        config: resolved RunConfig as a dict.
        train_history: per-epoch metric records from fit().
        eval_metrics: output of evaluate().
        energy: EnergyReport.to_dict().
        reports_dir: defaults to $S6_REPORT_DIR or <project>/reports.
        seed_summary: per-metric mean/std of a multi-seed run.
    """
    reports_dir = Path(reports_dir or report_dir())
    reports_dir.mkdir(parents=True, exist_ok=True)
    path = reports_dir / f"{run_name}_summary.md"
    path.write_text(format_digest(run_name, config, train_history, eval_metrics, energy, seed_summary), encoding="utf-8")
    logger.info("Digest saved to %s", path)
    return path
