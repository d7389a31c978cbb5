"""Train-and-evaluate over a grid of configuration overrides."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from kprn.errors import ConfigError
from kprn.trainkit.evaluate import evaluate
from kprn.trainkit.train import build_model, train_loop

log = logging.getLogger(__name__)


@dataclass
class AblationRow:
    label: str
    overrides: dict
    accuracies: list = field(default_factory=list)
    error: str | None = None

    @property
    def mean(self):
        return float(np.mean(self.accuracies)) if self.accuracies and self.error is None else None

    @property
    def failed(self):
        return self.error is not None


def expand_grid(lines):
    """Each line holds space-separated ``key=v1,v2,...`` items; a line expands
    to the cartesian product of its value lists. Blank lines and ``#``
    comments are skipped."""
    cells = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        axes = []
        for item in line.split():
            if "=" not in item:
                raise ConfigError(f"grid item {item!r} is not key=value")
            key, values = item.split("=", 1)
            axes.append([(key, v) for v in values.split(",")])
        for combo in itertools.product(*axes):
            cells.append(dict(combo))
    return cells


def cell_label(config, overrides):
    label = config.label
    if config.mode == "hard" and "threshold" in overrides:
        label += f" thr={config.threshold:g}"
    return label


def run_ablation(train_scenes, eval_scenes, table, base_config, grid, seeds=None, attr_freqs=None):
    """Train and evaluate every grid cell for every seed.

    A cell that raises is marked failed; the remaining cells still run.
    """
    seeds = list(seeds) if seeds is not None else [base_config.seed]
    rows = []
    for overrides in grid:
        try:
            config = base_config.with_overrides(overrides)
        except ConfigError as exc:
            rows.append(AblationRow(str(overrides), dict(overrides), error=str(exc)))
            continue
        row = AblationRow(cell_label(config, overrides), dict(overrides))
        for seed in seeds:
            cfg = config.with_overrides({"seed": seed})
            try:
                model = build_model(train_scenes, table, cfg, attr_freqs)
                train_loop(model, train_scenes, cfg)
                row.accuracies.append(evaluate(model, eval_scenes, cfg).accuracy)
            except Exception as exc:  # per-cell isolation
                log.exception("ablation cell %s (seed %s) failed", row.label, seed)
                row.error = f"{type(exc).__name__}: {exc}"
                break
        rows.append(row)
    return rows


def format_table(rows, seeds=None):
    """Aligned text table: label, overrides, mean accuracy (or FAILED)."""
    header = ("label", "overrides", "accuracy")
    body = []
    for r in rows:
        ov = " ".join(f"{k}={v}" for k, v in r.overrides.items())
        acc = "FAILED" if r.failed else f"{100 * r.mean:.2f}"
        body.append((r.label, ov, acc))
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def write_csv(path, rows):
    import csv

    n = max((len(r.accuracies) for r in rows), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "overrides", "mean_accuracy", *[f"seed_{k}" for k in range(n)], "status"])
        for r in rows:
            ov = " ".join(f"{k}={v}" for k, v in r.overrides.items())
            accs = [repr(a) for a in r.accuracies] + [""] * (n - len(r.accuracies))
            w.writerow([r.label, ov, "" if r.failed else repr(r.mean), *accs, r.error or "ok"])
