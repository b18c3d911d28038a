"""Unknown-class count sweeps and warm-up size studies.

The BiGAN only ever sees known classes, so one trained model per seed is
shared by every unknown-class combination drawn for that seed.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import f1_unknown
from .nn import make_rng
from .pipeline import RunConfig, default_classes, prepare_from, run_online, train_model


@dataclass
class SweepRow:
    count: int
    combination: list
    seed: int
    k_true: int
    k_pred: int | None
    f1: float | None
    ws: int
    error: str | None = None


def sample_combinations(pool, k, limit, seed=0):
    """Up to ``limit`` distinct ``k``-subsets of ``pool``, drawn with a fixed
    seed; every subset when there are no more than ``limit`` of them."""
    combos = list(itertools.combinations(pool, k))
    if len(combos) <= limit:
        return [list(c) for c in combos]
    rng = make_rng([seed, 17, k])
    pick = np.sort(rng.choice(len(combos), size=limit, replace=False))
    return [list(combos[i]) for i in pick]


def _split_classes(fm, cfg, pool):
    known = list(cfg.known_classes)
    if pool is None:
        pool = list(cfg.unknown_classes)
    if not known and not pool:
        known, pool = default_classes(fm.class_names)
    elif not known:
        known = [c for c in fm.class_names if c not in pool]
    elif not pool:
        pool = [c for c in fm.class_names if c not in known]
    return known, list(pool)


class ModelCache:
    """Checkpoints trained on the known classes, one per seed."""

    def __init__(self, fm, cfg, known):
        self.fm, self.cfg, self.known = fm, cfg, known
        self.models = {}

    def get(self, seed):
        if seed not in self.models:
            cfg = dataclasses.replace(self.cfg, seed=seed)
            data = prepare_from(self.fm, cfg, self.known, [])
            self.models[seed] = train_model(cfg, data)
        return self.models[seed]


def _run_one(fm, cfg, known, combo, seed, ws, cache):
    cfg = dataclasses.replace(cfg, seed=seed, ws=ws)
    row = SweepRow(len(combo), list(combo), seed, len(combo), None, None, ws)
    try:
        ckpt = cache.get(seed)
        data = prepare_from(fm, cfg, known, combo)
        report, _, _ = run_online(cfg, ckpt, data.test.data)
        truth = np.isin(data.test.labels, combo)
        row.k_pred = report.k_new
        row.f1 = f1_unknown(report.flags(len(truth)), truth)
    except Exception as exc:  # noqa: BLE001 - one failing combination must not stop the sweep
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def run_uc_sweep(fm, cfg: RunConfig, counts=range(2, 7), limit=10, seeds=(0,), pool=None,
                 progress=None, models: ModelCache | None = None):
    """For each unknown-class count and sampled combination: split, train
    (cached per seed), stream and record true vs predicted new-class count.

    Pass ``models`` to share trained checkpoints between calls.
    """
    known, pool = _split_classes(fm, cfg, pool)
    if len(pool) < max(counts):
        raise ValueError(f"need at least {max(counts)} candidate unknown classes, have {len(pool)}")
    cache = models or ModelCache(fm, cfg, known)
    rows = []
    for k in counts:
        for combo in sample_combinations(pool, k, limit, cfg.seed):
            for seed in seeds:
                rows.append(_run_one(fm, cfg, known, combo, seed, cfg.ws, cache))
                if progress:
                    progress(rows[-1])
    return rows


def run_ws_study(fm, cfg: RunConfig, ws_values=(25, 50, 100, 200, 400), combination=None,
                 seeds=(0,), pool=None, progress=None, models: ModelCache | None = None):
    """Predicted new-class count as a function of the warm-up size."""
    known, pool = _split_classes(fm, cfg, pool)
    combo = list(combination) if combination else pool
    cache = models or ModelCache(fm, cfg, known)
    rows = []
    for seed in seeds:
        for ws in ws_values:
            rows.append(_run_one(fm, cfg, known, combo, seed, ws, cache))
            if progress:
                progress(rows[-1])
    return rows


def plot_data(rows):
    """Grouped predicted-vs-true counts plus warm-up-size curves."""
    grouped = {}
    curves = {}
    for r in rows:
        if r.k_pred is None:
            continue
        g = grouped.setdefault(str(r.k_true), {})
        g[str(r.k_pred)] = g.get(str(r.k_pred), 0) + 1
        curves.setdefault(f"{r.seed}:{','.join(r.combination)}", {})[str(r.ws)] = r.k_pred
    return {"grouped_counts": grouped, "ws_curves": curves}


def write_sweep(rows, out_dir):
    """Write ``sweep.csv``, ``sweep.json`` and ``sweep_plot.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fields = [f.name for f in dataclasses.fields(SweepRow)]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            d = dataclasses.asdict(r)
            d["combination"] = " ".join(d["combination"])
            w.writerow(["" if d[f] is None else d[f] for f in fields])
    (out / "sweep.json").write_text(
        json.dumps([dataclasses.asdict(r) for r in rows], indent=1) + "\n", encoding="utf-8")
    (out / "sweep_plot.json").write_text(json.dumps(plot_data(rows), indent=1) + "\n",
                                         encoding="utf-8")
    return out / "sweep.csv", out / "sweep.json", out / "sweep_plot.json"
