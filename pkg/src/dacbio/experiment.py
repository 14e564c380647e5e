"""Multi-seed ablation runs and the ordering check used to compare variants."""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import VARIANTS, variant_config
from .evaluation import MetricsReport, evaluate, write_report
from .phantom import DatasetManifest
from .trainer import train

log = logging.getLogger(__name__)


def run_variant(data: DatasetManifest, variant: str, seed: int, out, *, splits=("lc_test",),
                device: str | None = None, **overrides) -> dict[str, MetricsReport]:
    """Train one variant/seed (reusing a finished run) and evaluate it on ``splits``."""
    run_dir = Path(out) / f"variant{variant}_seed{seed}"
    cfg = variant_config(variant, seed=seed, **overrides)
    ckpt = run_dir / "last.pt"
    if not ((run_dir / "done").exists() and ckpt.exists()):
        log.info("training variant %s seed %d", variant, seed)
        ckpt = train(cfg, data, run_dir, device=device)
        (run_dir / "done").touch()
    reports = {}
    for split in splits:
        rep_dir = run_dir / f"eval_{split}"
        if (rep_dir / "report.json").exists():
            reports[split] = MetricsReport.read(rep_dir)
            continue
        rep = evaluate(ckpt, data, split, device=device)
        rep.write(rep_dir)
        reports[split] = rep
    return reports


def run_ablation(data, out, variants: Sequence[str] = ("2", "5", "7"), seeds: Sequence[int] = (0, 1, 2),
                 *, splits=("lc_test",), device: str | None = None, **overrides) -> dict:
    """Returns ``{seed: {variant: {split: MetricsReport}}}`` and writes one table per seed."""
    manifest = data if isinstance(data, DatasetManifest) else DatasetManifest.load(data)
    results: dict = {}
    for seed in seeds:
        results[seed] = {}
        for v in variants:
            results[seed][v] = run_variant(manifest, v, seed, out, splits=splits, device=device, **overrides)
        write_report([results[seed][v][splits[0]] for v in variants], Path(out) / f"report_seed{seed}")
    return results


def ordering_check(reports: dict[str, MetricsReport], order: Sequence[str] = ("2", "5", "7"),
                   min_gain: float = 0.2) -> dict:
    """Check strictly decreasing MAE along ``order`` and a ``min_gain`` relative gain first -> last.

    A variant with no successful extraction counts as infinitely bad.
    """
    out = {}
    for measure in ("tcd", "hc"):
        maes = []
        for v in order:
            mae = getattr(reports[v], measure)[0]
            maes.append(float("inf") if mae != mae else mae)
        decreasing = all(a > b for a, b in zip(maes, maes[1:]))
        gain = 1.0 - maes[-1] / maes[0] if maes[0] not in (0.0, float("inf")) else (1.0 if maes[-1] < maes[0] else 0.0)
        out[measure] = {"mae": dict(zip(order, maes)), "decreasing": decreasing, "gain": gain,
                        "ok": decreasing and gain >= min_gain}
    out["ok"] = out["tcd"]["ok"] and out["hc"]["ok"]
    return out


def weight_grid(lo: float = 1e-4, hi: float = 1.0) -> list[float]:
    """Powers of ten from ``lo`` to ``hi`` inclusive."""
    if not 0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")
    k0, k1 = round(math.log10(lo)), round(math.log10(hi))
    return [10.0**k for k in range(k0, k1 + 1)]


def grid_search(data, out, variant: str = "7", alphas: Sequence[float] | None = None,
                betas: Sequence[float] | None = None, seed: int = 0, split: str = "lc_test",
                device: str | None = None, **overrides) -> list[dict]:
    """Train ``variant`` for every (alpha, beta) pair and score it on ``split``.

    Pathways the variant disables keep their single default weight.
    Results are sorted by TCD MAE then HC MAE.
    """
    manifest = data if isinstance(data, DatasetManifest) else DatasetManifest.load(data)
    base = VARIANTS[variant]
    alphas = ([None] if base.sc is None else list(alphas or weight_grid()))
    betas = ([None] if base.dc is None else list(betas or weight_grid()))
    rows = []
    for a in alphas:
        for b in betas:
            kw = dict(overrides)
            if a is not None:
                kw["sc"] = replace(base.sc, alpha=a)
            if b is not None:
                kw["dc"] = replace(base.dc, beta=b)
            tag = f"{out}/alpha{a}_beta{b}"
            rep = run_variant(manifest, variant, seed, tag, splits=(split,), device=device, **kw)[split]
            rows.append({"alpha": a, "beta": b, "tcd_mae": rep.tcd[0], "hc_mae": rep.hc[0],
                         "failures": rep.failures})
    nan_last = lambda v: (v != v, v)  # noqa: E731
    return sorted(rows, key=lambda r: (nan_last(r["tcd_mae"]), nan_last(r["hc_mae"])))
