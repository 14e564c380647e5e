"""Biometry error reports, ablation tables and distribution dumps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .biometry import BiometryError, compute_biometry
from .config import VARIANT_LABELS
from .phantom import DatasetManifest, resize_sample

SAMPLE_FIELDS = ("sample_id", "hc_pred", "hc_gt", "hc_abs_err", "tcd_pred", "tcd_gt", "tcd_abs_err", "status")
SPLIT_ALIASES = {"test": "lc_test"}


@dataclass
class SampleResult:
    sample_id: str
    hc_gt: float
    tcd_gt: float
    hc_pred: float | None = None
    tcd_pred: float | None = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def row(self) -> dict:
        d = {"sample_id": self.sample_id, "hc_gt": self.hc_gt, "tcd_gt": self.tcd_gt, "status": self.status,
             "hc_pred": "", "tcd_pred": "", "hc_abs_err": "", "tcd_abs_err": ""}
        if self.ok:
            d.update(hc_pred=self.hc_pred, tcd_pred=self.tcd_pred, hc_abs_err=abs(self.hc_pred - self.hc_gt),
                     tcd_abs_err=abs(self.tcd_pred - self.tcd_gt))
        return d


def _mae_sd(errors: np.ndarray) -> tuple[float, float]:
    if errors.size == 0:
        return float("nan"), float("nan")
    # population SD of the per-sample absolute errors
    return float(errors.mean()), float(errors.std())


@dataclass
class MetricsReport:
    samples: list[SampleResult]
    variant: str = "custom"
    checkpoint: str = ""
    config: dict = field(default_factory=dict)

    @property
    def successes(self) -> list[SampleResult]:
        return [s for s in self.samples if s.ok]

    @property
    def failures(self) -> int:
        return sum(not s.ok for s in self.samples)

    def errors(self, measure: str) -> np.ndarray:
        return np.array([abs(getattr(s, f"{measure}_pred") - getattr(s, f"{measure}_gt")) for s in self.successes])

    @property
    def hc(self) -> tuple[float, float]:
        return _mae_sd(self.errors("hc"))

    @property
    def tcd(self) -> tuple[float, float]:
        return _mae_sd(self.errors("tcd"))

    def summary(self) -> dict:
        return {"variant": self.variant, "checkpoint": self.checkpoint, "n": len(self.samples),
                "failures": self.failures, "hc_mae": self.hc[0], "hc_sd": self.hc[1],
                "tcd_mae": self.tcd[0], "tcd_sd": self.tcd[1]}

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "config": self.config,
                "samples": [s.__dict__ for s in self.samples]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(samples=[SampleResult(**s) for s in d["samples"]], variant=d["summary"]["variant"],
                   checkpoint=d["summary"]["checkpoint"], config=d.get("config", {}))

    def write(self, out) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "per_sample.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SAMPLE_FIELDS)
            w.writeheader()
            for s in self.samples:
                w.writerow(s.row())
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1))
        return out

    @classmethod
    def read(cls, path) -> "MetricsReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        return cls.from_dict(json.loads(path.read_text()))


def evaluate_model(estimator, samples, *, variant: str = "custom", checkpoint: str = "",
                   config: dict | None = None, batch_size: int = 8) -> MetricsReport:
    """Score an estimator's biometry against each sample's ground truth."""
    shape = estimator.config_.input_shape
    results = []
    samples = list(samples)
    for s in samples:
        if s.gt_biometry is None:
            raise ValueError(f"sample {s.sample_id or '?'} has no ground-truth biometry")
    for i in range(0, len(samples), batch_size):
        chunk = [resize_sample(s, shape) for s in samples[i:i + batch_size]]
        P = estimator.predict_proba(np.stack([s.image for s in chunk]))
        for s, p in zip(chunk, P):
            r = SampleResult(s.sample_id, hc_gt=s.gt_biometry[0], tcd_gt=s.gt_biometry[1])
            try:
                b = compute_biometry(p, s.spacing)
                r.hc_pred, r.tcd_pred = b.hc_mm, b.tcd_mm
            except BiometryError as exc:
                r.status = f"failed: {exc}"
            results.append(r)
    return MetricsReport(results, variant=variant, checkpoint=checkpoint, config=config or {})


def evaluate(checkpoint, data, split: str = "lc_test", device: str | None = None) -> MetricsReport:
    from .estimator import DACSegmenter

    manifest = data if isinstance(data, DatasetManifest) else DatasetManifest.load(data)
    split = SPLIT_ALIASES.get(split, split)
    est = DACSegmenter.from_checkpoint(checkpoint, device=device)
    return evaluate_model(est, manifest.iter_split(split), variant=est.config_.variant,
                          checkpoint=str(checkpoint), config=est.config_.to_dict())


# -- ablation table ---------------------------------------------------------

def _variant_key(v: str):
    return (0, int(v)) if str(v).isdigit() else (1, str(v))


def _describe(cfg: dict) -> tuple[str, str, str]:
    aug = {"weak": "Weak", "strong": "Strong", "asymmetric": "Asymmetrical"}.get(cfg.get("augmentation"), "-")
    dc = cfg.get("dc")
    if dc:
        family = {"ls_gan": "LS-GAN", "vanilla_gan": "V-GAN"}[dc["loss_family"]]
        space = {"output": "out.", "feature": "feat."}[dc["adapt_space"]]
        dc_text = f"yes, {family}, {space} space"
    else:
        dc_text = "−"
    sc_text = "yes" if cfg.get("sc") else "−"
    return aug, dc_text, sc_text


TABLE_HEADER = ("variant", "method", "aug", "dc", "sc", "tcd_mae", "tcd_sd", "hc_mae", "hc_sd", "failures")


def ablation_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    rows = []
    for r in sorted(reports, key=lambda r: _variant_key(r.variant)):
        aug, dc, sc = _describe(r.config)
        (tm, ts), (hm, hs) = r.tcd, r.hc
        rows.append({"variant": r.variant, "method": VARIANT_LABELS.get(r.variant, "custom"), "aug": aug,
                     "dc": dc, "sc": sc, "tcd_mae": round(tm, 2), "tcd_sd": round(ts, 2),
                     "hc_mae": round(hm, 2), "hc_sd": round(hs, 2), "failures": r.failures})
    return rows


def ablation_report(reports: Sequence[MetricsReport]) -> tuple[str, str]:
    """Render the ablation table as aligned text and as CSV (same numbers)."""
    if not reports:
        raise ValueError("need at least one report")
    rows = ablation_rows(reports)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    display = [["Variant", "Method", "Aug.", "DC, loss, space", "SC", "TCD MAE±SD [mm]", "HC MAE±SD [mm]", "Fail"]]
    for r in rows:
        display.append([r["variant"], r["method"], r["aug"], r["dc"], r["sc"],
                        f"{r['tcd_mae']:.2f}±{r['tcd_sd']:.2f}", f"{r['hc_mae']:.2f}±{r['hc_sd']:.2f}",
                        str(r["failures"])])
    widths = [max(len(row[i]) for row in display) for i in range(len(display[0]))]
    lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)).rstrip() for row in display]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n", buf.getvalue()


# -- distributions ----------------------------------------------------------

def distribution_dump(reports: Sequence[MetricsReport]) -> dict:
    """Per-variant predicted HC/TCD lists (None for failures) plus the shared ground truth."""
    if not reports:
        raise ValueError("need at least one report")
    ids = [s.sample_id for s in reports[0].samples]
    for r in reports[1:]:
        if [s.sample_id for s in r.samples] != ids:
            raise ValueError("reports were computed on different test sets")
    ref = reports[0].samples
    dump = {"sample_ids": ids, "gt": {"hc": [s.hc_gt for s in ref], "tcd": [s.tcd_gt for s in ref]},
            "variants": {}}
    for r in sorted(reports, key=lambda r: _variant_key(r.variant)):
        dump["variants"][r.variant] = {"hc": [s.hc_pred if s.ok else None for s in r.samples],
                                       "tcd": [s.tcd_pred if s.ok else None for s in r.samples]}
    return dump


def plot_distributions(dump: dict, out) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    paths = []
    for measure, label in (("hc", "HC [mm]"), ("tcd", "TCD [mm]")):
        names = ["GT", *dump["variants"]]
        data = [dump["gt"][measure]] + [[v for v in d[measure] if v is not None] for d in dump["variants"].values()]
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 4))
        ax.boxplot(data, showfliers=True)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_ylabel(label)
        fig.tight_layout()
        path = out / f"box_{measure}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def write_report(reports: Sequence[MetricsReport], out) -> dict[str, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    text, table_csv = ablation_report(reports)
    (out / "ablation.txt").write_text(text)
    (out / "ablation.csv").write_text(table_csv)
    dump = distribution_dump(reports)
    (out / "distributions.json").write_text(json.dumps(dump, indent=1))
    boxes = plot_distributions(dump, out)
    return {"text": out / "ablation.txt", "csv": out / "ablation.csv",
            "distributions": out / "distributions.json", "box_hc": boxes[0], "box_tcd": boxes[1]}
