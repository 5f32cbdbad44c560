"""Test harness: per-scan scoring, per-scanner aggregation, variant
comparison tables, and TP/FN/FP overlay rendering.

Reports are tab-separated text with a per-scan section followed by
aggregate sections (per-scanner, overall, and five-number box summaries
of DSC and signed error). All numbers print at 17 significant digits, so
a report is byte-stable for a given checkpoint and manifest and parses
back without loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cdf import CdfFeature, cdf_diff, cdf_of_scan
from .checkpoint import Checkpoint, model_from_checkpoint
from .data import DatasetManifest, read_volume
from .errors import ConfigError
from .network import SegmentationNet
from .objective import ScanEval, eval_scan, predict_scan

_F = ".17g"


@dataclass(frozen=True)
class Aggregate:
    """Mean and spread of the scan-level scores of one group.

    Spread is the sample standard deviation (ddof=1), zero for single
    scans.
    """

    n: int
    mean_ref: float
    std_ref: float
    mean_pred: float
    std_pred: float
    mean_error: float
    std_error: float
    mean_dsc: float
    std_dsc: float


@dataclass(frozen=True)
class FiveNumber:
    lo: float
    q1: float
    median: float
    q3: float
    hi: float


@dataclass
class EvalReport:
    variant: str
    split: str
    scans: list[ScanEval]
    per_scanner: dict[str, Aggregate] = field(default_factory=dict)
    overall: Aggregate | None = None
    box_dsc: dict[str, FiveNumber] = field(default_factory=dict)
    box_error: dict[str, FiveNumber] = field(default_factory=dict)


def _aggregate(scans: list[ScanEval]) -> Aggregate:
    def stats(xs):
        arr = np.asarray(xs, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    mean_ref, std_ref = stats([s.pct_emph_ref for s in scans])
    mean_pred, std_pred = stats([s.pct_emph_pred for s in scans])
    mean_err, std_err = stats([s.signed_error for s in scans])
    mean_dsc, std_dsc = stats([s.dsc for s in scans])
    return Aggregate(len(scans), mean_ref, std_ref, mean_pred, std_pred,
                     mean_err, std_err, mean_dsc, std_dsc)


def _five_number(xs) -> FiveNumber:
    q = np.percentile(np.asarray(xs, dtype=np.float64), [0, 25, 50, 75, 100])
    return FiveNumber(*(float(x) for x in q))


def report_from_scans(variant: str, split: str, scans: list[ScanEval]) -> EvalReport:
    """Fold per-scan scores into a full report, in scan_id order."""
    if not scans:
        raise ConfigError("cannot aggregate an empty scan list")
    scans = sorted(scans, key=lambda s: s.scan_id)
    report = EvalReport(variant=variant, split=split, scans=scans)
    tags = sorted({s.scanner for s in scans})
    for tag in tags:
        group = [s for s in scans if s.scanner == tag]
        report.per_scanner[tag] = _aggregate(group)
        report.box_dsc[tag] = _five_number([s.dsc for s in group])
        report.box_error[tag] = _five_number([s.signed_error for s in group])
    report.overall = _aggregate(scans)
    return report


def scan_domain_feature(volume, model_cfg, priors: dict[str, CdfFeature]):
    """Domain feature for one volume under the model's variant."""
    if not model_cfg.uses_domain:
        return None
    if volume.scanner not in priors:
        raise ConfigError(f"no scanner prior for tag {volume.scanner!r}")
    prior = priors[volume.scanner]
    if model_cfg.variant == "dattn_scanner":
        return prior
    return cdf_diff(cdf_of_scan(volume, prior.edges), prior)


def run_eval(source: Checkpoint | SegmentationNet, manifest: DatasetManifest,
             split: str, priors: dict[str, CdfFeature] | None = None,
             batch_size: int = 8) -> EvalReport:
    """Evaluate a trained model on one manifest split."""
    model = model_from_checkpoint(source) if isinstance(source, Checkpoint) else source
    records = sorted(manifest.split(split), key=lambda r: r.scan_id)
    if not records:
        raise ConfigError(f"manifest has no {split} records")
    scans = []
    for record in records:
        volume = read_volume(record.path)
        domain = scan_domain_feature(volume, model.cfg, priors or {})
        pred = predict_scan(model, volume, domain, batch_size=batch_size)
        scans.append(eval_scan(pred, volume))
    return report_from_scans(model.cfg.variant, split, scans)


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------

_AGG_COLS = ("mean_ref", "std_ref", "mean_pred", "std_pred",
             "mean_error", "std_error", "mean_dsc", "std_dsc")


def _agg_line(label: str, agg: Aggregate) -> str:
    nums = "\t".join(format(getattr(agg, c), _F) for c in _AGG_COLS)
    return f"{label}\t{agg.n}\t{nums}"


def write_report(report: EvalReport, path: str | Path) -> None:
    lines = [
        "# emphysema evaluation report",
        f"variant\t{report.variant}",
        f"split\t{report.split}",
        "[scans]",
        "# scan_id\tscanner\tpct_emph_ref\tpct_emph_pred\tsigned_error\tdsc",
    ]
    for s in report.scans:
        lines.append(
            f"{s.scan_id}\t{s.scanner}\t{format(s.pct_emph_ref, _F)}\t"
            f"{format(s.pct_emph_pred, _F)}\t{format(s.signed_error, _F)}\t"
            f"{format(s.dsc, _F)}"
        )
    lines.append("[per_scanner]")
    lines.append("# scanner\tn\t" + "\t".join(_AGG_COLS))
    for tag in sorted(report.per_scanner):
        lines.append(_agg_line(tag, report.per_scanner[tag]))
    lines.append("[overall]")
    lines.append(_agg_line("all", report.overall))
    for section, boxes in (("box_dsc", report.box_dsc),
                           ("box_error", report.box_error)):
        lines.append(f"[{section}]")
        lines.append("# scanner\tmin\tq1\tmedian\tq3\tmax")
        for tag in sorted(boxes):
            b = boxes[tag]
            vals = "\t".join(format(x, _F) for x in (b.lo, b.q1, b.median, b.q3, b.hi))
            lines.append(f"{tag}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> EvalReport:
    """Parse a report file back; aggregates are recomputed from the
    per-scan rows (they round-trip exactly at 17 digits)."""
    variant = split = None
    scans = []
    section = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section is None:
            key, _, value = line.partition("\t")
            if key == "variant":
                variant = value
            elif key == "split":
                split = value
            continue
        if section == "scans":
            parts = line.split("\t")
            if len(parts) != 6:
                raise ConfigError(f"{path}: malformed scan row {line!r}")
            scans.append(ScanEval(
                scan_id=parts[0], scanner=parts[1],
                pct_emph_ref=float(parts[2]), pct_emph_pred=float(parts[3]),
                signed_error=float(parts[4]), dsc=float(parts[5]),
            ))
    if variant is None or split is None or not scans:
        raise ConfigError(f"{path}: not a complete evaluation report")
    return report_from_scans(variant, split, scans)


# ---------------------------------------------------------------------------
# Variant comparison
# ---------------------------------------------------------------------------

def compare_variants(reports: list[EvalReport]) -> str:
    """Side-by-side table over reports covering the same scan set."""
    if len(reports) < 2:
        raise ConfigError("compare needs at least two reports")
    variants = [r.variant for r in reports]
    if len(set(variants)) != len(variants):
        raise ConfigError(f"duplicate variants in comparison: {variants}")
    base_ids = {s.scan_id for s in reports[0].scans}
    for r in reports[1:]:
        if {s.scan_id for s in r.scans} != base_ids or r.split != reports[0].split:
            raise ConfigError("reports cover different scan sets or splits")
    rows = sorted(reports, key=lambda r: r.variant)
    lines = [
        f"# variant comparison, split {reports[0].split}, {len(base_ids)} scans",
        "# variant\tn\tmean_ref\tmean_pred\tmean_error\tstd_error\tmean_dsc\tstd_dsc",
    ]
    for r in rows:
        a = r.overall
        lines.append(
            f"{r.variant}\t{a.n}\t{format(a.mean_ref, _F)}\t{format(a.mean_pred, _F)}\t"
            f"{format(a.mean_error, _F)}\t{format(a.std_error, _F)}\t"
            f"{format(a.mean_dsc, _F)}\t{format(a.std_dsc, _F)}"
        )
    best_err = min(rows, key=lambda r: (abs(r.overall.mean_error), r.variant))
    best_dsc = max(rows, key=lambda r: (r.overall.mean_dsc, r.variant))
    lines.append("[winners]")
    lines.append(f"lowest_abs_mean_error\t{best_err.variant}")
    lines.append(f"highest_mean_dsc\t{best_dsc.variant}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

OVERLAY_WINDOW = (-1024.0, -300.0)


def render_overlay(hu: np.ndarray, pred_mask: np.ndarray,
                   ref_mask: np.ndarray) -> np.ndarray:
    """RGB confusion overlay on a lung-windowed grayscale background.

    Green marks true positives, yellow false negatives, red false
    positives; everything else shows windowed HU.
    """
    pred = np.asarray(pred_mask, dtype=bool)
    ref = np.asarray(ref_mask, dtype=bool)
    if hu.shape != pred.shape or hu.shape != ref.shape:
        raise ConfigError("overlay inputs must share one shape")
    lo, hi = OVERLAY_WINDOW
    gray = np.clip((hu.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    gray = np.rint(gray * 255).astype(np.uint8)
    img = np.stack([gray, gray, gray], axis=-1)
    img[pred & ref] = (0, 255, 0)
    img[~pred & ref] = (255, 255, 0)
    img[pred & ~ref] = (255, 0, 0)
    return img


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Binary PPM (P6) writer for RGB uint8 images."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ConfigError(f"PPM needs H x W x 3 uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
