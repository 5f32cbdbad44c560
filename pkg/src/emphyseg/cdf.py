"""Cumulative-density features over lung HU values.

A feature is the empirical CDF of lung voxels sampled on a fixed uniform
bin grid (default 512 bins over [-1024, -700] HU, the intensity range
relevant for lung parenchyma). Three kinds exist:

    scan     CDF of one scan's lung voxels
    scanner  CDF of the pooled lung voxels of a scanner's reference scans
    diff     elementwise scan - scanner, the network's domain feature

Reference scans for a scanner prior are never-smoker scans whose %-950
lies closest to the group median.

Text serialization: header ``cdf <kind> <n_bins> <lo_hu> <hi_hu>``
followed by one value per line at 17 significant digits (lossless for
float64).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CtVolume, DatasetManifest, ManifestRecord, read_volume
from .errors import ConfigError, DegenerateInputError

DEFAULT_N_BINS = 512
DEFAULT_LO_HU = -1024.0
DEFAULT_HI_HU = -700.0

KINDS = ("scanner", "scan", "diff")


def make_edges(lo: float = DEFAULT_LO_HU, hi: float = DEFAULT_HI_HU,
               n_bins: int = DEFAULT_N_BINS) -> np.ndarray:
    """n_bins+1 uniform bin edges; reproducible bitwise from (lo, hi, n)."""
    if not (hi > lo) or n_bins < 1:
        raise ConfigError(f"invalid bin grid lo={lo} hi={hi} n_bins={n_bins}")
    i = np.arange(n_bins + 1, dtype=np.float64)
    return lo + (hi - lo) * i / n_bins


@dataclass(frozen=True)
class CdfFeature:
    """Cumulative fractions on a fixed bin grid.

    values[i] is the fraction of lung voxels with hu <= edges[i+1]
    (out-of-range voxels are clipped into the end bins, so the final
    value of a scan/scanner CDF is exactly 1).
    """

    values: np.ndarray
    edges: np.ndarray
    kind: str
    source: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=np.float64))
        object.__setattr__(self, "edges", np.ascontiguousarray(self.edges, dtype=np.float64))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown CDF kind {self.kind!r}")
        if self.edges.ndim != 1 or self.values.shape != (self.edges.size - 1,):
            raise ConfigError("values/edges length mismatch")
        ref = make_edges(float(self.edges[0]), float(self.edges[-1]), self.n_bins)
        if not np.array_equal(self.edges, ref):
            raise ConfigError("bin edges must be uniform")
        if self.kind in ("scanner", "scan"):
            if np.any(np.diff(self.values) < 0):
                raise ValueError(f"{self.kind} CDF must be non-decreasing")
            if self.values.min(initial=1.0) < 0 or self.values.max(initial=0.0) > 1:
                raise ValueError(f"{self.kind} CDF values must lie in [0,1]")
            if self.values.size and abs(self.values[-1] - 1.0) > 1e-9:
                raise ValueError(f"{self.kind} CDF must end at 1, got {self.values[-1]}")
        else:
            if self.values.size and (self.values.min() < -1 or self.values.max() > 1):
                raise ValueError("diff CDF values must lie in [-1,1]")

    @property
    def n_bins(self) -> int:
        return self.values.size


def _lung_hu(v: CtVolume) -> np.ndarray:
    hu = v.hu[v.lung_mask]
    if hu.size == 0:
        raise DegenerateInputError(f"{v.scan_id}: empty lung mask")
    return hu


def _bin_counts(hu: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Count voxels per bin under the `hu <= right edge` convention."""
    n_bins = edges.size - 1
    clipped = np.clip(hu.astype(np.float64), edges[0], edges[-1])
    idx = np.searchsorted(edges[1:], clipped, side="left")
    return np.bincount(idx, minlength=n_bins).astype(np.int64)


def pct_below_950(v: CtVolume) -> float:
    """Percentage of lung voxels strictly below -950 HU."""
    hu = _lung_hu(v)
    return 100.0 * int(np.count_nonzero(hu < -950)) / hu.size


def perc15(v: CtVolume) -> int:
    """Smallest lung HU value h with at least 15% of lung voxels <= h."""
    hu = np.sort(_lung_hu(v))
    k = (15 * hu.size + 99) // 100  # ceil(0.15 * n), exact in integers
    return int(hu[k - 1])


def cdf_of_scan(v: CtVolume, edges: np.ndarray | None = None) -> CdfFeature:
    edges = make_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    counts = _bin_counts(_lung_hu(v), edges)
    values = np.cumsum(counts) / counts.sum()
    values[-1] = 1.0
    return CdfFeature(values=values, edges=edges, kind="scan", source=(v.scan_id,))


def cdf_of_scanner(volumes: list[CtVolume], edges: np.ndarray | None = None) -> CdfFeature:
    """CDF of the pooled lung voxels of several scans of one scanner.

    Equals the lung-voxel-count-weighted mixture of the per-scan CDFs;
    computed by summing integer bin counts so it matches brute-force
    pooling exactly.
    """
    if not volumes:
        raise DegenerateInputError("scanner CDF needs at least one volume")
    edges = make_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    total = np.zeros(edges.size - 1, dtype=np.int64)
    for v in volumes:
        total += _bin_counts(_lung_hu(v), edges)
    values = np.cumsum(total) / total.sum()
    values[-1] = 1.0
    tags = tuple(dict.fromkeys(v.scanner for v in volumes))
    return CdfFeature(values=values, edges=edges, kind="scanner", source=tags)


def cdf_diff(scan: CdfFeature, scanner: CdfFeature) -> CdfFeature:
    """Domain feature: scan CDF minus the scanner prior, same bin grid."""
    if scan.kind != "scan" or scanner.kind != "scanner":
        raise ConfigError(f"cdf_diff needs (scan, scanner), got ({scan.kind}, {scanner.kind})")
    if not np.array_equal(scan.edges, scanner.edges):
        raise ConfigError("cdf_diff requires identical bin edges")
    return CdfFeature(
        values=scan.values - scanner.values,
        edges=scan.edges,
        kind="diff",
        source=scan.source + scanner.source,
    )


def select_reference_scans(manifest: DatasetManifest, scanner: str, k: int = 10) -> list[str]:
    """Pick reference scan_ids for a scanner prior.

    Eligible scans are the scanner's never-smoker records. Among those,
    the k scans whose %-950 is closest to the (lower) median win; ties
    break on lexicographically smaller scan_id. Result is independent of
    manifest ordering.
    """
    eligible = [r for r in manifest.records if r.scanner == scanner and r.never_smoker]
    if not eligible:
        raise ConfigError(f"no never-smoker scans for scanner {scanner!r}")
    scored: list[tuple[float, str]] = []
    for r in eligible:
        pct = r.pct950 if r.pct950 is not None else pct_below_950(read_volume(r.path))
        scored.append((pct, r.scan_id))
    values = sorted(p for p, _ in scored)
    median = values[(len(values) - 1) // 2]
    ranked = sorted(scored, key=lambda it: (abs(it[0] - median), it[1]))
    return [scan_id for _, scan_id in ranked[: min(k, len(ranked))]]


def scanner_prior(manifest: DatasetManifest, scanner: str, k: int = 10,
                  edges: np.ndarray | None = None) -> CdfFeature:
    """Reference-scan selection plus pooled CDF in one step."""
    ids = select_reference_scans(manifest, scanner, k)
    volumes = [read_volume(manifest.by_id(i).path) for i in ids]
    feature = cdf_of_scanner(volumes, edges)
    return CdfFeature(values=feature.values, edges=feature.edges,
                      kind="scanner", source=(scanner,))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_cdf(feature: CdfFeature, path: str | Path) -> None:
    lines = [
        f"cdf {feature.kind} {feature.n_bins} "
        f"{format(feature.edges[0], '.17g')} {format(feature.edges[-1], '.17g')}"
    ]
    lines.extend(format(x, ".17g") for x in feature.values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cdf(path: str | Path) -> CdfFeature:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("cdf "):
        raise ConfigError(f"{path}: not a cdf file")
    parts = lines[0].split()
    if len(parts) != 5:
        raise ConfigError(f"{path}: malformed cdf header")
    _, kind, n_bins, lo, hi = parts
    n = int(n_bins)
    values = np.array([float(x) for x in lines[1 : n + 1]], dtype=np.float64)
    if values.size != n:
        raise ConfigError(f"{path}: expected {n} values, found {values.size}")
    return CdfFeature(values=values, edges=make_edges(float(lo), float(hi), n), kind=kind)
