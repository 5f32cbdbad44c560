"""Synthetic multi-scanner lung-CT phantoms with known emphysema masks.

Each scan is generated in two steps. `generate_anatomy` builds a
scanner-neutral latent volume: two elliptical lung fields per slice,
an emphysema mask carved from a low-pass-filtered 3D noise field, and
HU values drawn from separate parenchyma / emphysema distributions.
`apply_scanner` then simulates a scanner type by in-plane Gaussian
smoothing, an additive HU bias, and additive Gaussian noise. Masks are
frozen before the scanner transform, so a fixed HU threshold is biased
across scanners while the ground truth stays comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .cdf import pct_below_950
from .data import (
    CtVolume,
    DatasetManifest,
    HU_MAX,
    HU_MIN,
    ManifestRecord,
    write_manifest,
    write_volume,
)
from .errors import ConfigError, GenerationError


@dataclass(frozen=True)
class ScannerProfile:
    """Intensity transform parameters of one simulated scanner type."""

    tag: str
    hu_bias: float = 0.0
    smoothing_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.tag:
            raise ConfigError("scanner tag must be non-empty")
        if self.smoothing_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("sigmas must be >= 0")
        if abs(self.hu_bias) > 50:
            raise ConfigError("|hu_bias| must be <= 50")


@dataclass(frozen=True)
class PhantomConfig:
    slices: int = 20
    height: int = 64
    width: int = 64
    emph_target_fraction: float = 0.0
    parenchyma_mean_hu: float = -870.0
    parenchyma_sigma: float = 50.0
    emph_mean_hu: float = -990.0
    emph_sigma: float = 35.0
    body_hu: float = -50.0
    blob_scale: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if min(self.slices, self.height, self.width) < 16:
            raise ConfigError("grid dims must all be >= 16")
        if not (0.0 <= self.emph_target_fraction <= 0.65):
            raise ConfigError("emph_target_fraction must lie in [0, 0.65]")
        if not (self.emph_mean_hu < -950.0 < self.parenchyma_mean_hu):
            raise ConfigError("need emph_mean_hu < -950 < parenchyma_mean_hu")
        if self.blob_scale <= 0:
            raise ConfigError("blob_scale must be positive")


# Default scanner suite. Biases and blur levels are chosen so that %-950
# under a fixed threshold differs by several points across scanners; the
# last profile is held out as the unseen scanner by default.
DEFAULT_PROFILES = (
    ScannerProfile("SYN-A", hu_bias=0.0, smoothing_sigma=0.0, noise_sigma=15.0),
    ScannerProfile("SYN-B", hu_bias=8.0, smoothing_sigma=0.5, noise_sigma=10.0),
    ScannerProfile("SYN-C", hu_bias=-8.0, smoothing_sigma=1.0, noise_sigma=20.0),
    ScannerProfile("SYN-D", hu_bias=4.0, smoothing_sigma=1.5, noise_sigma=12.0),
)
DEFAULT_OOD_TAG = "SYN-D"


def _lung_fields(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Two elliptical lungs per slice, tapered toward the first/last slice."""
    s, h, w = cfg.slices, cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h * rng.uniform(0.48, 0.52)
    ry = h * rng.uniform(0.30, 0.36)
    rx = w * rng.uniform(0.16, 0.20)
    cx_left = w * rng.uniform(0.26, 0.30)
    cx_right = w - cx_left
    mask = np.zeros((s, h, w), dtype=bool)
    zc = (s - 1) / 2.0
    zr = s / 2.0 + 1.0
    for z in range(s):
        taper = 1.0 - ((z - zc) / zr) ** 2
        if taper <= 0.05:
            continue
        scale = math.sqrt(taper)
        left = ((yy - cy) / (ry * scale)) ** 2 + ((xx - cx_left) / (rx * scale)) ** 2 <= 1.0
        right = ((yy - cy) / (ry * scale)) ** 2 + ((xx - cx_right) / (rx * scale)) ** 2 <= 1.0
        mask[z] = left | right
    return mask


def _emphysema_mask(cfg: PhantomConfig, lung: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Excursion set of smoothed 3D noise hitting the target lung fraction.

    The cut level is the empirical quantile of the smoothed field inside
    the lung, which lands the achievable fraction floor(f*n)/n; anything
    farther than 20% relative from the target is a generation failure.
    """
    target = cfg.emph_target_fraction
    if target == 0.0:
        return np.zeros_like(lung)
    n_lung = int(lung.sum())
    k = int(round(target * n_lung))
    if k < 1 or abs(k / n_lung - target) > 0.2 * target:
        raise GenerationError(
            f"target fraction {target} unreachable with {n_lung} lung voxels"
        )
    noise = rng.standard_normal(lung.shape)
    fieldvals = gaussian_filter(noise, sigma=cfg.blob_scale, mode="reflect")[lung]
    cut = np.partition(fieldvals, n_lung - k)[n_lung - k]
    out = np.zeros_like(lung)
    field = np.zeros(lung.shape)
    field[lung] = fieldvals
    out[lung] = field[lung] >= cut
    # exact count can overshoot on ties; continuous noise makes that a non-event
    return out


def generate_anatomy(cfg: PhantomConfig, scan_id: str = "latent") -> CtVolume:
    """Scanner-neutral latent volume with ground-truth masks."""
    rng = np.random.default_rng(cfg.seed)
    lung = _lung_fields(cfg, rng)
    if not lung.any():
        raise GenerationError("lung geometry came out empty")
    emph = _emphysema_mask(cfg, lung, rng)
    hu = np.full(lung.shape, cfg.body_hu, dtype=np.float64)
    parenchyma = lung & ~emph
    hu[parenchyma] = rng.normal(cfg.parenchyma_mean_hu, cfg.parenchyma_sigma,
                                int(parenchyma.sum()))
    hu[emph] = rng.normal(cfg.emph_mean_hu, cfg.emph_sigma, int(emph.sum()))
    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return CtVolume(hu=hu, lung_mask=lung, emph_mask=emph,
                    scanner="latent", scan_id=scan_id)


def apply_scanner(latent: CtVolume, profile: ScannerProfile, rng_seed) -> CtVolume:
    """Simulate acquisition: in-plane blur, HU bias, noise. Masks unchanged."""
    rng = np.random.default_rng(rng_seed)
    hu = latent.hu.astype(np.float64)
    if profile.smoothing_sigma > 0:
        radius = math.ceil(3 * profile.smoothing_sigma)
        for z in range(hu.shape[0]):
            hu[z] = gaussian_filter(hu[z], sigma=profile.smoothing_sigma,
                                    mode="reflect", radius=radius)
    hu = hu + profile.hu_bias
    if profile.noise_sigma > 0:
        hu = hu + rng.normal(0.0, profile.noise_sigma, hu.shape)
    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return CtVolume(hu=hu, lung_mask=latent.lung_mask.copy(),
                    emph_mask=latent.emph_mask.copy(),
                    scanner=profile.tag, scan_id=latent.scan_id)


@dataclass(frozen=True)
class SplitPlan:
    """Per-scanner scan counts for the non-OOD splits."""

    train: int
    val: int
    test_id: int

    @property
    def total(self) -> int:
        return self.train + self.val + self.test_id


@dataclass(frozen=True)
class DatasetSpec:
    """Everything build_dataset needs besides the output directory."""

    profiles: tuple[ScannerProfile, ...] = DEFAULT_PROFILES
    ood_tag: str = DEFAULT_OOD_TAG
    scans_per_scanner: int = 30
    split_plan: SplitPlan = field(default_factory=lambda: SplitPlan(20, 4, 6))
    never_smoker_fraction: float = 1.0 / 3.0
    max_target_fraction: float = 0.4
    target_exponent: float = 3.0
    min_target_fraction: float = 0.005
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    seed: int = 0

    def __post_init__(self):
        tags = [p.tag for p in self.profiles]
        if len(self.profiles) < 2:
            raise ConfigError("need at least 2 scanner profiles")
        if len(set(tags)) != len(tags):
            raise ConfigError("scanner tags must be unique")
        if self.ood_tag not in tags:
            raise ConfigError(f"OOD tag {self.ood_tag!r} not among profiles")
        if self.split_plan.total != self.scans_per_scanner:
            raise ConfigError(
                f"split plan {self.split_plan} does not sum to "
                f"{self.scans_per_scanner} scans per scanner"
            )
        if not (0.0 <= self.never_smoker_fraction <= 1.0):
            raise ConfigError("never_smoker_fraction must lie in [0,1]")
        if not (0.0 < self.max_target_fraction <= 0.65):
            raise ConfigError("max_target_fraction must lie in (0, 0.65]")


def _scan_rng(seed: int, profile_idx: int, scan_idx: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(profile_idx, scan_idx, stream))
    return np.random.default_rng(ss)


def build_dataset(spec: DatasetSpec, out_dir: str | Path) -> DatasetManifest:
    """Generate all scans, write volume files plus a manifest.

    Per scanner, the first floor(never_smoker_fraction * n) scans are
    emphysema-free never-smokers (the reference pool for scanner priors);
    the rest draw a heavy-tailed target fraction. OOD-profile scans all
    land in split test_ood. Fully deterministic for a given spec.
    """
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    records = []
    n = spec.scans_per_scanner
    n_never = int(spec.never_smoker_fraction * n)
    plan = spec.split_plan
    for pi, profile in enumerate(spec.profiles):
        is_ood = profile.tag == spec.ood_tag
        for si in range(n):
            never_smoker = si < n_never
            if never_smoker:
                target = 0.0
            else:
                u = _scan_rng(spec.seed, pi, si, 2).uniform()
                target = spec.max_target_fraction * u ** spec.target_exponent
                if target < spec.min_target_fraction:
                    # a handful of voxels is below the generator's
                    # resolution; such scans are effectively healthy
                    target = 0.0
            scan_id = f"{profile.tag}-{si:03d}"
            latent_seed = int(_scan_rng(spec.seed, pi, si, 0).integers(2**63))
            cfg = PhantomConfig(
                slices=spec.phantom.slices,
                height=spec.phantom.height,
                width=spec.phantom.width,
                emph_target_fraction=target,
                parenchyma_mean_hu=spec.phantom.parenchyma_mean_hu,
                parenchyma_sigma=spec.phantom.parenchyma_sigma,
                emph_mean_hu=spec.phantom.emph_mean_hu,
                emph_sigma=spec.phantom.emph_sigma,
                body_hu=spec.phantom.body_hu,
                blob_scale=spec.phantom.blob_scale,
                seed=latent_seed,
            )
            latent = generate_anatomy(cfg, scan_id=scan_id)
            volume = apply_scanner(latent, profile, _scan_rng(spec.seed, pi, si, 1))
            if is_ood:
                split = "test_ood"
            elif si < plan.train:
                split = "train"
            elif si < plan.train + plan.val:
                split = "val"
            else:
                split = "test_id"
            path = vol_dir / f"{scan_id}.ctph"
            write_volume(volume, path)
            records.append(
                ManifestRecord(
                    scan_id=scan_id,
                    scanner=profile.tag,
                    split=split,
                    path=path,
                    never_smoker=never_smoker,
                    pct950=pct_below_950(volume),
                )
            )
    manifest = DatasetManifest(records=records)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
