"""Core domain types and file IO.

Volume file layout (all little-endian):

    magic "CTPH" | u16 version=1 | u32 S, H, W
    S*H*W int16 HU values (row-major within a slice, slice-major)
    S*H*W u8 lung mask | S*H*W u8 emphysema mask
    u32 metadata length | UTF-8 key=value lines (scan_id, scanner)

Manifest files are tab-separated, one record per line:

    scan_id  scanner  split  path  never_smoker(0/1)  pct950(decimal or "-")

Lines starting with '#' are comments. Paths are stored relative to the
manifest's directory and resolved on read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputError,
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
    VolumeFormatError,
)

MAGIC = b"CTPH"
FORMAT_VERSION = 1
HU_MIN = -1024
HU_MAX = 3071

SPLITS = ("train", "val", "test_id", "test_ood")


def _check_grids(hu: np.ndarray, lung: np.ndarray, emph: np.ndarray, ndim: int) -> None:
    if hu.ndim != ndim or lung.shape != hu.shape or emph.shape != hu.shape:
        raise DimensionMismatchError(
            f"hu/lung/emph grids must all be {ndim}-D with identical shapes, "
            f"got {hu.shape}, {lung.shape}, {emph.shape}"
        )
    if hu.dtype != np.int16:
        raise ValueError(f"hu must be int16, got {hu.dtype}")
    if hu.size and (hu.min() < HU_MIN or hu.max() > HU_MAX):
        raise ValueError(f"hu values outside [{HU_MIN}, {HU_MAX}]")
    if np.any(emph & ~lung):
        raise ValueError("emph_mask contains voxels outside lung_mask")


@dataclass(frozen=True)
class CtVolume:
    """One scan: HU grid plus lung and ground-truth emphysema masks.

    All grids are (slices, H, W); masks are boolean. Instances are
    immutable and safe to share across threads.
    """

    hu: np.ndarray
    lung_mask: np.ndarray
    emph_mask: np.ndarray
    scanner: str
    scan_id: str

    def __post_init__(self):
        object.__setattr__(self, "hu", np.ascontiguousarray(self.hu, dtype=np.int16))
        object.__setattr__(self, "lung_mask", np.ascontiguousarray(self.lung_mask, dtype=bool))
        object.__setattr__(self, "emph_mask", np.ascontiguousarray(self.emph_mask, dtype=bool))
        _check_grids(self.hu, self.lung_mask, self.emph_mask, ndim=3)
        if not self.scan_id:
            raise ValueError("scan_id must be non-empty")
        if not self.scanner:
            raise ValueError("scanner tag must be non-empty")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.hu.shape

    def slice(self, index: int) -> "CtSlice":
        return CtSlice(
            hu=self.hu[index],
            lung_mask=self.lung_mask[index],
            emph_mask=self.emph_mask[index],
            scan_id=self.scan_id,
            index=index,
        )


@dataclass(frozen=True)
class CtSlice:
    """A single axial slice extracted from a CtVolume."""

    hu: np.ndarray
    lung_mask: np.ndarray
    emph_mask: np.ndarray
    scan_id: str
    index: int

    def __post_init__(self):
        object.__setattr__(self, "hu", np.ascontiguousarray(self.hu, dtype=np.int16))
        object.__setattr__(self, "lung_mask", np.ascontiguousarray(self.lung_mask, dtype=bool))
        object.__setattr__(self, "emph_mask", np.ascontiguousarray(self.emph_mask, dtype=bool))
        _check_grids(self.hu, self.lung_mask, self.emph_mask, ndim=2)


@dataclass(frozen=True)
class ManifestRecord:
    scan_id: str
    scanner: str
    split: str
    path: Path
    never_smoker: bool
    pct950: float | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not self.scan_id or not self.scanner:
            raise ValueError("scan_id and scanner must be non-empty")


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.scan_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate scan_ids in manifest")
        train_val = {r.scanner for r in self.records if r.split in ("train", "val")}
        ood = {r.scanner for r in self.records if r.split == "test_ood"}
        if train_val & ood:
            raise ValueError(f"test_ood scanners also appear in train/val: {train_val & ood}")

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def scanners(self) -> list[str]:
        seen = {}
        for r in self.records:
            seen.setdefault(r.scanner, None)
        return list(seen)

    def by_id(self, scan_id: str) -> ManifestRecord:
        for r in self.records:
            if r.scan_id == scan_id:
                return r
        raise KeyError(scan_id)


# ---------------------------------------------------------------------------
# Volume file IO
# ---------------------------------------------------------------------------

def write_volume(v: CtVolume, path: str | Path) -> None:
    """Serialize a volume; read_volume(write_volume(v)) is bit-exact."""
    s, h, w = v.shape
    meta = f"scan_id={v.scan_id}\nscanner={v.scanner}\n".encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HIII", FORMAT_VERSION, s, h, w))
        f.write(v.hu.astype("<i2").tobytes())
        f.write(v.lung_mask.astype(np.uint8).tobytes())
        f.write(v.emph_mask.astype(np.uint8).tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def read_volume(path: str | Path) -> CtVolume:
    with open(path, "rb") as f:
        blob = f.read()
    header_size = 4 + struct.calcsize("<HIII")
    if len(blob) < header_size:
        raise MalformedHeaderError(f"{path}: file shorter than header")
    if blob[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic bytes {blob[:4]!r}")
    version, s, h, w = struct.unpack_from("<HIII", blob, 4)
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported format version {version}")
    if s == 0 or h == 0 or w == 0:
        raise DimensionMismatchError(f"{path}: zero dimension in header ({s},{h},{w})")
    n = s * h * w
    offset = header_size
    payload = 2 * n + n + n
    if len(blob) < offset + payload + 4:
        raise TruncatedPayloadError(f"{path}: payload truncated")
    hu = np.frombuffer(blob, dtype="<i2", count=n, offset=offset).reshape(s, h, w)
    offset += 2 * n
    lung = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset).reshape(s, h, w)
    offset += n
    emph = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset).reshape(s, h, w)
    offset += n
    (meta_len,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if len(blob) < offset + meta_len:
        raise TruncatedPayloadError(f"{path}: metadata truncated")
    if len(blob) > offset + meta_len:
        raise VolumeFormatError(f"{path}: trailing bytes after metadata")
    if lung.max(initial=0) > 1 or emph.max(initial=0) > 1:
        raise VolumeFormatError(f"{path}: mask bytes must be 0 or 1")
    meta = {}
    for line in blob[offset : offset + meta_len].decode("utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            meta[key] = value
    if "scan_id" not in meta or "scanner" not in meta:
        raise VolumeFormatError(f"{path}: metadata missing scan_id/scanner")
    return CtVolume(
        hu=hu.astype(np.int16),
        lung_mask=lung.astype(bool),
        emph_mask=emph.astype(bool),
        scanner=meta["scanner"],
        scan_id=meta["scan_id"],
    )


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent
    lines = ["# scan_id\tscanner\tsplit\tpath\tnever_smoker\tpct950"]
    for r in manifest.records:
        try:
            rel = Path(r.path).relative_to(base)
        except ValueError:
            rel = Path(r.path)
        pct = "-" if r.pct950 is None else format(r.pct950, ".17g")
        lines.append(
            f"{r.scan_id}\t{r.scanner}\t{r.split}\t{rel.as_posix()}\t"
            f"{int(r.never_smoker)}\t{pct}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields")
        scan_id, scanner, split, rel, smoker, pct = parts
        records.append(
            ManifestRecord(
                scan_id=scan_id,
                scanner=scanner,
                split=split,
                path=(base / rel).resolve() if not Path(rel).is_absolute() else Path(rel),
                never_smoker=bool(int(smoker)),
                pct950=None if pct == "-" else float(pct),
            )
        )
    return DatasetManifest(records=records)


def load_record_volume(record: ManifestRecord) -> CtVolume:
    return read_volume(record.path)


# ---------------------------------------------------------------------------
# Measurements and sampling
# ---------------------------------------------------------------------------

def percent_emphysema(v: CtVolume, mask: np.ndarray) -> float:
    """Emphysema volume as a percentage of full lung volume.

    `mask` is any binary grid with the volume's shape; only its
    intersection with the lung counts.
    """
    if mask.shape != v.shape:
        raise DimensionMismatchError(f"mask shape {mask.shape} != volume shape {v.shape}")
    lung_count = int(v.lung_mask.sum())
    if lung_count == 0:
        raise DegenerateInputError(f"{v.scan_id}: empty lung mask")
    hit = int(np.count_nonzero(np.asarray(mask, dtype=bool) & v.lung_mask))
    return 100.0 * hit / lung_count


def lung_slice_indices(v: CtVolume) -> np.ndarray:
    """Indices of axial slices containing at least one lung voxel."""
    return np.flatnonzero(v.lung_mask.any(axis=(1, 2)))


def sample_slice_indices(v: CtVolume, n: int, rng_seed) -> np.ndarray:
    """Indices of up to n distinct lung-containing axial slices.

    Deterministic for a given seed; indices come back in ascending order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    available = lung_slice_indices(v)
    if available.size == 0:
        raise DegenerateInputError(f"{v.scan_id}: no slice contains lung")
    rng = np.random.default_rng(rng_seed)
    k = min(n, available.size)
    return np.sort(rng.choice(available, size=k, replace=False))


def sample_slices(v: CtVolume, n: int, rng_seed) -> list[CtSlice]:
    """Sample up to n distinct lung-containing axial slices (see
    sample_slice_indices for the selection contract)."""
    return [v.slice(int(i)) for i in sample_slice_indices(v, n, rng_seed)]


def with_scanner(v: CtVolume, scanner: str) -> CtVolume:
    return replace(v, scanner=scanner)
