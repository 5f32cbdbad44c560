import pytest

from emphyseg.phantom import (
    DatasetSpec,
    PhantomConfig,
    ScannerProfile,
    SplitPlan,
    build_dataset,
)


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    """Small four-scanner dataset with the default intensity profiles.

    8 scans per scanner at 16x32x32, half of them never-smokers, so the
    scanner-prior machinery has a real reference pool to chew on.
    """
    out = tmp_path_factory.mktemp("suite")
    spec = DatasetSpec(
        scans_per_scanner=8,
        split_plan=SplitPlan(4, 2, 2),
        never_smoker_fraction=0.5,
        phantom=PhantomConfig(slices=16, height=32, width=32),
        seed=7,
    )
    manifest = build_dataset(spec, out)
    return manifest, out


@pytest.fixture(scope="session")
def trainset(tmp_path_factory):
    """Tiny three-scanner dataset sized for fast end-to-end training tests."""
    out = tmp_path_factory.mktemp("trainset")
    profiles = (
        ScannerProfile("SYN-A", hu_bias=0.0, smoothing_sigma=0.0, noise_sigma=15.0),
        ScannerProfile("SYN-B", hu_bias=8.0, smoothing_sigma=0.5, noise_sigma=10.0),
        ScannerProfile("SYN-D", hu_bias=4.0, smoothing_sigma=1.5, noise_sigma=12.0),
    )
    spec = DatasetSpec(
        profiles=profiles,
        ood_tag="SYN-D",
        scans_per_scanner=6,
        split_plan=SplitPlan(3, 2, 1),
        never_smoker_fraction=1.0 / 3.0,
        phantom=PhantomConfig(slices=16, height=16, width=16),
        seed=3,
    )
    manifest = build_dataset(spec, out)
    return manifest, out
