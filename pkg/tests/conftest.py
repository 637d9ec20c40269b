"""Shared fixtures: small composed datasets reused across test modules."""

import pytest

from seedcl.rng import derive_stream
from seedcl.synthgen import generate_dataset, generate_toy_cutouts, group_cutouts


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """3 toy classes x 6 images at 32 px: 12 train + 6 val records."""
    root = tmp_path_factory.mktemp("smallset")
    cutouts = generate_toy_cutouts(3, 6, derive_stream(7, "toy"), base_size=6)
    return generate_dataset(
        group_cutouts(cutouts),
        per_class=6,
        seeds_per_image=8,
        canvas_size=(32, 32),
        split_ratio=(2.0 / 3.0, 1.0 / 3.0),
        out_dir=root,
        master_seed=7,
    )
