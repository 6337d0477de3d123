import hypothesis
import numpy as np
import pytest

np.seterr(all="raise", under="ignore")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

# Small trunk for tests that exercise plumbing rather than the published widths.
TINY_FILTERS = (2, 2, 3, 3, 4, 4, 5, 5)


@pytest.fixture
def tiny_config():
    from rrwave.model import ModelConfig

    return ModelConfig(w=16, residual_filters=TINY_FILTERS)


def clean_windows(n, seed=0, w=16, rr_range=(8.0, 30.0)):
    """``n`` windows, each cut from its own noiseless synthetic record."""
    from rrwave.signal_io import SyntheticSpec, resample, slide_windows, synthesize

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        spec = SyntheticSpec(duration_s=w, hr_bpm=float(rng.uniform(60, 100)), rr_bpm=float(rng.uniform(*rr_range)),
                             riiv_depth=0.15, riav_depth=0.15, rifv_depth=0.05, seed=i, fs=50)
        out += slide_windows(resample(synthesize(spec, f"c{i:02d}"), 50), w)
    return out
