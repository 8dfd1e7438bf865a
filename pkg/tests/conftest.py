import numpy as np
import pytest

from morphiris import synthgen
from morphiris.codec import encode
from morphiris.normalization import unwrap
from morphiris.segmentation import segment


def eye(subject=0, side="L", index=0, seed=11, **kw):
    spec = synthgen.capture_spec(seed, subject, side, index, **kw)
    img, geom = synthgen.render_eye(spec)
    return spec, img, geom


def code_of(img, wavelength=24.0):
    mask, geom = segment(img)
    return encode(unwrap(img, geom, occlusion_mask=mask), wavelength)


@pytest.fixture(scope="session")
def smoke_set():
    """10 subjects x 4 captures of the left eye: (subject, index) -> (spec, image)."""
    out = {}
    for s in range(10):
        for k in range(4):
            spec, img, _ = eye(s, "L", k, seed=3)
            out[(s, k)] = (spec, img)
    return out


@pytest.fixture(scope="session")
def smoke_codes(smoke_set):
    return {key: code_of(img) for key, (_, img) in smoke_set.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
