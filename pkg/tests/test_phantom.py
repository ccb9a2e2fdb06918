import math

import numpy as np
import pytest
from scipy import ndimage
from skimage.morphology import skeletonize

from shapepu.phantom import (
    UNLABELED,
    PhantomError,
    PhantomSpec,
    _disk,
    draw_scribbles,
    expected_class_fractions,
    generate_phantom,
    oracle_posteriors,
    true_unlabeled_ratios,
    unlabeled_ratios,
)

SPEC = PhantomSpec()


def _band(shape, border=8):
    band = np.zeros(shape, dtype=bool)
    band[:border] = band[-border:] = True
    band[:, :border] = band[:, -border:] = True
    return band


def _naive_ratios(mask, scribble, m):
    counts = [0] * (m + 1)
    n = 0
    for y in range(mask.shape[0]):
        for x in range(mask.shape[1]):
            if scribble[y, x] == UNLABELED:
                counts[mask[y, x]] += 1
                n += 1
    return np.array(counts) / n


def test_noiseless_image_piecewise_constant():
    spec = PhantomSpec(sigmas=(0.0, 0.0, 0.0, 0.0), bias_amplitude=0.0)
    s = generate_phantom(spec, 3)
    np.testing.assert_array_equal(s.image, np.asarray(spec.means)[s.mask])


def test_deterministic_bytes():
    a, b = generate_phantom(SPEC, 7), generate_phantom(SPEC, 7)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.scribble.tobytes() == b.scribble.tobytes()
    c = generate_phantom(SPEC, 8)
    assert a.image.tobytes() != c.image.tobytes()


def test_all_classes_present_and_in_frame():
    for i in range(50):
        s = generate_phantom(SPEC, i)
        assert set(np.unique(s.mask)) == {0, 1, 2, 3}
        assert not s.mask[_band(s.mask.shape)].any()


def test_class_frequencies_match_geometry_oracle():
    expected = expected_class_fractions(SPEC)
    freq = np.zeros(4)
    n = 1000
    for i in range(n):
        freq += np.bincount(generate_phantom(SPEC, i).mask.ravel(), minlength=4) / SPEC.size**2
    np.testing.assert_allclose(freq / n, expected, atol=0.03)


def test_spec_that_cannot_fit():
    with pytest.raises(PhantomError):
        PhantomSpec(size=40)
    with pytest.raises(PhantomError):
        PhantomSpec(num_classes=4)


def test_geometry_scales_with_size():
    s = generate_phantom(PhantomSpec(size=80), 0)
    assert s.image.shape == (80, 80)
    assert set(np.unique(s.mask)) == {0, 1, 2, 3}


def test_negative_index_rejected():
    with pytest.raises(PhantomError):
        generate_phantom(SPEC, -1)


# ---------------------------------------------------------------- scribbles


def test_single_class_mask():
    mask = np.zeros((40, 40), dtype=np.uint8)
    scr = draw_scribbles(mask, np.random.default_rng(0))
    labeled = scr != UNLABELED
    assert labeled.any()
    assert (scr[labeled] == 0).all()


def test_scribbles_consistent_and_sparse():
    for i in range(100):
        s = generate_phantom(SPEC, i)
        labeled = s.scribble != UNLABELED
        np.testing.assert_array_equal(s.scribble[labeled], s.mask[labeled])
        assert 0.005 <= labeled.mean() <= 0.05


def test_scribble_curve_properties():
    eight = np.ones((3, 3), dtype=bool)
    for i in range(30):
        s = generate_phantom(SPEC, i)
        band = _band(s.mask.shape)
        for c in range(4):
            region = s.mask == c
            if c == 0:
                region &= band
            eroded = ndimage.binary_erosion(region, structure=_disk(2), border_value=0)
            curve = s.scribble == c
            n = int(curve.sum())
            assert n >= 1
            # strictly inside the eroded region
            assert eroded[curve].all()
            # one connected curve
            assert ndimage.label(curve, structure=eight)[1] == 1
            # 1 pixel wide: no 2x2 block fully labeled
            blocks = curve[:-1, :-1] & curve[1:, :-1] & curve[:-1, 1:] & curve[1:, 1:]
            assert not blocks.any()
            length = max(int(skeletonize(eroded).sum()), math.sqrt(4 * eroded.sum() / math.pi))
            assert math.ceil(0.2 * length) <= n <= max(math.ceil(0.2 * length), math.floor(0.6 * length))


def test_tiny_region_falls_back_to_single_pixel():
    mask = np.zeros((30, 30), dtype=np.uint8)
    mask[14:17, 14:17] = 1
    warns: list = []
    scr = draw_scribbles(mask, np.random.default_rng(1), warnings=warns)
    assert (scr == 1).sum() == 1
    assert tuple(np.argwhere(scr == 1)[0]) == (15, 15)
    assert any("class 1" in w for w in warns)


def test_absent_class_gets_no_scribble():
    mask = np.zeros((40, 40), dtype=np.uint8)
    mask[10:30, 10:30] = 2
    scr = draw_scribbles(mask, np.random.default_rng(2))
    assert not (scr == 1).any()
    assert (scr == 2).any()


# ---------------------------------------------------------------- ratios


def test_ratios_half_half():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[:, 2:] = 1
    scr = np.full((4, 4), UNLABELED, dtype=np.uint8)
    np.testing.assert_allclose(unlabeled_ratios(mask, scr, 1), [0.5, 0.5])


def test_ratios_class_fully_scribbled():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[0, :] = 1
    scr = np.full((4, 4), UNLABELED, dtype=np.uint8)
    scr[0, :] = 1
    np.testing.assert_allclose(unlabeled_ratios(mask, scr, 1), [1.0, 0.0])


def test_ratios_match_naive_recount_and_simplex():
    for i in range(10):
        s = generate_phantom(SPEC, i)
        r = true_unlabeled_ratios(s, 3)
        np.testing.assert_allclose(r, _naive_ratios(s.mask, s.scribble, 3), rtol=0, atol=1e-15)
        assert abs(r.sum() - 1) < 1e-9
        np.testing.assert_allclose(s.ratios, r)


def test_ratios_need_unlabeled_pixels():
    mask = np.zeros((2, 2), dtype=np.uint8)
    with pytest.raises(ValueError):
        unlabeled_ratios(mask, mask.copy(), 1)


def test_oracle_posteriors_on_simplex():
    s = generate_phantom(SPEC, 0)
    post = oracle_posteriors(SPEC, 0, s.image, np.full(4, 0.25))
    assert post.shape == (SPEC.size, SPEC.size, 4)
    np.testing.assert_allclose(post.sum(axis=-1), 1.0, atol=1e-12)
    # Bayes rule picks the true class well above chance (0.25) on the foreground
    fg = s.mask > 0
    assert (post.argmax(-1)[fg] == s.mask[fg]).mean() > 0.6
