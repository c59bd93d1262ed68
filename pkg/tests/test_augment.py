import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfutissue.augment import (AFFINE, PERSPECTIVE, PHOTOMETRIC, REGISTRY, AugmentationPipeline,
                               TransformSpec, apply, apply_arrays, build_default_pipeline,
                               minority_oversample)
from dfutissue.data import FIBRIN, RgbImage, TissueMask
from dfutissue.synthetic import synthetic_pair


def _sample(rng, size=(32, 32)):
    return synthetic_pair(rng, size=size, classes=(1, 2, 3))


def test_default_pipeline_layout():
    p = build_default_pipeline()
    assert len(p.sets) == 4
    assert len(p.transforms()) == 15
    for i, s in enumerate(p.sets):
        for t in s:
            if t.kind == AFFINE:
                assert i in (0, 1)
    assert all(t.kind == PHOTOMETRIC for t in p.sets[3])


def test_every_registered_transform_supports_its_kind(rng):
    img, mask = _sample(rng)
    for name, t in REGISTRY.items():
        p = t.sample(rng, img.shape, {})
        out = t.image(np.asarray(img.pixels), p)
        assert out.dtype == np.uint8 and out.ndim == 3
        lab = t.mask(np.asarray(mask.labels), p)
        assert lab.shape == out.shape[:2]


def test_firing_rates_within_three_sigma():
    p = build_default_pipeline()
    rng = np.random.default_rng(0)
    img = np.zeros((8, 8, 3), np.uint8)
    lab = np.zeros((8, 8), np.uint8)
    n = 10_000
    counts = {t.name: 0 for t in p.transforms()}
    for _ in range(n):
        fired = []
        apply_arrays(p, img, lab, rng, fired)
        for name in fired:
            counts[name] += 1
    for t in p.transforms():
        sigma = np.sqrt(n * t.probability * (1 - t.probability))
        assert abs(counts[t.name] - n * t.probability) <= 3 * sigma, t.name


def test_photometric_transforms_never_touch_the_mask(rng):
    pipe = AugmentationPipeline([[t for t in build_default_pipeline().transforms() if t.kind == PHOTOMETRIC]])
    pipe = pipe.with_probability(1.0)
    img, mask = _sample(rng)
    for _ in range(1000):
        _, out = apply(pipe, img, mask, rng)
        assert np.array_equal(out.labels, mask.labels)


@pytest.mark.parametrize("name", ["horizontal_flip", "vertical_flip", "transpose"])
def test_flip_involution(rng, name):
    img, mask = _sample(rng, (20, 20))
    pipe = AugmentationPipeline([[TransformSpec(name, AFFINE, 1.0)]])
    once = apply(pipe, img, mask, rng)
    twice = apply(pipe, *once, rng)
    assert np.array_equal(twice[0].pixels, img.pixels)
    assert np.array_equal(twice[1].labels, mask.labels)


@settings(max_examples=25)
@given(seed=st.integers(0, 2**20))
def test_geometric_transforms_only_produce_existing_labels(seed):
    r = np.random.default_rng(seed)
    img, mask = _sample(r)
    geo = [t for t in build_default_pipeline().transforms() if t.kind != PHOTOMETRIC]
    out_img, out_mask = apply(AugmentationPipeline([geo]), img, mask, r)
    assert set(np.unique(out_mask.labels)) <= set(np.unique(mask.labels)) | {0}
    assert out_img.shape == img.shape == out_mask.shape


@pytest.mark.parametrize("name,kind", [("rotate", AFFINE), ("scale", AFFINE), ("shift", AFFINE),
                                       ("perspective", PERSPECTIVE), ("rotate90", AFFINE)])
def test_geometry_is_shared_between_image_and_mask(name, kind):
    # encode the label in the image so one can be read off the other
    r = np.random.default_rng(3)
    lab = r.integers(0, 4, size=(24, 24)).astype(np.uint8)
    lab = np.kron(lab[::4, ::4], np.ones((4, 4), np.uint8))[:24, :24]
    img = np.repeat((lab * 60)[..., None], 3, axis=2).astype(np.uint8)
    t = REGISTRY[name]
    params = {"limit": 30.0} if name == "rotate" else {}
    for _ in range(20):
        p = t.sample(r, lab.shape, params)
        warped_lab = t.mask(lab, p)
        warped_nn = t.mask(img[..., 0], p)
        assert np.array_equal(warped_nn, warped_lab * 60)


def test_zero_probability_is_identity(rng):
    img, mask = _sample(rng)
    fired = []
    out = apply(build_default_pipeline().with_probability(0.0), img, mask, rng, fired)
    assert fired == []
    assert np.array_equal(out[0].pixels, img.pixels) and np.array_equal(out[1].labels, mask.labels)


def test_pipeline_json_round_trip():
    p = build_default_pipeline()
    q = AugmentationPipeline.from_json(p.to_json())
    assert q.to_dict() == p.to_dict()
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    img, mask = _sample(np.random.default_rng(1))
    a, b = apply(p, img, mask, r1), apply(q, img, mask, r2)
    assert np.array_equal(a[0].pixels, b[0].pixels)


def test_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec("nope", AFFINE, 0.5)
    with pytest.raises(ValueError):
        TransformSpec("rotate", PHOTOMETRIC, 0.5)
    with pytest.raises(ValueError):
        TransformSpec("rotate", AFFINE, 1.5)


def test_apply_rejects_size_mismatch(rng):
    with pytest.raises(ValueError):
        apply(build_default_pipeline(), RgbImage(np.zeros((4, 4, 3), np.uint8)), TissueMask(np.zeros((5, 4))), rng)


def test_extreme_parameters_stay_in_range(rng):
    img, mask = _sample(rng)
    pipe = AugmentationPipeline([[
        TransformSpec("shift", AFFINE, 1.0, {"max_fraction": 5.0}),
        TransformSpec("brightness", PHOTOMETRIC, 1.0, {"limit": 10.0}),
        TransformSpec("gamma", PHOTOMETRIC, 1.0, {"range": [-1.0, 0.0]}),
    ]])
    out_img, out_mask = apply(pipe, img, mask, rng)
    assert out_img.pixels.dtype == np.uint8
    assert out_mask.labels.max() <= 3


def _pairs_with_fibrin(count, with_fibrin):
    r = np.random.default_rng(0)
    pairs = []
    for i in range(count):
        classes = (1, 2) if i < with_fibrin else (2,)
        img, mask = synthetic_pair(r, size=(24, 24), classes=classes, name=f"p{i}")
        pairs.append((img, mask))
    return pairs


def test_oversample_counts():
    pairs = _pairs_with_fibrin(10, 4)
    out = minority_oversample(pairs, build_default_pipeline(), factor=3)
    assert len(out) == 18
    assert sum(FIBRIN in m.present_classes() for _, m in out) == 12
    assert len(minority_oversample(pairs, build_default_pipeline(), factor=1)) == 10


def test_oversample_determinism_and_names():
    pairs = _pairs_with_fibrin(6, 3)
    a = minority_oversample(pairs, build_default_pipeline(), 2, seed=11)
    b = minority_oversample(pairs, build_default_pipeline(), 2, seed=11)
    assert [i.name for i, _ in a] == [i.name for i, _ in b]
    assert all(np.array_equal(x[1].labels, y[1].labels) for x, y in zip(a, b))
    assert "p0#aug1" in {i.name for i, _ in a}


def test_oversample_factor_validation():
    with pytest.raises(ValueError):
        minority_oversample([], build_default_pipeline(), 0)
