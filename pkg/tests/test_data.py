import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdaf.config import AugmentRanges, Config, shift_ranges
from pdaf.data import (SPLITS, build_dataset, class_pixel_weights, gen_scene, kind_for_label,
                       load_dataset, photometric_augment, read_pgm, read_ppm, save_dataset,
                       write_pgm, write_ppm)
from pdaf.errors import ConfigError, ParseError
from pdaf.tensor import RngStream


def _inside(shape, y: float, x: float, H: int, W: int) -> bool:
    """Scalar point-in-shape test, written independently of the vectorised masks."""
    p = shape.params
    if shape.kind == "circle":
        return math.hypot(y - p[0], x - p[1]) <= p[2] + 1e-9
    if shape.kind == "rectangle":
        return p[0] <= y <= p[2] and p[1] <= x <= p[3]
    if shape.kind == "triangle":
        pts = [(p[0], p[1]), (p[2], p[3]), (p[4], p[5])]
        signs = []
        for (ay, ax), (by, bx) in zip(pts, pts[1:] + pts[:1]):
            cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
            if abs(cross) > 1e-9:
                signs.append(cross > 0)
        return len(set(signs)) <= 1
    theta, offset, half = p
    # distance from the line through the centre shifted by ``offset`` along the normal
    d = (x - W / 2) * math.cos(theta) + (y - H / 2) * math.sin(theta) - offset
    return abs(d) <= half + 1e-9


def _rasterize(scene, H, W):
    labels = np.zeros((H, W), dtype=np.uint8)
    for y in range(H):
        for x in range(W):
            for shape in scene.shapes:
                if _inside(shape, float(y), float(x), H, W):
                    labels[y, x] = shape.label
    return labels


def test_empty_scene_is_background():
    s = gen_scene(RngStream(1), 32, 32, 5, 0)
    assert not s.labels.any()
    assert s.image.shape == (3, 32, 32)


@pytest.mark.parametrize("seed", range(10))
def test_labels_match_independent_rasterizer(seed):
    H = W = 32
    scene = gen_scene(RngStream(seed), H, W, 5, 5)
    again = gen_scene(RngStream(seed), H, W, 5, 5)
    assert np.array_equal(scene.labels, again.labels)
    oracle = _rasterize(again, H, W)
    assert np.array_equal(oracle, scene.labels), np.argwhere(oracle != scene.labels)
    for shape in scene.shapes:
        assert shape.kind == kind_for_label(shape.label)


def test_scene_determinism_bytes():
    a = gen_scene(RngStream(42), 32, 32)
    b = gen_scene(RngStream(42), 32, 32)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_scene_errors():
    with pytest.raises(ConfigError):
        gen_scene(RngStream(0), 32, 32, 1)
    with pytest.raises(ConfigError):
        gen_scene(RngStream(0), 8, 32)


def test_identity_augment_is_exact():
    img = gen_scene(RngStream(3), 32, 32).image
    out = photometric_augment(img, RngStream(9), AugmentRanges.identity())
    assert np.array_equal(out, img)


def _only(**kw):
    base = AugmentRanges.identity()
    return AugmentRanges(**{**base.__dict__, **kw})


def test_brightness_arithmetic_and_clamp():
    img = np.full((3, 2, 2), 0.25)
    img[:, 0, 0] = 0.9
    out = photometric_augment(img, RngStream(0), _only(brightness=(2.0, 2.0)))
    assert out[0, 1, 1] == 0.5
    assert out[0, 0, 0] == 1.0


def test_augment_keeps_shape_and_range():
    img = gen_scene(RngStream(4), 32, 32).image
    for ranges in (AugmentRanges(), shift_ranges()):
        out = photometric_augment(img, RngStream(5), ranges)
        assert out.shape == img.shape
        assert out.min() >= 0 and out.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_pgm_round_trip(seed, h, w):
    labels = np.random.default_rng(seed).integers(0, 256, size=(h, w)).astype(np.uint8)
    assert np.array_equal(read_pgm(write_pgm(labels)), labels)


def test_ppm_quantization_rule():
    img = np.full((3, 1, 1), 0.5)
    data = write_ppm(img)
    assert data[-3:] == bytes([128, 128, 128])
    back = read_ppm(data)
    assert np.all(np.abs(back - img) <= 0.5 / 255 + 1e-12)


def test_ppm_header_comments_accepted():
    data = b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 51])
    np.testing.assert_allclose(read_ppm(data)[:, 0, 0], [1.0, 0.0, 0.2])


def test_malformed_files_raise_parse_error_with_offset():
    good = write_ppm(np.zeros((3, 2, 2)))
    with pytest.raises(ParseError) as exc:
        read_ppm(b"P5" + good[2:])
    assert exc.value.offset == 0
    with pytest.raises(ParseError) as exc:
        read_ppm(good[:-1])
    assert exc.value.offset is not None
    with pytest.raises(ParseError):
        read_pgm(b"P5\n2 x\n255\n")
    with pytest.raises(ParseError):
        read_pgm(b"")


def test_default_split_sizes_and_disjoint_seeds():
    cfg = Config(train_size=200, val_size=40, test_size=40, image_size=16)
    splits = build_dataset(RngStream(0), cfg)
    assert [len(splits[s]) for s in SPLITS] == [200, 40, 40]
    seeds = [s.seed for name in SPLITS for s in splits[name]]
    assert len(seeds) == len(set(seeds))
    assert {s.domain_tag for s in splits.shifted_test} == {"shifted-test"}


def test_overlapping_seed_ranges_rejected():
    with pytest.raises(ConfigError):
        Config(train_size=10, val_seed_offset=5).validate()


def test_shift_equal_to_train_regime_is_a_control(tiny_config):
    cfg = tiny_config.with_overrides(["shift_augment.brightness=[0.7,1.3]",
                                      "shift_augment.contrast=[0.7,1.3]",
                                      "shift_augment.saturation=[0.5,1.5]",
                                      "shift_augment.gamma=[0.8,1.25]",
                                      "shift_augment.noise=[0,0.02]"])
    assert cfg.shift_augment == cfg.train_augment


def test_dataset_reproducible_and_disk_round_trip(tiny_config, tmp_path):
    a = build_dataset(RngStream(3), tiny_config)
    b = build_dataset(RngStream(3), tiny_config)
    assert a.digest() == b.digest()
    manifest = save_dataset(a, tmp_path, tiny_config)
    loaded, meta = load_dataset(manifest)
    assert meta["digest"] == a.digest() == loaded.digest()
    for name in SPLITS:
        for x, y in zip(a[name], loaded[name]):
            assert np.array_equal(x.image, y.image)
            assert np.array_equal(x.labels, y.labels)


def test_class_weights_inverse_frequency():
    class S:
        def __init__(self, labels):
            self.labels = labels
    labels = np.array([[0, 0, 0, 1]], dtype=np.uint8)
    w = class_pixel_weights([S(labels)], 3, 0.2, 5.0)
    # freq (0.75, 0.25, 0) -> 1/(3 f) = (0.444, 1.333, inf -> clip)
    np.testing.assert_allclose(w, [1 / 2.25, 4 / 3, 5.0])
