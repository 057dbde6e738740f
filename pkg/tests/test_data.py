import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cosimnet.data import (
    Dataset,
    ImagePair,
    SynthConfig,
    generate_item,
    generate_synthetic,
    load_dataset,
    preprocess,
    read_mask,
    render_scene,
    save_dataset,
    split_dataset,
    warp_viewpoint,
)
from cosimnet.errors import DataError, InvalidArgument
from cosimnet.losses import ChangeMask


def small(**kw):
    base = dict(size=(32, 32), count=6, object_size=(6, 12), seed=4)
    base.update(kw)
    return SynthConfig(**base)


def test_no_change_means_empty_masks():
    ds = generate_synthetic(small(p_change=0.0, brightness=0.3, noise=0.05, shadow=0.5))
    assert all(not it.mask.changed.any() for it in ds.items)


def test_generation_is_deterministic():
    a = generate_synthetic(small())
    b = generate_synthetic(small())
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.pair.t0, y.pair.t0) and np.array_equal(x.pair.t1, y.pair.t1)
        assert np.array_equal(x.mask.y, y.mask.y)
        assert x.provenance == y.provenance


def test_items_do_not_depend_on_count():
    few = generate_synthetic(small(count=2))
    many = generate_synthetic(small(count=5))
    assert np.array_equal(few.items[1].pair.t1, many.items[1].pair.t1)
    assert np.array_equal(generate_item(small(), 3).pair.t0, many.items[3].pair.t0)


def test_inserted_square_footprint():
    bg = np.full((3, 16, 16), 0.5)
    square = {"id": 0, "kind": "rect", "y": 3, "x": 5, "h": 4, "w": 4, "color": [1.0, 0.0, 0.0]}
    _, ids0 = render_scene(bg, [])
    img1, ids1 = render_scene(bg, [square])
    expected = np.zeros((16, 16), bool)
    expected[3:7, 5:9] = True
    assert np.array_equal(ids0 != ids1, expected)
    assert np.all(img1[:, expected] == np.array([[1.0], [0.0], [0.0]]))


def test_images_in_range_and_masks_binary():
    ds = generate_synthetic(small(brightness=0.3, noise=0.05, shadow=0.5, rotation=10.0,
                                  zoom=(1.0, 1.3), translation=8.0))
    for it in ds.items:
        assert it.pair.t0.min() >= 0 and it.pair.t1.max() <= 1
        assert set(np.unique(it.mask.y)) <= {0, 1}
        assert {"edits", "rotation_deg", "zoom", "translation_px", "brightness_delta",
                "noise_sigma", "shadow_opacity"} <= set(it.provenance)


@pytest.mark.parametrize("kw", [dict(size=(30, 32)), dict(p_change=1.5), dict(noise=0.1),
                                dict(zoom=(0.9, 1.0)), dict(rotation=12.0), dict(translation=9.0)])
def test_invalid_synth_config(kw):
    with pytest.raises(InvalidArgument):
        generate_synthetic(small(**kw))


def test_warp_identity_is_exact():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 12, 10))
    mask = ChangeMask((rng.uniform(size=(12, 10)) < 0.5).astype(np.uint8))
    out, m = warp_viewpoint(img, mask)
    assert np.array_equal(out, img) and np.array_equal(m.y, mask.y)


def test_warp_zoom_fixes_centre():
    img = np.random.default_rng(1).uniform(size=(3, 9, 9))
    out, _ = warp_viewpoint(img, ChangeMask(np.ones((9, 9), np.uint8)), zoom=1.25)
    assert np.allclose(out[:, 4, 4], img[:, 4, 4], atol=1e-12)


def test_warp_translation_shifts_columns():
    img = np.random.default_rng(2).uniform(size=(3, 8, 16))
    out, _ = warp_viewpoint(img, None, translation=(5, 0))
    assert np.allclose(out[:, :, 5:], img[:, :, :-5], atol=1e-12)
    # border extension on the exposed side
    assert np.allclose(out[:, :, :5], img[:, :, :1], atol=1e-12)


def test_warp_rejects_zoom_out():
    with pytest.raises(InvalidArgument):
        warp_viewpoint(np.zeros((3, 8, 8)), None, zoom=0.9)


@given(rot=st.floats(-10, 10), zoom=st.floats(1.0, 1.3), dx=st.floats(-8, 8), dy=st.floats(-8, 8))
@settings(max_examples=40, deadline=None)
def test_warp_keeps_range_and_binary(rot, zoom, dx, dy):
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(3, 16, 16))
    mask = ChangeMask((rng.uniform(size=(16, 16)) < 0.3).astype(np.uint8))
    out, m = warp_viewpoint(img, mask, rot, zoom, (dx, dy))
    assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12
    assert set(np.unique(m.y)) <= {0, 1}


def test_split_examples():
    ds = Dataset([None] * 100)
    s = split_dataset(ds, 0.8, seed=1)
    assert (len(s.train), len(s.test)) == (80, 20)
    assert sorted(s.train + s.test) == list(range(100)) and not set(s.train) & set(s.test)
    assert split_dataset(ds, 0.8, seed=1).train == s.train
    assert split_dataset(ds, 0.8, seed=2).train != s.train
    assert len(split_dataset(Dataset([None] * 7), 0.5).train) == 3
    with pytest.raises(InvalidArgument):
        split_dataset(ds, 1.0)


def test_preprocess_examples():
    rng = np.random.default_rng(4)
    pair = ImagePair(rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16)), "p")
    mask = ChangeMask((np.indices((16, 16)).sum(axis=0) % 2).astype(np.uint8))
    same, m = preprocess(pair, mask, 16, 16)
    assert np.array_equal(same.t0, pair.t0) and np.array_equal(m.y, mask.y)
    const = ImagePair(np.full((3, 16, 16), 0.3), np.full((3, 16, 16), 0.7))
    big, _ = preprocess(const, mask, 40, 24)
    assert np.allclose(big.t0, 0.3, atol=1e-12) and np.allclose(big.t1, 0.7, atol=1e-12)
    _, half = preprocess(pair, mask, 8, 8)
    assert set(np.unique(half.y)) <= {0, 1}
    with pytest.raises(InvalidArgument):
        preprocess(pair, mask, 12, 16)


def test_save_and_load_roundtrip(tmp_path):
    ds = generate_synthetic(small(count=3))
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert [it.identifier for it in back.items] == sorted(it.identifier for it in ds.items)
    assert (tmp_path / "manifest.txt").read_text().split() == [it.identifier for it in ds.items]
    for a, b in zip(ds.items, back.items):
        assert np.abs(a.pair.t1 - b.pair.t1).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(a.mask.y, b.mask.y)


def test_load_empty_dataset(tmp_path):
    for sub in ("t0", "t1", "mask"):
        (tmp_path / sub).mkdir()
    assert len(load_dataset(tmp_path)) == 0


def test_load_missing_counterpart_names_file(tmp_path):
    ds = generate_synthetic(small(count=2))
    save_dataset(ds, tmp_path)
    victim = tmp_path / "t1" / f"{ds.items[1].identifier}.png"
    victim.unlink()
    with pytest.raises(DataError, match=ds.items[1].identifier):
        load_dataset(tmp_path)


def test_load_bad_image_names_path(tmp_path):
    for sub in ("t0", "t1", "mask"):
        (tmp_path / sub).mkdir()
        (tmp_path / sub / "a.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="a.png"):
        load_dataset(tmp_path)


def test_mask_threshold_at_128(tmp_path):
    path = tmp_path / "m.png"
    Image.fromarray(np.array([[0, 200], [127, 128]], np.uint8), "L").save(path)
    assert read_mask(path).changed.tolist() == [[False, True], [False, True]]


def test_ppm_accepted(tmp_path):
    for sub in ("t0", "t1", "mask"):
        (tmp_path / sub).mkdir()
    rgb = np.zeros((8, 8, 3), np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb, "RGB").save(tmp_path / "t0" / "x.ppm")
    Image.fromarray(rgb, "RGB").save(tmp_path / "t1" / "x.ppm")
    Image.fromarray(np.zeros((8, 8), np.uint8), "L").save(tmp_path / "mask" / "x.pgm")
    ds = load_dataset(tmp_path)
    assert ds.items[0].pair.t0[0].min() == 1.0 and not ds.items[0].mask.changed.any()
