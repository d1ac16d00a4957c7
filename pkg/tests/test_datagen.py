import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from matchgan import datagen as dg
from matchgan import labelspace as ls


@pytest.fixture
def spec():
    return dg.SyntheticSpec(dg.synthetic8_schema(), image_size=32, noise_amplitude=0.1)


def test_synthetic8_has_eight_classes(spec):
    classes = dg.all_classes(spec.schema)
    assert len(classes) == 8 == len(set(classes))
    for c in classes:
        spec.schema.validate(c)


def test_zero_noise_background_is_deterministic():
    spec = dg.SyntheticSpec(dg.synthetic8_schema(), noise_amplitude=0.0)
    a = dg.render_synthetic((0, 0, 0, 0), spec, np.random.default_rng(0))
    b = dg.render_synthetic((0, 0, 0, 0), spec, np.random.default_rng(99))
    assert a.tobytes() == b.tobytes()
    assert np.all(a == np.float32(dg.BACKGROUND))


@pytest.mark.parametrize("bit", range(4))
def test_bit_changes_stay_inside_region(spec, bit):
    base = [0, 1, 0, 1] if bit == 0 else [1, 0, 0, 0]
    other = list(base)
    other[bit] ^= 1
    if bit < 2:
        # keep the exclusive group valid: move the colour instead of toggling it
        other = [0, 0] + base[2:]
        other[bit] = 1
    a = dg.render_synthetic(base, spec, np.random.default_rng(4))
    b = dg.render_synthetic(other, spec, np.random.default_rng(4))
    mask = np.zeros(a.shape[1:], bool)
    rows, cols = spec.region(bit)
    mask[rows, cols] = True
    diff = np.any(a != b, axis=0)
    assert diff.any()
    assert not diff[~mask].any()


def test_regions_disjoint(spec):
    masks = []
    for attr in spec.strips():
        m = np.zeros((32, 32), bool)
        rows, cols = spec.region(attr)
        m[rows, cols] = True
        masks.append(m)
    band = np.zeros((32, 32), bool)
    band[: spec.band_rows] = True
    masks.append(band)
    assert sum(m.astype(int) for m in masks).max() == 1


def test_decision_rule_recovers_attributes(spec):
    classes = dg.all_classes(spec.schema)
    rng = np.random.default_rng(0)
    correct = np.zeros(spec.schema.n_attr)
    n = 1000
    for y in classes:
        for _ in range(n):
            got = dg.decode_synthetic(dg.render_synthetic(y, spec, rng), spec)
            correct += np.equal(got, y)
    acc = correct / (n * len(classes))
    assert np.all(acc >= 0.99), acc


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), cls=st.integers(0, 7))
def test_render_is_pure_given_rng_state(seed, cls):
    spec = dg.SyntheticSpec(dg.synthetic8_schema())
    y = dg.all_classes(spec.schema)[cls]
    a = dg.render_synthetic(y, spec, np.random.default_rng(seed))
    b = dg.render_synthetic(y, spec, np.random.default_rng(seed))
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32 and a.min() >= -1 and a.max() <= 1


def test_dataset_is_balanced(spec):
    classes = dg.all_classes(spec.schema)
    images, labels = dg.make_synthetic_dataset(spec, classes, 80, seed=1)
    assert images.shape == (80, 3, 32, 32)
    assert {labels.count(c) for c in classes} == {10}


def test_preprocess_celeba_geometry():
    raw = np.random.default_rng(0).integers(0, 256, size=(218, 178, 3), dtype=np.uint8)
    out = dg.preprocess(raw, 178, 128)
    assert out.shape == (3, 128, 128)
    assert out.min() >= -1 and out.max() <= 1


def test_preprocess_identity_crop():
    raw = np.random.default_rng(1).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    out = dg.preprocess(raw, 64, 64)
    np.testing.assert_allclose(out, raw.transpose(2, 0, 1) / 127.5 - 1, atol=1e-6)
    again = dg.preprocess(out, 64, 64)
    assert np.array_equal(again, out)


def test_preprocess_range_endpoints():
    assert np.all(dg.preprocess(np.full((40, 30, 3), 255, np.uint8), 30, 16) == 1.0)
    assert np.all(dg.preprocess(np.zeros((40, 30, 3), np.uint8), 30, 16) == -1.0)


def test_preprocess_accepts_pil_and_rejects_small():
    img = Image.new("RGB", (50, 60), (255, 255, 255))
    assert dg.preprocess(img, 50, 32).shape == (3, 32, 32)
    with pytest.raises(dg.ImageTooSmall):
        dg.preprocess(img, 51, 32)


def test_flip_and_uint8_roundtrip():
    rng = np.random.default_rng(0)
    batch = rng.uniform(-1, 1, size=(64, 3, 4, 4)).astype(np.float32)
    out = dg.random_flip(batch, np.random.default_rng(3))
    flipped = [not np.array_equal(o, b) for o, b in zip(out, batch)]
    assert 10 < sum(flipped) < 54
    for o, b, f in zip(out, batch, flipped):
        assert np.array_equal(o, b[..., ::-1] if f else b)
    u8 = dg.to_uint8(np.array([[[-1.0, 1.0]]] * 3))
    assert u8.dtype == np.uint8 and u8.min() == 0 and u8.max() == 255


def _write_folder(tmp_path, lines, files=("a.png", "b.png")):
    for f in files:
        Image.new("RGB", (20, 24), (10, 20, 30)).save(tmp_path / f)
    attr = tmp_path / "list_attr.txt"
    attr.write_text("\n".join(lines) + "\n")
    return attr


HEADER = "Black_Hair Blond_Hair Brown_Hair Male Young"


def test_load_image_folder(tmp_path):
    attr = _write_folder(tmp_path, ["2", HEADER, "a.png 1 -1 -1 1 1", "b.png -1 1 -1 -1 1"])
    recs = dg.load_image_folder(tmp_path, attr, ls.celeba_schema())
    assert len(recs) == 2
    assert recs[0][1] == (1, 0, 0, 1, 1)
    src = dg.FolderImageSource(16, 16)
    assert src.get([recs[0][0], recs[1][0]]).shape == (2, 3, 16, 16)


def test_load_image_folder_errors(tmp_path):
    schema = ls.celeba_schema()
    attr = _write_folder(tmp_path, ["1", HEADER, "missing.png 1 -1 -1 1 1"])
    with pytest.raises(dg.MissingFile):
        dg.load_image_folder(tmp_path, attr, schema)
    with pytest.raises(dg.MissingFile):
        dg.load_image_folder(tmp_path, tmp_path / "nope.txt", schema)
    attr = _write_folder(tmp_path, ["1", HEADER, "a.png 1 -1 oops 1 1"])
    with pytest.raises(dg.MalformedAttributeLine) as err:
        dg.load_image_folder(tmp_path, attr, schema)
    assert err.value.lineno == 3
    attr = _write_folder(tmp_path, ["1", "Black_Hair Blond_Hair Male Young", "a.png 1 -1 1 1"])
    with pytest.raises(dg.UnknownAttributeName):
        dg.load_image_folder(tmp_path, attr, schema)


def test_tile_grid_shape():
    tiles = np.zeros((5, 9, 3, 8, 8), np.float32)
    grid = dg.tile_grid(tiles, pad=2)
    assert grid.shape == (3, 5 * 8 + 6 * 2, 9 * 8 + 10 * 2)
