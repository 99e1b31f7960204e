import numpy as np
import pytest
from hypothesis import given, strategies as st

from defdr.core import (CLASS_NAMES, LabeledDataset, ManifestError, PpmError, Prng, gen_shapes_dataset,
                        load_manifest, load_ppm, make_image, quantize, save_ppm, write_dataset, write_ppm)


def splitmix64_reference(seed, count):
    # straight transcription of the recurrence, independent of Prng
    out, state = [], seed
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) % 2**64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        out.append(z ^ (z >> 31))
    return out


def test_prng_seed_zero_first_output():
    assert Prng(0).next_u64() == 0xE220A8397B1DCDAF


@given(st.integers(0, 2**64 - 1))
def test_prng_matches_reference_stream(seed):
    p = Prng(seed)
    assert [p.next_u64() for _ in range(5)] == splitmix64_reference(seed, 5)


@given(st.integers(0, 2**64 - 1), st.integers(0, 40))
def test_u64_array_matches_scalar_calls(seed, n):
    a, b = Prng(seed), Prng(seed)
    assert a.u64_array(n).tolist() == [b.next_u64() for _ in range(n)]
    assert a.state == b.state


def test_random_and_below_ranges():
    p = Prng(5)
    r = p.random(10_000)
    assert r.min() >= 0.0 and r.max() < 1.0
    assert abs(r.mean() - 0.5) < 0.02
    draws = [p.below(7) for _ in range(3000)]
    assert set(draws) == set(range(7))
    assert all(3 <= p.integers(3, 5) <= 5 for _ in range(100))
    with pytest.raises(ValueError):
        p.below(0)


def test_normal_moments():
    z = Prng(11).normal(20_000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


@given(st.integers(0, 2**32), st.integers(1, 60))
def test_permutation_is_a_permutation(seed, n):
    assert sorted(Prng(seed).permutation(n).tolist()) == list(range(n))


def test_split_streams_diverge():
    parent = Prng(9)
    child = parent.split()
    assert child.next_u64() != parent.next_u64()


# --------------------------------------------------------------------------
# images and PPM
# --------------------------------------------------------------------------


def test_make_image_clamps_and_validates():
    img = make_image([[[-1.0, 0.5, 2.0]]])
    assert img.tolist() == [[[0.0, 0.5, 1.0]]]
    with pytest.raises(ValueError):
        make_image(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        make_image(np.zeros((4, 4, 1)))


def test_load_ppm_examples():
    assert load_ppm(b"P6\n1 1\n255\n\xff\x00\x00").tolist() == [[[1.0, 0.0, 0.0]]]
    img = load_ppm(b"P6 2 1 255\n" + bytes([0, 0, 0, 128, 128, 128]))
    assert img.shape == (1, 2, 3)
    assert img[0, 1].tolist() == [128 / 255] * 3


def test_load_ppm_header_comments():
    data = b"P6\n# made by hand\n1 # width done\n1\n255\n\x01\x02\x03"
    assert (load_ppm(data) * 255).round().tolist() == [[[1, 2, 3]]]


def test_save_ppm_layout():
    data = save_ppm(np.array([[[1.0, 0.0, 0.0]]]))
    assert data == b"P6\n1 1\n255\n\xff\x00\x00"


def test_every_byte_value_round_trips():
    values = np.arange(256, dtype=np.float64) / 255.0
    img = np.repeat(values[None, :, None], 3, axis=2)
    data = save_ppm(img)
    assert list(data[-768:][::3]) == list(range(256))
    assert np.array_equal(load_ppm(data), img)


def test_round_half_up():
    # 0.5 * 255 = 127.5 and 126.5 / 255 sit exactly between two bytes
    assert save_ppm(np.full((1, 1, 3), 0.5))[-3:] == bytes([128] * 3)
    assert save_ppm(np.full((1, 1, 3), 126.5 / 255))[-1] == 127


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32))
def test_save_load_save_is_identity(h, w, seed):
    img = Prng(seed).random((h, w, 3))
    once = save_ppm(img)
    assert np.array_equal(load_ppm(once), quantize(img))
    assert save_ppm(load_ppm(once)) == once


@pytest.mark.parametrize("data, fragment, offset", [
    (b"P5\n1 1\n255\n\x00", "unsupported magic", 0),
    (b"P6\n1 1\n65535\n\x00\x00\x00", "unsupported maxval", 7),
    (b"P6\n1 x\n255\n\x00\x00\x00", "non-numeric height", 5),
    (b"P6\n2 2\n255\n\x00\x00\x00", "truncated payload", 14),
    (b"P6\n1 1\n", "truncated header", 7),
])
def test_load_ppm_errors_name_offset(data, fragment, offset):
    with pytest.raises(PpmError) as err:
        load_ppm(data)
    assert fragment in str(err.value)
    assert err.value.offset == offset
    assert f"byte offset {offset}" in str(err.value)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def test_shapes_dataset_balance_and_range():
    ds = gen_shapes_dataset(7, 100, 32)
    assert len(ds) == 100 and ds.image_shape == (32, 32, 3)
    assert np.bincount(ds.labels, minlength=5).tolist() == [20] * 5
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.class_count == len(CLASS_NAMES)


@given(st.integers(0, 2**32), st.integers(5, 40))
def test_shapes_dataset_balanced_within_one(seed, n):
    counts = np.bincount(gen_shapes_dataset(seed, n, 16).labels, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_shapes_dataset_determinism():
    a, b = gen_shapes_dataset(7, 20), gen_shapes_dataset(7, 20)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_shapes_dataset(8, 20).images)


def test_shapes_dataset_argument_errors():
    with pytest.raises(ValueError):
        gen_shapes_dataset(0, 10, 15)
    with pytest.raises(ValueError):
        gen_shapes_dataset(0, 4, 32)


def test_shapes_have_visible_foreground():
    # every class paints something: foreground pixels are brighter than 0.5 on all channels
    ds = gen_shapes_dataset(3, 50)
    fg = (ds.images > 0.5 + 0.05).all(axis=3).sum(axis=(1, 2))
    assert (fg > 5).all()


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4, 4, 3)), [0, 5], 5)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 4, 4, 3)), [0], 5)
    ds = LabeledDataset(np.zeros((2, 4, 4, 3)), [0, 1], 2)
    assert len(ds.concat(ds)) == 4 and len(ds.subset([1])) == 1


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    ds = gen_shapes_dataset(1, 6, 16)
    manifest = write_dataset(ds, tmp_path)
    back = load_manifest(manifest.read_text(), tmp_path)
    assert np.array_equal(back.images, quantize(ds.images))
    assert back.labels.tolist() == ds.labels.tolist()
    assert back.class_count == ds.labels.max() + 1


def _two_images(tmp_path, second_side=4):
    write_ppm(tmp_path / "a.ppm", np.zeros((4, 4, 3)))
    write_ppm(tmp_path / "b.ppm", np.zeros((second_side, second_side, 3)))


def test_manifest_errors(tmp_path):
    _two_images(tmp_path)
    with pytest.raises(ManifestError, match="row 3: non-integer label 'cat'"):
        load_manifest("path,label\na.ppm,0\nb.ppm,1\na.ppm,cat\n", tmp_path)
    with pytest.raises(ManifestError, match="row 2: missing file"):
        load_manifest("path,label\na.ppm,0\nnope.ppm,1\n", tmp_path)
    with pytest.raises(ManifestError, match="header must be"):
        load_manifest("file,label\na.ppm,0\n", tmp_path)
    with pytest.raises(ManifestError, match="no images"):
        load_manifest("path,label\n", tmp_path)


def test_manifest_dimension_mismatch(tmp_path):
    _two_images(tmp_path, second_side=2)
    with pytest.raises(ManifestError, match="row 2: dimension mismatch"):
        load_manifest("path,label\na.ppm,0\nb.ppm,1\n", tmp_path)
