import struct

import numpy as np
import pytest
from PIL import Image

from casdm.data import (
    BatchSampler,
    load_folder,
    load_tensor,
    load_tensor_dataset,
    make_synthetic,
    pattern_motifs,
    save_tensor,
    to_pixels,
    to_unit_range,
)
from casdm.netcore.params import ContainerFormatError


def test_tensor_round_trip_and_layout(tmp_path, rng):
    x = rng.standard_normal((3, 4, 4, 2)).astype(np.float32)
    save_tensor(tmp_path / "x.cdt", x)
    assert np.array_equal(load_tensor(tmp_path / "x.cdt"), x)
    save_tensor(tmp_path / "y.cdt", np.array([1.5], np.float32))
    assert (tmp_path / "y.cdt").read_bytes() == b"CDT1" + struct.pack("<QQf", 1, 1, 1.5)


@pytest.mark.parametrize(
    "mutate,field",
    [(lambda b: b"NOPE" + b[4:], "magic"), (lambda b: b[:-1], "payload"), (lambda b: b[:6], "rank")],
)
def test_tensor_corruption(tmp_path, mutate, field):
    save_tensor(tmp_path / "x.cdt", np.zeros((2, 2), np.float32))
    (tmp_path / "bad.cdt").write_bytes(mutate((tmp_path / "x.cdt").read_bytes()))
    with pytest.raises(ContainerFormatError) as exc:
        load_tensor(tmp_path / "bad.cdt")
    assert exc.value.field == field


def test_gaussian_moments():
    ds = make_synthetic("synthetic_gaussian", 4000, (4, 4, 1), seed=1, mean=0.1, std=0.2)
    x = ds.images
    assert x.shape == (4000, 4, 4, 1) and x.dtype == np.float32
    # 64000 draws, clip at 4.5 sd is negligible
    assert abs(x.mean() - 0.1) < 4 * 0.2 / np.sqrt(x.size)
    assert abs(x.std() - 0.2) < 0.01


def test_patterns_are_motifs_plus_jitter():
    ds = make_synthetic("synthetic_patterns", 200, (8, 8, 1), seed=0, jitter=0.05)
    motifs = pattern_motifs(8)
    assert motifs.shape == (8, 8, 8, 1)
    assert np.abs(motifs).max() == pytest.approx(0.8)
    d = np.abs(ds.images[:, None] - motifs[None]).reshape(200, 8, -1).max(axis=-1)
    assert np.all(d.min(axis=1) <= 0.05 + 1e-6)
    assert len(np.unique(d.argmin(axis=1))) == 8
    assert np.abs(ds.images).max() <= 1.0


def test_synthetic_deterministic_and_seeded():
    a = make_synthetic("synthetic_patterns", 10, seed=3).images
    assert np.array_equal(a, make_synthetic("synthetic_patterns", 10, seed=3).images)
    assert not np.array_equal(a, make_synthetic("synthetic_patterns", 10, seed=4).images)


def test_synthetic_errors():
    with pytest.raises(ValueError):
        make_synthetic("mnist", 10)
    with pytest.raises(ValueError):
        make_synthetic("synthetic_gaussian", 0)


def test_pixel_mapping():
    np.testing.assert_array_equal(to_pixels(np.array([-1.0, 0.0, 1.0, 3.0])), [0, 128, 255, 255])
    np.testing.assert_allclose(to_unit_range(np.array([0, 255])), [-1, 1])


def test_load_folder(tmp_path):
    for i, v in enumerate((0, 255)):
        Image.fromarray(np.full((6, 6, 3), v, np.uint8)).save(tmp_path / f"{i}.png")
    ds = load_folder(tmp_path, channels=3)
    assert ds.images.shape == (2, 6, 6, 3)
    np.testing.assert_allclose(ds.images[0], -1.0)
    np.testing.assert_allclose(ds.images[1], 1.0)
    assert load_folder(tmp_path, channels=1, image_size=4).images.shape == (2, 4, 4, 1)


def test_load_folder_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_folder(tmp_path / "missing")
    with pytest.raises(ValueError):
        load_folder(tmp_path)


def test_tensor_dataset_rank(tmp_path):
    save_tensor(tmp_path / "x.cdt", np.zeros((2, 3), np.float32))
    with pytest.raises(ValueError):
        load_tensor_dataset(tmp_path / "x.cdt")


def test_batch_sampler_epochs_cover_everything():
    bs = BatchSampler(10, 4, seed=0)
    seen = np.concatenate([bs.next_indices() for _ in range(5)])
    assert len(seen) == 20
    assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:]) == list(range(10))


def test_batch_sampler_state_round_trip():
    a = BatchSampler(7, 3, seed=2)
    for _ in range(4):
        a.next_indices()
    b = BatchSampler(7, 3, seed=99)
    b.load_state(a.state())
    for _ in range(6):
        assert np.array_equal(a.next_indices(), b.next_indices())
