import numpy as np
import pytest
from PIL import Image

from models.deft_models import DefectKind, SynthSpec
from models.errors import DataIOError, UsageError
from services.data_service import (
    Sample, augment_train, load_folder, prepare_eval, subsample, synth_generate, train_test_split, write_folder,
)


def blank_sample(size=8, sample_id="s"):
    return Sample(np.zeros((3, size, size), dtype=np.float32), np.zeros((1, size, size), dtype=np.float32), sample_id)


def test_synth_is_deterministic():
    spec = SynthSpec(count=3, image_size=32, seed=7)
    a, b = synth_generate(spec), synth_generate(spec)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
        assert x.id == y.id


def test_synth_shapes_and_value_sets():
    samples = synth_generate(SynthSpec(count=2, image_size=48, seed=1))
    assert [s.id for s in samples] == ["synth_0000", "synth_0001"]
    for s in samples:
        assert s.image.shape == (3, 48, 48) and s.image.dtype == np.float32
        assert s.mask.shape == (1, 48, 48)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_no_defects_gives_empty_masks():
    samples = synth_generate(SynthSpec(count=4, image_size=32, defect_count_range=(0, 0), seed=2))
    assert all(not s.mask.any() for s in samples)


def test_mask_area_follows_defect_size():
    size, extent = 128, 0.2
    spec = SynthSpec(count=100, image_size=size, defect_count_range=(1, 1), defect_kinds=[DefectKind.BLOB],
                     defect_size_range=(extent, extent), pseudo_defect_density=0.0, seed=5)
    # ellipse radii lie in [0.6, 1.0] * extent / 2 and the centre margin keeps every blob inside the image
    r_min, r_max = 0.6 * extent * size / 2, extent * size / 2
    areas = np.array([s.mask.sum() for s in synth_generate(spec)])
    assert np.all(areas >= 0.5 * np.pi * r_min ** 2)
    assert np.all(areas <= np.pi * (r_max + 1.5) ** 2)
    expected_mean = np.pi * (0.8 * r_max) ** 2
    assert 0.8 * expected_mean <= areas.mean() <= 1.25 * expected_mean


def test_pseudo_defects_stay_out_of_mask():
    spec = SynthSpec(count=3, image_size=32, defect_count_range=(0, 0), pseudo_defect_density=5.0,
                     noise_sigma=0.0, seed=11)
    for s in synth_generate(spec):
        assert not s.mask.any()


def test_synth_rejects_zero_size():
    with pytest.raises(UsageError):
        synth_generate(SynthSpec(count=1, image_size=0))


def test_write_then_load_is_lossless(tmp_path):
    samples = synth_generate(SynthSpec(count=3, image_size=32, seed=9))
    write_folder(samples, tmp_path)
    loaded, report = load_folder(tmp_path / "images", tmp_path / "masks")
    assert [r.status for r in report] == ["ok"] * 3
    for original, back in zip(samples, loaded):
        assert original.id == back.id
        np.testing.assert_array_equal(original.image, back.image)
        np.testing.assert_array_equal(original.mask, back.mask)


def test_load_empty_dirs(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    assert load_folder(tmp_path / "images", tmp_path / "masks") == ([], [])


def test_load_binarizes_masks_and_reports_problems(tmp_path):
    images, masks = tmp_path / "images", tmp_path / "masks"
    images.mkdir()
    masks.mkdir()
    Image.fromarray(np.full((2, 3, 3), 200, dtype=np.uint8)).save(images / "a.png")
    Image.fromarray(np.array([[0, 127, 255], [255, 0, 127]], dtype=np.uint8)).save(masks / "a.png")
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(images / "b.png")
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(images / "c.png")
    Image.fromarray(np.zeros((3, 3), dtype=np.uint8)).save(masks / "c.png")

    samples, report = load_folder(images, masks)
    assert [(r.stem, r.status) for r in report] == [("a", "ok"), ("b", "missing_mask"), ("c", "size_mismatch")]
    assert len(samples) == 1
    np.testing.assert_array_equal(samples[0].mask[0], [[0, 0, 1], [1, 0, 0]])
    assert samples[0].image.shape == (3, 2, 3)


def test_load_missing_dir_and_bad_file(tmp_path):
    with pytest.raises(DataIOError):
        load_folder(tmp_path / "nope", tmp_path / "nope")
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    (tmp_path / "images" / "x.png").write_bytes(b"not an image")
    (tmp_path / "masks" / "x.png").write_bytes(b"not an image")
    with pytest.raises(DataIOError):
        load_folder(tmp_path / "images", tmp_path / "masks")


def test_augment_defaults_and_forced_offset(rng):
    s = synth_generate(SynthSpec(count=1, image_size=64, seed=0))[0]
    assert augment_train(s, rng).size == (224, 224)
    same = augment_train(s, rng, resize_to=64, crop_to=64)
    np.testing.assert_array_equal(same.image, s.image)
    np.testing.assert_array_equal(same.mask, s.mask)
    with pytest.raises(UsageError):
        augment_train(s, rng, resize_to=32, crop_to=64)


def test_crop_keeps_image_mask_alignment():
    image = np.zeros((3, 8, 8), dtype=np.float32)
    mask = np.zeros((1, 8, 8), dtype=np.float32)
    image[:, 5, 5] = 1.0
    mask[0, 5, 5] = 1.0
    s = Sample(image, mask, "delta")
    for seed in range(10):
        out = augment_train(s, np.random.default_rng(seed), resize_to=8, crop_to=6)
        assert np.unravel_index(out.image[0].argmax(), (6, 6)) == np.unravel_index(out.mask[0].argmax(), (6, 6))


def test_prepare_eval_resizes_to_256():
    s = synth_generate(SynthSpec(count=1, image_size=512, seed=4))[0]
    out = prepare_eval(s)
    assert out.size == (256, 256)
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    small = blank_sample(256)
    assert prepare_eval(small) is small


def test_subsample_and_split():
    samples = [blank_sample(sample_id=str(i)) for i in range(10)]
    picked = subsample(samples, 0.3, seed=1)
    assert len(picked) == 3
    assert [s.id for s in picked] == sorted((s.id for s in picked), key=int)
    assert [s.id for s in subsample(samples, 0.3, seed=1)] == [s.id for s in picked]
    train, test = train_test_split(samples, 0.2, seed=0)
    assert len(test) == 2 and len(train) == 8
    assert {s.id for s in train}.isdisjoint({s.id for s in test})
