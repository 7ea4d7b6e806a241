import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from semguide.dataset import (
    DatasetError,
    DatasetSpec,
    LabeledImage,
    augment,
    export_voc_style,
    generate_synthetic,
    load_voc_style,
    rasterize,
    stack_batch,
)


def small(**kw):
    return DatasetSpec(**{"num_images": 4, "image_size": 32, "min_shape_size": 8, "max_shape_size": 14, **kw})


def test_generation_is_bitwise_deterministic():
    a = generate_synthetic(DatasetSpec(num_images=4, num_classes=3, seed=0))
    b = generate_synthetic(DatasetSpec(num_images=4, num_classes=3, seed=0))
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.gt_mask.tobytes() == y.gt_mask.tobytes()
        assert x.label.tobytes() == y.label.tobytes()


def test_different_seeds_differ():
    a = generate_synthetic(small(seed=0))
    b = generate_synthetic(small(seed=1))
    assert any(x.pixels.tobytes() != y.pixels.tobytes() for x, y in zip(a, b))


def test_label_for_single_class_image():
    ds = generate_synthetic(DatasetSpec(num_images=40, min_shapes=1, max_shapes=1, seed=3))
    only2 = [im for im in ds if im.label[2] == 1]
    assert only2
    for im in only2:
        np.testing.assert_array_equal(im.label, [0, 0, 1])
        assert set(np.unique(im.gt_mask)) == {0, 3}


def test_square_pixel_count_matches_pixel_loop():
    m = rasterize("square", 20, 5, 7, (40, 40))
    count = 0
    for y in range(40):
        for x in range(40):
            count += 5 <= y < 25 and 7 <= x < 27
    assert m.sum() == count == 400
    assert m[5:25, 7:27].all()


@pytest.mark.parametrize("kind", ["circle", "square", "triangle", "diamond", "cross", "ring"])
def test_rasterized_shapes_stay_in_their_box(kind):
    m = rasterize(kind, 16, 4, 6, (32, 32))
    assert m.any()
    box = np.zeros_like(m)
    box[4:20, 6:22] = True
    assert not (m & ~box).any()


def test_unknown_kind_rejected():
    with pytest.raises(DatasetError, match="hexagon"):
        rasterize("hexagon", 8, 0, 0, (16, 16))


@pytest.mark.parametrize(
    "kw, msg",
    [
        ({"num_classes": 7}, "palette"),
        ({"num_classes": 1}, ">= 2"),
        ({"image_size": 60, "patch_size": 8}, "divisible"),
        ({"max_shapes": 4, "num_classes": 3}, "distinct"),
    ],
)
def test_invalid_specs_rejected(kw, msg):
    with pytest.raises(DatasetError, match=msg):
        generate_synthetic(DatasetSpec(**kw))


@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 6))
def test_mask_classes_equal_label_classes(seed, k):
    for im in generate_synthetic(small(num_images=3, num_classes=k, max_shapes=min(3, k), seed=seed)):
        present = {int(c) - 1 for c in np.unique(im.gt_mask) if c > 0}
        assert present == set(np.flatnonzero(im.label).tolist())
        assert im.label.sum() >= 1
        assert im.pixels.dtype == np.float32
        assert 0.0 <= im.pixels.min() and im.pixels.max() <= 1.0


def test_voc_round_trip(tmp_path):
    ds = generate_synthetic(small())
    export_voc_style(ds, tmp_path, "train")
    back = load_voc_style(tmp_path, "train")
    assert [b.image_id for b in back] == [d.image_id for d in ds]
    for d, b in zip(ds, back):
        np.testing.assert_array_equal(d.label, b.label)
        np.testing.assert_array_equal(d.gt_mask, b.gt_mask)
        assert np.abs(d.pixels - b.pixels).max() <= 0.5 / 255 + 1e-6


def test_voc_splits_share_label_file(tmp_path):
    export_voc_style(generate_synthetic(small(seed=0)), tmp_path, "train")
    ev = [LabeledImage(im.pixels, im.label, im.gt_mask, "e" + im.image_id) for im in generate_synthetic(small(seed=5))]
    export_voc_style(ev, tmp_path, "eval")
    assert len(load_voc_style(tmp_path, "train")) == 4
    assert len(load_voc_style(tmp_path, "eval")) == 4


def _write_minimal(root, ids, labels):
    (root / "images").mkdir(parents=True)
    for i in ids:
        Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(root / "images" / f"{i}.png")
    (root / "train.txt").write_text("".join(i + "\n" for i in ids))
    (root / "labels.txt").write_text("".join(f"{i} {l}\n" for i, l in zip(ids, labels)))


def test_empty_list_gives_empty_dataset(tmp_path):
    _write_minimal(tmp_path, [], [])
    assert load_voc_style(tmp_path, "train") == []


def test_list_order_and_label_parse(tmp_path):
    _write_minimal(tmp_path, ["b", "a"], ["1 0 1", "0 1 0"])
    out = load_voc_style(tmp_path, "train", 3)
    assert [o.image_id for o in out] == ["b", "a"]
    np.testing.assert_array_equal(out[0].label, [1, 0, 1])
    assert out[0].gt_mask is None


def test_missing_file_names_path(tmp_path):
    with pytest.raises(DatasetError, match=str(tmp_path / "train.txt")):
        load_voc_style(tmp_path, "train")


def test_missing_image_names_path(tmp_path):
    _write_minimal(tmp_path, ["a"], ["1 0"])
    (tmp_path / "images" / "a.png").unlink()
    with pytest.raises(DatasetError, match="a.png"):
        load_voc_style(tmp_path, "train")


def test_label_length_mismatch(tmp_path):
    _write_minimal(tmp_path, ["a"], ["1 0"])
    with pytest.raises(DatasetError, match="expected 3"):
        load_voc_style(tmp_path, "train", 3)


# augmentation


def _img(size=32, seed=0):
    return generate_synthetic(small(num_images=1, image_size=size, seed=seed))[0]


def test_augment_identity():
    im = _img()
    out = augment(im, (1, 1), 32, 0.0, np.random.default_rng(0), crop_origin=(0, 0))
    np.testing.assert_array_equal(out.pixels, im.pixels)
    np.testing.assert_array_equal(out.gt_mask, im.gt_mask)


def test_augment_flip_is_mirror_and_involution():
    im = _img()
    once = augment(im, (1, 1), 32, 1.0, np.random.default_rng(0), crop_origin=(0, 0))
    np.testing.assert_array_equal(once.pixels, im.pixels[:, ::-1])
    np.testing.assert_array_equal(once.gt_mask, im.gt_mask[:, ::-1])
    twice = augment(once, (1, 1), 32, 1.0, np.random.default_rng(0), crop_origin=(0, 0))
    np.testing.assert_array_equal(twice.pixels, im.pixels)


def test_augment_crop_shape():
    im = LabeledImage(np.random.default_rng(0).random((256, 256, 3), dtype=np.float32), np.array([1.0, 0.0]))
    out = augment(im, (1, 1), 224, 0.5, np.random.default_rng(1))
    assert out.pixels.shape == (224, 224, 3)
    np.testing.assert_array_equal(out.label, im.label)


def test_augment_small_scale_rescales_up():
    im = _img()
    out = augment(im, (0.25, 0.25), 32, 0.0, np.random.default_rng(0))
    assert out.pixels.shape == (32, 32, 3)
    np.testing.assert_array_equal(out.pixels, im.pixels)


@given(seed=st.integers(0, 10_000), lo=st.floats(0.3, 1.0), span=st.floats(0.0, 1.5), flip=st.floats(0, 1))
def test_augment_preserves_label_and_mask_values(seed, lo, span, flip):
    im = _img(seed=seed % 7)
    out = augment(im, (lo, lo + span), 24, flip, np.random.default_rng(seed))
    np.testing.assert_array_equal(out.label, im.label)
    assert out.pixels.shape == (24, 24, 3)
    assert out.gt_mask.shape == (24, 24)
    assert set(np.unique(out.gt_mask)) <= set(np.unique(im.gt_mask))
    assert 0 <= out.pixels.min() and out.pixels.max() <= 1


def test_stack_batch_layout():
    ds = generate_synthetic(small(num_images=2))
    pix, lab = stack_batch(ds)
    assert tuple(pix.shape) == (2, 3, 32, 32)
    assert tuple(lab.shape) == (2, 3)
    np.testing.assert_array_equal(pix[1, 2].numpy(), ds[1].pixels[..., 2])
