import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image
from sklearn.ensemble import RandomForestClassifier

from sammae.data import (LESION_FAMILIES, AugmentationRecord, DatasetError, ImageDataset, augment, center_crop_box,
                         generate_synthetic_lesion_dataset, hash_split, lesion_bbox, load_dataset_uri,
                         load_image_folder, load_synthetic_dataset, random_resized_crop_box,
                         replay_augmentation, save_synthetic_dataset)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_lesion_dataset(512, 4, 64, seed=0)


def write_folder(root, layout, size=(20, 30)):
    rng = np.random.default_rng(0)
    for cls, names in layout.items():
        (root / cls).mkdir(parents=True)
        for n in names:
            Image.fromarray(rng.integers(0, 255, (*size, 3), dtype=np.uint8)).save(root / cls / n)
    return root


# ---- synthetic generator ----------------------------------------------------

def test_generator_invariants(corpus):
    assert corpus.images.shape == (512, 64, 64, 3)
    assert corpus.images.min() >= 0 and corpus.images.max() <= 1
    frac = corpus.lesion_masks.float().mean((1, 2))
    assert frac.min() >= 0.01 and frac.max() <= 0.15
    assert set(corpus.labels.tolist()) == {0, 1, 2, 3}
    assert corpus.class_names == list(LESION_FAMILIES[:4])
    assert len(set(corpus.image_ids)) == 512


def test_generator_is_deterministic():
    a = generate_synthetic_lesion_dataset(16, 4, 64, seed=5)
    b = generate_synthetic_lesion_dataset(16, 4, 64, seed=5)
    c = generate_synthetic_lesion_dataset(16, 4, 64, seed=6)
    assert torch.equal(a.images, b.images) and torch.equal(a.lesion_masks, b.lesion_masks)
    assert torch.equal(a.labels, b.labels) and a.image_ids == b.image_ids
    assert not torch.equal(a.images, c.images)


def test_single_sample():
    ds = generate_synthetic_lesion_dataset(1, 4, 64, seed=0)
    assert len(ds) == 1
    assert 0.01 <= ds.lesion_masks.float().mean() <= 0.15


def test_too_many_classes():
    with pytest.raises(ValueError):
        generate_synthetic_lesion_dataset(4, 9, 64)


@pytest.mark.parametrize("n_classes", [4, 8])
def test_labels_recoverable_from_lesion_crop_alone(n_classes):
    def lesion_features(ds):
        rows = []
        for img, m in zip(ds.images, ds.lesion_masks):
            x, y, w, h = lesion_bbox(m.numpy())
            crop = (img * m[..., None])[y:y + h, x:x + w].mean(-1)
            rows.append(F.interpolate(crop[None, None], size=(16, 16), mode="bilinear",
                                      align_corners=False).flatten().numpy())
        return np.stack(rows)

    train = generate_synthetic_lesion_dataset(512, n_classes, 64, seed=0)
    test = generate_synthetic_lesion_dataset(256, n_classes, 64, seed=1)
    clf = RandomForestClassifier(200, random_state=0).fit(lesion_features(train), train.labels.numpy())
    acc = (clf.predict(lesion_features(test)) == test.labels.numpy()).mean()
    assert acc > 0.90


def test_background_colour_carries_no_label(corpus):
    def bg_stats(ds):
        return np.stack([torch.cat([img[~m].mean(0), img[~m].std(0)]).numpy()
                         for img, m in zip(ds.images, ds.lesion_masks)])

    test = generate_synthetic_lesion_dataset(512, 4, 64, seed=1)
    clf = RandomForestClassifier(200, random_state=0).fit(bg_stats(corpus), corpus.labels.numpy())
    acc = (clf.predict(bg_stats(test)) == test.labels.numpy()).mean()
    assert acc < 0.35  # chance is 0.25; 512 draws give sigma ~0.02


def test_persistence_round_trip(tmp_path):
    ds = generate_synthetic_lesion_dataset(6, 4, 64, seed=2)
    save_synthetic_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [s["image_id"] for s in manifest["samples"]] == ds.image_ids
    assert manifest["samples"][0]["lesion_bbox"] == lesion_bbox(ds.lesion_masks[0].numpy())
    back = load_synthetic_dataset(tmp_path)
    assert back.image_ids == ds.image_ids and torch.equal(back.labels, ds.labels)
    assert torch.equal(back.lesion_masks, ds.lesion_masks)
    assert (back.images - ds.images).abs().max() <= 0.5 / 255 + 1e-6
    assert torch.equal(load_dataset_uri(f"synthdir:{tmp_path}").labels, ds.labels)


def test_lesion_bbox():
    m = np.zeros((8, 8), bool)
    m[2:5, 3:7] = True
    assert lesion_bbox(m) == [3, 2, 4, 3]
    assert lesion_bbox(np.zeros((4, 4), bool)) == [0, 0, 0, 0]


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(DatasetError):
        ImageDataset(torch.zeros(2, 4, 4, 3), torch.zeros(2, dtype=torch.long), ["a", "a"], 2)


def test_normalization_stats_come_from_data(corpus):
    flat = corpus.normalize(corpus.images).reshape(-1, 3)
    assert torch.allclose(flat.mean(0), torch.zeros(3), atol=1e-3)
    assert torch.allclose(flat.std(0), torch.ones(3), atol=1e-3)


# ---- folders and splits -----------------------------------------------------

def test_folder_two_by_three(tmp_path):
    write_folder(tmp_path, {"a": ["1.png", "2.png", "3.jpg"], "b": ["x.png", "y.png", "z.png"]})
    ds = load_image_folder(tmp_path, image_size=16)
    assert len(ds) == 6 and ds.num_classes == 2 and ds.class_names == ["a", "b"]
    assert ds.image_ids == ["a/1.png", "a/2.png", "a/3.jpg", "b/x.png", "b/y.png", "b/z.png"]
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.images.shape == (6, 16, 16, 3)


def test_folder_five_classes(tmp_path):
    write_folder(tmp_path, {str(k): [f"{k}_{j}.png" for j in range(2)] for k in range(5)})
    ds = load_dataset_uri(f"folder:{tmp_path}", image_size=16)
    assert ds.num_classes == 5 and len(ds) == 10


def test_folder_errors(tmp_path):
    with pytest.raises(DatasetError, match="not a directory"):
        load_image_folder(tmp_path / "missing")
    write_folder(tmp_path, {"a": ["1.png"]})
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError, match="no images"):
        load_image_folder(tmp_path)
    (tmp_path / "empty" / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="cannot read"):
        load_image_folder(tmp_path)


def test_hash_split_seven_three():
    ids = [f"img_{i}.png" for i in range(10)]
    tr, va = hash_split(ids, 0.7, seed=3)
    assert (len(tr), len(va)) == (7, 3)
    assert (tr, va) == hash_split(ids, 0.7, seed=3)
    assert sorted(tr + va) == list(range(10))
    # membership depends on the id, not on list order
    rev_tr, _ = hash_split(ids[::-1], 0.7, seed=3)
    assert sorted(ids[::-1][i] for i in rev_tr) == sorted(ids[i] for i in tr)


def test_dataset_split(corpus):
    tr, va = corpus.split(0.75, seed=1)
    assert len(tr) == 384 and len(va) == 128
    assert not set(tr.image_ids) & set(va.image_ids)
    assert torch.equal(tr.mean, corpus.mean)


def test_unknown_uri():
    with pytest.raises(DatasetError):
        load_dataset_uri("http://x")
    with pytest.raises(DatasetError):
        load_dataset_uri("synth:lots")


# ---- augmentation -----------------------------------------------------------

def test_eval_policy_is_deterministic(corpus):
    a = augment(corpus.images[0], "eval")
    b = augment(corpus.images[0], "eval")
    assert torch.equal(a[0], b[0]) and a[1] == b[1]
    assert a[1] == AugmentationRecord((0, 0, 64, 64), False, 64)
    assert torch.equal(a[0], corpus.images[0])


def test_forced_flip_is_mirrored_crop(corpus):
    img = corpus.images[3]
    out, rec = augment(img, "train", np.random.default_rng(1), force_flip=True)
    assert rec.flip
    plain = replay_augmentation(img, AugmentationRecord(rec.crop_box, False, 64))
    assert torch.equal(out, plain.flip(1))


def test_replay_is_bit_exact(corpus):
    rng = np.random.default_rng(4)
    for i in range(20):
        out, rec = augment(corpus.images[i], "train", rng)
        assert torch.equal(replay_augmentation(corpus.images[i], rec), out)


def test_crop_boxes_stay_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        x, y, w, h = random_resized_crop_box(64, 48, rng, (0.2, 1.0))
        assert 0 <= x and 0 <= y and w > 0 and h > 0 and x + w <= 48 and y + h <= 64
        assert w * h >= 0.2 * 64 * 48 * 0.9 or (w, h) == (48, 48)


def test_center_crop_box():
    assert center_crop_box(64, 64) == (0, 0, 64, 64)
    assert center_crop_box(64, 80) == (8, 0, 64, 64)
    assert center_crop_box(64, 64, 0.875) == (4, 4, 56, 56)


def test_replay_rejects_out_of_bounds_box():
    with pytest.raises(ValueError):
        replay_augmentation(torch.zeros(8, 8, 3), AugmentationRecord((4, 0, 8, 8), False, 8))


def test_train_augmentation_requires_rng(corpus):
    with pytest.raises(ValueError):
        augment(corpus.images[0], "train")


def test_lesion_fraction_bookkeeping_under_crop(corpus):
    rng = np.random.default_rng(7)
    for i in range(50):
        mask = corpus.lesion_masks[i].float()
        _, rec = augment(corpus.images[i], "train", rng)
        x, y, w, h = rec.crop_box
        out = replay_augmentation(mask[..., None], rec)[..., 0]
        inside = mask[y:y + h, x:x + w].sum().item() / (w * h)
        # bilinear resampling preserves the mean up to edge effects
        assert abs(out.mean().item() - inside) <= 0.02
        assert out.mean().item() <= 0.15 * 64 * 64 / (w * h) + 0.02
