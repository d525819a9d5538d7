import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from foodseg.dataset import class_frequency_report, load_dataset
from foodseg.evaluation import (
    ConfusionMatrix, confusion_update, evaluate_dataset, miou, predict_sliding, predict_whole,
    sliding_logits, window_origins,
)


class ConvModel(torch.nn.Module):
    """Translation-aware toy model: zero padding makes logits depend on window placement."""

    def __init__(self, num_classes=4, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.num_classes = num_classes
        self.conv = torch.nn.Conv2d(3, num_classes, 5, padding=2)

    def forward(self, x):
        return self.conv(x)


def test_perfect_prediction_diagonal():
    gt = np.array([[0, 1], [2, 2]])
    m = confusion_update(ConfusionMatrix(3), gt, gt)
    assert np.array_equal(m.counts, np.diag([1, 1, 2]))
    assert miou(m).miou == 1.0


def test_single_pixel_entry():
    m = ConfusionMatrix(4).update(np.array([[3]]), np.array([[2]]))
    assert m.counts[2, 3] == 1 and m.total == 1


def test_shape_mismatch():
    with pytest.raises(ValueError, match="differ in shape"):
        ConfusionMatrix(3).update(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update(np.full((2, 2), 3), np.zeros((2, 2), int))


def test_two_class_hand_case():
    report = miou(ConfusionMatrix(2, np.array([[3, 1], [1, 3]])))
    assert report.iou.tolist() == [0.6, 0.6]
    assert report.miou == 0.6


def test_absent_class_excluded():
    counts = np.array([[3, 1, 0], [1, 3, 0], [0, 0, 0]])
    report = miou(ConfusionMatrix(3, counts))
    assert np.isnan(report.iou[2])
    assert report.miou == 0.6
    assert report.miou_no_background == 0.6


def test_empty_matrix():
    with pytest.raises(ValueError, match="empty"):
        miou(ConfusionMatrix(3))


def test_background_toggle():
    counts = np.array([[10, 0], [2, 2]])
    report = miou(ConfusionMatrix(2, counts))
    assert report.miou == pytest.approx((10 / 12 + 2 / 4) / 2)
    assert report.miou_no_background == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_relabeling_invariance(seed):
    rng = np.random.default_rng(seed)
    c = 6
    gt = rng.integers(0, c, (12, 12))
    pred = np.where(rng.random((12, 12)) < 0.6, gt, rng.integers(0, c, (12, 12)))
    perm = rng.permutation(c)
    a = miou(ConfusionMatrix(c).update(pred, gt)).miou
    b = miou(ConfusionMatrix(c).update(perm[pred], perm[gt])).miou
    assert a == pytest.approx(b, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), cut=st.integers(0, 10))
def test_split_additivity_and_commutativity(seed, cut):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 5, (10, 7))
    pred = rng.integers(0, 5, (10, 7))
    whole = ConfusionMatrix(5).update(pred, gt)
    top = ConfusionMatrix(5).update(pred[:cut], gt[:cut])
    bottom = ConfusionMatrix(5).update(pred[cut:], gt[cut:])
    assert top + bottom == whole
    assert bottom + top == whole
    assert whole.total == gt.size


def test_window_origins_cover():
    assert window_origins(768, 512, 341) == [0, 256]
    assert window_origins(512, 512, 341) == [0]
    assert window_origins(100, 64, 32) == [0, 32, 36]
    for length, crop, stride in [(768, 512, 341), (97, 32, 21), (200, 64, 64)]:
        cover = np.zeros(length, int)
        for o in window_origins(length, crop, stride):
            cover[o:o + crop] += 1
        assert cover.min() >= 1
    with pytest.raises(ValueError):
        window_origins(100, 32, 40)


def test_sliding_matches_brute_force_oracle():
    model = ConvModel().eval()
    image = torch.randn(3, 96, 96, generator=torch.Generator().manual_seed(1))
    crop, stride = 64, 32
    ours = sliding_logits(model, image, crop, stride, 4)
    starts = sorted({o for o in range(0, 96 - crop + 1, stride)} | {96 - crop})
    with torch.no_grad():
        windows = {(y, x): model(image[None, :, y:y + crop, x:x + crop])[0] for y in starts for x in starts}
    oracle = torch.zeros(4, 96, 96)
    for i in range(96):
        for j in range(96):
            vals = [w[:, i - y, j - x] for (y, x), w in windows.items()
                    if y <= i < y + crop and x <= j < x + crop]
            oracle[:, i, j] = torch.stack(vals).mean(0)
    torch.testing.assert_close(ours, oracle, atol=1e-6, rtol=1e-6)


def test_exact_tiling_equals_per_tile_forward():
    model = ConvModel().eval()
    image = torch.randn(3, 128, 96)
    ours = sliding_logits(model, image, 32, 32, 4)
    with torch.no_grad():
        rows = [torch.cat([model(image[None, :, y:y + 32, x:x + 32])[0] for x in range(0, 96, 32)], -1)
                for y in range(0, 128, 32)]
    assert torch.equal(ours, torch.cat(rows, -2))


def test_image_not_larger_than_crop():
    model = ConvModel().eval()
    image = torch.randn(3, 64, 64)
    with torch.no_grad():
        whole = model(image[None])[0].argmax(0)
    assert torch.equal(predict_sliding(model, image, 64), whole)
    small = predict_sliding(model, torch.randn(3, 20, 30), 64)
    assert small.shape == (20, 30)
    assert predict_whole(model, image, 64).shape == (64, 64)


def test_evaluate_dataset_report(toy_root, toy_train):
    model = ConvModel(num_classes=5).eval()
    freq = class_frequency_report(toy_train, load_dataset(toy_root, "test"))
    report = evaluate_dataset(model, toy_train, crop=64, frequency=freq)
    assert len(report.rows()) == 5
    assert report.to_csv().splitlines()[0] == "class_id,name,iou,gt_pixels,train_images"
    assert report.gt_pixels.sum() == 8 * 64 * 64
    text = report.summary()
    assert "49.4" in text and "41.1" in text
    whole = evaluate_dataset(model, toy_train, crop=64, mode="whole")
    assert whole.miou == pytest.approx(report.miou)
    with pytest.raises(ValueError):
        evaluate_dataset(ConvModel(num_classes=3), toy_train, crop=64)
