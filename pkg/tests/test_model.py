import math

import numpy as np
import pytest
import torch

from datspect.augment import AugmentationConfig
from datspect.imaging import TripletImage, write_image
from datspect.labels import Label
from datspect.model import (
    ClassifierHead,
    InceptionBackbone,
    SmallCNN,
    StepDecaySchedule,
    TrainConfig,
    TrainingError,
    bce_loss,
    build_model,
    expected_steps,
    forward,
    head_gradients,
    head_loss,
    load_checkpoint,
    lr_at,
    predict,
    save_checkpoint,
    train,
)
from datspect.splits import DatasetManifest, ManifestEntry


def toy_dataset(root, n_per_class=8, shape=(24, 20), seed=0):
    """PD images get a dim blob, controls a bright one; enough for a model to separate."""
    rng = np.random.default_rng(seed)
    entries = []
    for lab in (Label.CONTROL, Label.PD):
        (root / lab.value).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            px = rng.integers(0, 30, (*shape, 3)).astype(np.uint8)
            level = 250 if lab is Label.CONTROL else 90
            px[8:16, 6:14] = level
            sid = f"{lab.value.lower()}{i}"
            path = root / lab.value / f"{sid}.png"
            write_image(TripletImage(px, (0, 1, 2), sid), path)
            entries.append(ManifestEntry(sid, path, lab))
    return DatasetManifest(entries)


class TestSchedule:
    def test_examples(self):
        s = StepDecaySchedule()
        assert lr_at(s, 0) == 1e-3
        assert lr_at(s, 125) == pytest.approx(1e-4, rel=1e-12)
        assert lr_at(s, 499) == pytest.approx(1e-6, rel=1e-12)

    def test_trace_contract(self):
        s = StepDecaySchedule()
        trace = [lr_at(s, e) for e in range(500)]
        assert all(a >= b for a, b in zip(trace, trace[1:]))
        assert all(s.final_lr <= v <= s.initial_lr for v in trace)

    def test_clamps_at_floor(self):
        s = StepDecaySchedule(drop_factor=0.01, drop_period=10)
        assert lr_at(s, 1000) == s.final_lr

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at(StepDecaySchedule(), -1)

    @pytest.mark.parametrize("kw", [{"final_lr": 1e-2}, {"drop_factor": 0.0}, {"drop_period": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            StepDecaySchedule(**kw)


class TestLoss:
    def test_examples(self):
        assert bce_loss([1], [0.5]) == pytest.approx(math.log(2), abs=1e-12)
        assert bce_loss([1], [1.0]) == pytest.approx(0.0, abs=2e-7)
        assert bce_loss([0], [0.9]) == pytest.approx(-math.log(0.1), abs=1e-9)

    def test_batch_mean(self):
        assert bce_loss([1, 0], [0.5, 0.9]) == pytest.approx((math.log(2) - math.log(0.1)) / 2)

    def test_clipping_keeps_it_finite(self):
        assert math.isfinite(bce_loss([1], [0.0]))
        assert bce_loss([1], [0.0]) == pytest.approx(-math.log(1e-7))


class TestForward:
    def test_zero_head_gives_half(self):
        torch.manual_seed(0)
        model = build_model(TrainConfig(head_units=8))
        with torch.no_grad():
            model.head.dense2.weight.zero_()
            model.head.dense2.bias.zero_()
        imgs = np.random.default_rng(0).integers(0, 256, (3, 20, 18, 3), dtype=np.uint8)
        np.testing.assert_array_equal(forward(model, imgs), 0.5)

    def test_duplicates_get_identical_scores(self):
        model = build_model(TrainConfig(head_units=8))
        img = np.random.default_rng(1).integers(0, 256, (20, 18, 3), dtype=np.uint8)
        p = forward(model, np.stack([img, img, img]))
        assert p[0] == p[1] == p[2]
        assert np.all((p >= 0) & (p <= 1))

    def test_dropout_inactive_in_inference(self):
        model = build_model(TrainConfig(head_units=64, dropout=0.9))
        img = np.random.default_rng(2).integers(0, 256, (2, 20, 18, 3), dtype=np.uint8)
        np.testing.assert_array_equal(forward(model, img), forward(model, img))

    def test_gap_of_constant_map(self):
        head = ClassifierHead(4, units=3, dropout=0.0)
        fmap = torch.full((2, 4, 5, 6), 1.5)
        pooled = fmap.mean(dim=(2, 3))
        np.testing.assert_array_equal(pooled.numpy(), 1.5)
        with torch.no_grad():
            head.dense1.weight.copy_(torch.eye(3, 4))
            head.dense1.bias.zero_()
            head.dense2.weight.fill_(1.0)
            head.dense2.bias.zero_()
            assert head(fmap).tolist() == [4.5, 4.5]

    def test_sigmoid_monotone_in_logit(self):
        head = ClassifierHead(2, units=2, dropout=0.0).eval()
        fmap = torch.ones((1, 2, 1, 1))
        probs = []
        for b in (-2.0, -1.0, 0.0, 1.0, 2.0):
            with torch.no_grad():
                head.dense2.bias.fill_(b)
                probs.append(torch.sigmoid(head(fmap)).item())
        assert all(a < b for a, b in zip(probs, probs[1:]))

    def test_shape_mismatch(self):
        model = build_model(TrainConfig(head_units=8))
        with pytest.raises(ValueError):
            forward(model, np.zeros((2, 10, 10, 4), np.uint8))


def _head_gradcheck(seed, channels=5, units=4, n=6, h=1e-6):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    head = ClassifierHead(channels, units, dropout=0.0).double().eval()
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, 0.8, p.shape)))
    fmap = rng.normal(0, 1, (n, channels, 3, 2))
    y = rng.integers(0, 2, n).astype(np.float64)
    ft, yt = torch.from_numpy(fmap), torch.from_numpy(y)
    analytic = head_gradients(head, fmap, y)
    loss = head_loss(head, ft, yt)
    head.zero_grad()
    loss.backward()
    worst = 0.0
    for name, param in head.named_parameters():
        fd = np.zeros(param.shape)
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = head_loss(head, ft, yt).item()
                flat[i] = orig - h
                down = head_loss(head, ft, yt).item()
                flat[i] = orig
            fd.reshape(-1)[i] = (up - down) / (2 * h)
        a = analytic[name]
        rel = np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
        np.testing.assert_allclose(param.grad.numpy(), a, rtol=1e-9, atol=1e-12)
    return worst


def test_head_gradient_check():
    assert max(_head_gradcheck(s) for s in range(5)) <= 1e-4


class TestTraining:
    def test_fixed_batch_loss_decreases(self, tmp_path):
        m = toy_dataset(tmp_path, n_per_class=4)
        cfg = TrainConfig(epochs=50, batch_size=8, head_units=16, dropout=0.0, backbone_mode="frozen", seed=3)
        model, hist = train(m, None, cfg, AugmentationConfig.identity(), StepDecaySchedule())
        assert not any(p.requires_grad for p in model.backbone.parameters())
        smooth = np.convolve(hist.train_loss, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(smooth) < 0)

    def test_history_and_lr_trace(self, tmp_path):
        m = toy_dataset(tmp_path, n_per_class=3)
        sched = StepDecaySchedule(drop_period=2)
        cfg = TrainConfig(epochs=7, batch_size=4, head_units=8)
        _, hist = train(m, m, cfg, AugmentationConfig(), sched)
        assert len(hist.train_loss) == len(hist.train_accuracy) == len(hist.lr) == 7
        assert hist.lr == [lr_at(sched, e) for e in range(7)]
        assert hist.val_loss is not None and 0.0 <= hist.val_accuracy <= 1.0
        assert expected_steps(len(m), cfg) == 7 * 2

    def test_reproducible(self, tmp_path):
        m = toy_dataset(tmp_path, n_per_class=3)
        cfg = TrainConfig(epochs=3, batch_size=4, head_units=8, seed=11)
        _, h1 = train(m, m, cfg, AugmentationConfig())
        _, h2 = train(m, m, cfg, AugmentationConfig())
        assert h1.as_dict() == h2.as_dict()

    def test_learns_toy_problem(self, tmp_path):
        m = toy_dataset(tmp_path, n_per_class=8)
        cfg = TrainConfig(epochs=25, batch_size=4, head_units=32, seed=0)
        model, hist = train(m, None, cfg, AugmentationConfig(0.05, 0.05, (0.9, 1.1), 0.5))
        preds = predict(model, m)
        acc = np.mean([(p.score >= 0.5) == p.truth.positive for p in preds])
        assert acc >= 0.9

    def test_single_class_rejected(self, tmp_path):
        m = toy_dataset(tmp_path, n_per_class=2)
        only_pd = DatasetManifest(m.by_label(Label.PD))
        with pytest.raises(TrainingError):
            train(only_pd, None, TrainConfig(epochs=1))

    def test_image_load_failure(self, tmp_path):
        from datspect.model import ImageLoadError

        m = toy_dataset(tmp_path, n_per_class=2)
        m.entries[0].image_path.unlink()
        with pytest.raises(ImageLoadError):
            train(m, None, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    m = toy_dataset(tmp_path / "d", n_per_class=2)
    cfg = TrainConfig(epochs=2, batch_size=4, head_units=8)
    model, hist = train(m, None, cfg)
    save_checkpoint(tmp_path / "c.pt", model, cfg, StepDecaySchedule(), hist)
    back, cfg2, sched = load_checkpoint(tmp_path / "c.pt")
    assert cfg2 == cfg and sched == StepDecaySchedule()
    assert [p.score for p in predict(back, m)] == [p.score for p in predict(model, m)]


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


def test_small_cnn_output_channels():
    out = SmallCNN()(torch.zeros(2, 3, 109, 91))
    assert out.shape == (2, 64, 13, 11)


def test_inception_backbone_contract(tmp_path):
    torch.manual_seed(0)
    bb = InceptionBackbone().eval()
    x = torch.rand(1, 3, 109, 91)
    with torch.no_grad():
        fmap = bb(x)
    assert fmap.shape == (1, 2048, 8, 8)
    # a saved state dict (classifier keys included, as published weights have them) reloads exactly
    from torchvision.models import inception_v3

    net = inception_v3(weights=None, aux_logits=True, init_weights=True)
    torch.save(net.state_dict(), tmp_path / "w.pt")
    loaded = InceptionBackbone(str(tmp_path / "w.pt")).eval()
    assert torch.equal(loaded.features[0].conv.weight, net.Conv2d_1a_3x3.conv.weight)
    loaded.set_trainable(False)
    assert not any(p.requires_grad for p in loaded.parameters())
