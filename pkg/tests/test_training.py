import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sidetune.data import load_corpus, split_random
from sidetune.errors import DivergedLoss, EmptyEvalSet, InvalidConfig, OutOfRange
from sidetune.fusion import validate_alphas
from sidetune.model import build_model
from sidetune.text import EmbeddingTable, TextClassifier, TextEncoderConfig
from sidetune.training import (
    EvalReport,
    Featurizer,
    TimingBreakdown,
    TrainConfig,
    evaluate,
    lr_at,
    make_optimizer,
    profile_inference,
    report_from_predictions,
    state_hash,
    sweep_alphas,
    train,
)
from sidetune.data import OcrClient
from sidetune.vision import VisionConfig

TEXT = TextEncoderConfig(filters_per_window=16, num_classes=2)
VISION = VisionConfig(width_mult=0.25, input_side=64, channel_mean=(0.5,) * 3, channel_std=(0.25,) * 3)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    from sidetune.synthetic import make_corpus

    paths = make_corpus(tmp_path_factory.mktemp("train_corpus"), per_class=16)
    corpus = load_corpus(paths["image_root"], paths["text_root"])
    split = split_random(corpus.samples, 0, (24, 4, 4), corpus.class_names)
    table = EmbeddingTable.load(paths["embeddings"])
    return split, Featurizer(VISION, TEXT, table), paths


def _model(alphas=(0.2, 0.3, 0.5), fc=None):
    return build_model(VISION, TEXT, list(alphas), 2, fc)


@pytest.mark.parametrize("epoch, max_epochs, expected", [
    (100, 100, 0.1), (25, 100, 0.05), (1, 100, 0.01), (0, 100, 0.0), (5, 10, 0.1 * math.sqrt(0.5)),
])
def test_lr_printed_schedule(epoch, max_epochs, expected):
    assert abs(lr_at(epoch, TrainConfig(max_epochs=max_epochs)) - expected) < 1e-12


def test_lr_schedule_identity_and_monotone():
    cfg = TrainConfig(max_epochs=100)
    values = [lr_at(e, cfg) for e in range(101)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    for e, v in enumerate(values):
        assert abs(v**2 * cfg.max_epochs / cfg.base_lr**2 - e) < 1e-9


def test_lr_inverted_and_range():
    cfg = TrainConfig(max_epochs=100, schedule="inverted")
    assert lr_at(0, cfg) == pytest.approx(0.1, abs=1e-15)
    assert lr_at(100, cfg) == 0
    assert lr_at(75, cfg) == pytest.approx(0.05, abs=1e-12)
    with pytest.raises(OutOfRange):
        lr_at(101, cfg)
    with pytest.raises(OutOfRange):
        lr_at(-1, cfg)


@pytest.mark.parametrize("kw", [dict(max_epochs=0), dict(batch_size=0), dict(momentum=1.0),
                                dict(base_lr=0), dict(schedule="cosine")])
def test_train_config_validation(kw):
    with pytest.raises(InvalidConfig):
        TrainConfig(**kw)


def test_reference_train_configs():
    t, r = TrainConfig.tobacco(), TrainConfig.rvl_cdip()
    assert (t.max_epochs, t.batch_size, t.momentum, t.base_lr) == (100, 16, 0.9, 0.1)
    assert (r.max_epochs, r.batch_size) == (10, 40)


@pytest.mark.parametrize("c", [2, 10, 16])
def test_cross_entropy_of_uniform_scores(c):
    loss = torch.nn.functional.cross_entropy(torch.zeros(1, c, dtype=torch.float64), torch.tensor([0]))
    assert abs(loss.item() - math.log(c)) < 1e-6


def test_sgd_momentum_two_steps_by_hand():
    # f(w) = 0.5 * (w . x - y)^2 ; grad = (w . x - y) x
    x, y = np.array([1.0, 2.0]), 1.0
    w = np.array([0.5, -0.25])
    lr, mu = 0.1, 0.9
    v = np.zeros(2)
    expected = []
    for _ in range(2):
        g = (w @ x - y) * x
        v = mu * v + g
        w = w - lr * v
        expected.append(w.copy())

    param = torch.tensor([0.5, -0.25], dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([param], TrainConfig(momentum=mu))
    for g_ in opt.param_groups:
        g_["lr"] = lr
    xt = torch.tensor(x)
    for want in expected:
        loss = 0.5 * (param @ xt - y) ** 2
        opt.zero_grad()
        loss.backward()
        opt.step()
        np.testing.assert_allclose(param.detach().numpy(), want, rtol=0, atol=1e-15)


def test_report_examples():
    r = report_from_predictions([0, 1, 1, 2], [0, 1, 0, 2], ["a", "b", "c"])
    assert r.overall_accuracy == 0.75
    assert r.per_class_accuracy == {"a": 1.0, "b": 0.5, "c": 1.0}
    r = report_from_predictions([1, 1, 1], [1, 1, 1], ["a", "b", "c"])
    assert r.per_class_accuracy == {"b": 1.0}
    with pytest.raises(EmptyEvalSet):
        report_from_predictions([], [], ["a"])


@settings(max_examples=200, deadline=None)
@given(c=st.integers(1, 8), data=st.data())
def test_report_internal_consistency(c, data):
    n = data.draw(st.integers(1, 60))
    labels = data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    preds = data.draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    names = [str(k) for k in range(c)]
    r = report_from_predictions(labels, preds, names)
    correct = sum(a == b for a, b in zip(labels, preds))
    assert abs(r.overall_accuracy - correct / n) < 1e-12
    assert abs(r.overall_accuracy - np.trace(r.confusion) / r.num_samples) < 1e-12
    support = r.confusion.sum(axis=1)
    weighted = sum(r.per_class_accuracy[names[k]] * support[k] for k in range(c) if support[k])
    assert abs(weighted / n - r.overall_accuracy) < 1e-12
    assert EvalReport.from_dict(r.to_dict()).to_dict() == r.to_dict()


def test_train_keeps_base_and_is_seeded(setup, tmp_path):
    split, feat, _ = setup
    cfg = TrainConfig(max_epochs=2, batch_size=8, seed=3, checkpoint_dir=str(tmp_path))
    m1 = _model((1.0, 0.0, 0.0))
    h0 = state_hash(m1.base)
    side0 = {k: v.clone() for k, v in m1.sides[0].state_dict().items()}
    _, hist1 = train(m1, split, cfg, feat, cache=True)
    assert hist1.base_hash_before == hist1.base_hash_after == h0 == state_hash(m1.base)
    assert (tmp_path / "best.pt").exists()
    # alpha_1 = 0: the image side gets no gradient and stays put (BN stats aside)
    for k, v in m1.sides[0].named_parameters():
        assert torch.equal(v, side0[k]), k

    torch.manual_seed(11)
    m2 = _model()
    torch.manual_seed(11)
    m3 = _model()
    _, ha = train(m2, split, TrainConfig(max_epochs=1, batch_size=8, seed=5), feat)
    _, hb = train(m3, split, TrainConfig(max_epochs=1, batch_size=8, seed=5), feat)
    assert ha.epochs[0]["train_loss"] == hb.epochs[0]["train_loss"]
    assert len(hist1.epochs) == 2 and {"val_loss", "val_accuracy", "lr_end"} <= set(hist1.epochs[0])


def test_train_without_validation_keeps_last(setup):
    split, feat, _ = setup
    no_val = type(split)(split.train, [], split.test, split.class_names)
    _, hist = train(_model(), no_val, TrainConfig(max_epochs=2, batch_size=8), feat, cache=True)
    assert hist.best_epoch == 2 and hist.best_val_accuracy is None


class _NanModel(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(2))

    def forward(self, image, text):
        return self.w.expand(image.shape[0], 2) * float("nan")


def test_diverged_loss_aborts_with_checkpoint(setup, tmp_path):
    split, feat, _ = setup
    with pytest.raises(DivergedLoss):
        train(_NanModel(), split, TrainConfig(max_epochs=1, batch_size=8, checkpoint_dir=str(tmp_path)), feat)
    assert (tmp_path / "last_finite.pt").exists()


def test_text_only_baseline_trains(setup):
    split, feat, _ = setup
    model, hist = train(TextClassifier(TEXT), split, TrainConfig(max_epochs=3, batch_size=8), feat, cache=True)
    r = evaluate(model, split.test, feat, split.class_names)
    assert r.num_samples == 4 and hist.base_hash_before is None


def test_evaluate_is_deterministic(setup):
    split, feat, _ = setup
    model = _model()
    a = evaluate(model, split.test, feat, split.class_names)
    b = evaluate(model, split.test, feat, split.class_names)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(EmptyEvalSet):
        evaluate(model, [], feat, split.class_names)


def _fake_report(acc, n=10):
    k = int(round(acc * n))
    return report_from_predictions([0] * n, [0] * k + [1] * (n - k), ["a", "b"])


def test_sweep_grid_cardinality_and_order():
    from sidetune.pipeline import DEFAULT_GRID

    assert len(DEFAULT_GRID) == 12
    calls = []

    def run_one(alpha, fc, backbone, i):
        calls.append((alpha.alphas, fc, backbone, i))
        return _fake_report(0.5)

    grid = list(reversed(DEFAULT_GRID))
    rows = sweep_alphas(grid, [None, 512, 1024], ["mobilenet_v2"], run_one)
    assert len(rows) == 36 and len(calls) == 36
    assert len({c[3] for c in calls}) == 36
    for variant in ("no-fc", "fc512", "fc1024"):
        a2 = [r.alpha.alphas[2] for r in rows if r.variant == variant]
        assert len(a2) == 12 and a2 == sorted(a2)


def test_sweep_single_config_equals_direct_run():
    expected = _fake_report(0.7)
    rows = sweep_alphas([[0.2, 0.3, 0.5]], [1024], ["mobilenet_v2"], lambda *a: expected)
    assert len(rows) == 1 and rows[0].report is expected and rows[0].variant == "fc1024"


def test_sweep_validates_before_running():
    ran = []
    with pytest.raises(Exception) as exc:
        sweep_alphas([[0.2, 0.3, 0.5], [0.5, 0.6, 0.5]], [None], ["m"], lambda *a: ran.append(a))
    assert type(exc.value).__name__ == "ConstraintViolation" and ran == []


def test_sweep_parallel_matches_sequential():
    def run_one(alpha, fc, backbone, i):
        return _fake_report(alpha.alphas[2])

    grid = [[0.3, 0.2, 0.5], [0.4, 0.4, 0.2], [0.3, 0.3, 0.4]]
    seq = sweep_alphas(grid, [None, 512], ["m"], run_one)
    par = sweep_alphas(grid, [None, 512], ["m"], run_one, jobs=3)
    assert [(r.alpha, r.fc_width, r.report.overall_accuracy) for r in seq] == \
           [(r.alpha, r.fc_width, r.report.overall_accuracy) for r in par]


def test_profile_stages(setup, fake_ocr):
    split, feat, _ = setup
    model = _model()
    sample = split.test[0]
    t1, scores = profile_inference(model, feat, sample.image_path, text_path=sample.text_path, runs=1)
    t5, _ = profile_inference(model, feat, sample.image_path, text_path=sample.text_path, runs=5)
    assert scores.shape == (2,)
    assert t1.ocr_ms == 0 and t5.runs == 5
    assert set(t1.to_dict()) == set(t5.to_dict())
    for t in (t1, t5):
        assert all(getattr(t, s) >= 0 for s in TimingBreakdown.STAGES)
        assert t.base_ms > 0 and t.side_image_ms > 0 and t.side_text_ms > 0
        assert t.total_ms >= t.stage_sum()
    t_ocr, _ = profile_inference(model, feat, sample.image_path, ocr=OcrClient(engine=fake_ocr), runs=2)
    assert t_ocr.ocr_ms > 0 and t_ocr.total_ms >= t_ocr.stage_sum()
