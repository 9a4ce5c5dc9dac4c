import numpy as np
import pytest

from multidigit.dataio import Pipeline
from multidigit.network import build, desk_config, load_checkpoint
from multidigit.sequence_head import label_arrays, nll_loss_and_grad_batch
from multidigit.synth import SynthConfig, synth_generate
from multidigit.trainer import SGD, TrainConfig, augment_batch, prepare, sgd_step, train, validation_split

SHAPE = (16, 32, 1)


def small_config(dropout=0.0, dtype_depth=1):
    return desk_config(dtype_depth, widths=(4,) * dtype_depth, dense=16, input_shape=SHAPE, max_len=3, dropout=dropout)


@pytest.fixture(scope="module")
def manifest():
    return synth_generate(SynthConfig(max_len=3, length_weights=(1, 1)), 80, seed=5)


@pytest.fixture(scope="module")
def batch(manifest):
    pipe = Pipeline.for_input(SHAPE)
    data = prepare(manifest, pipe, 1, range(8))
    return augment_batch(data.resized, pipe), data.lengths, data.chars


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_zero_rate_leaves_parameters(batch):
    model = build(small_config(), seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    loss = sgd_step(model, *batch, SGD(model, 0.9), 0.0)
    assert np.isfinite(loss) and loss > 0
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_momentum_zero_is_plain_gradient_descent(batch):
    model = build(small_config(), seed=1, dtype=np.float64)
    images = batch[0].astype(np.float64)
    out = model.forward(images, train=True, dropout=False)
    _, d_len, d_chr, _ = nll_loss_and_grad_batch(out.length_logits, out.char_logits, batch[1], batch[2])
    grads = model.backward(out.cache, d_len, d_chr)
    expected = {k: v - 0.05 * grads[k] for k, v in model.params.items()}
    sgd_step(model, images, batch[1], batch[2], SGD(model, 0.0), 0.05, dropout=False)
    for k in expected:
        np.testing.assert_allclose(model.params[k], expected[k], rtol=0, atol=1e-9)


def test_momentum_accumulates(batch):
    model = build(small_config(), seed=1, dtype=np.float64)
    opt = SGD(model, 0.5)
    grads = {k: np.ones_like(v) for k, v in model.params.items()}
    p0 = model.params["length.b"].copy()
    opt.apply(model, grads, 0.1)
    opt.apply(model, grads, 0.1)
    np.testing.assert_allclose(model.params["length.b"], p0 - 0.1 - 0.15)


def test_overfits_a_single_example(batch):
    model = build(small_config(), seed=2)
    opt = SGD(model, 0.9)
    x, lengths, chars = batch[0][:1], batch[1][:1], batch[2][:1]
    losses = [sgd_step(model, x, lengths, chars, opt, 0.001, dropout=False) for _ in range(200)]
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0]
    assert np.all(np.diff(smooth[::20]) < 0)
    assert losses[-1] < 0.01


def test_empty_batch_rejected(batch):
    model = build(small_config(), seed=0)
    with pytest.raises(ValueError):
        sgd_step(model, batch[0][:0], batch[1][:0], batch[2][:0], SGD(model), 0.1)


def test_validation_split_is_deterministic():
    ids = [f"{i:06d}" for i in range(2000)]
    a = validation_split(ids, 0.1)
    assert a == validation_split(ids, 0.1)
    assert 150 < len(a[1]) < 250
    assert sorted(a[0] + a[1]) == list(range(2000))
    assert validation_split(ids, 0.0)[1] == []


def test_zero_epochs_keeps_initialization(manifest):
    model = build(small_config(), seed=3)
    init = {k: v.copy() for k, v in model.params.items()}
    report = train(model, manifest, TrainConfig(epochs=0))
    assert report.epochs == [] and report.step_losses == []
    for k in init:
        np.testing.assert_array_equal(model.params[k], init[k])


def test_empty_validation_split_rejected(manifest):
    with pytest.raises(ValueError, match="validation"):
        train(build(small_config()), manifest, TrainConfig(epochs=1, val_fraction=0.0))


def test_report_and_best_checkpoints(manifest, tmp_path):
    model = build(small_config(), seed=0)
    report = train(model, manifest, TrainConfig(epochs=2, batch_size=8, checkpoint_dir=str(tmp_path)))
    assert [e.epoch for e in report.epochs] == [0, 1]
    assert all(np.isfinite(e.train_loss) for e in report.epochs)
    assert report.epochs[-1].steps == len(report.step_losses)
    for name in ("best_accuracy.npz", "best_coverage.npz", "last.npz", "epoch_000.npz"):
        assert (tmp_path / name).is_file()
    _, meta, state = load_checkpoint(tmp_path / "last.npz")
    assert meta["epoch"] == 1 and meta["alphabet"] == "0123456789"
    assert Pipeline.from_dict(meta["pipeline"]) == Pipeline.for_input(SHAPE)
    assert "rng" in state
    report.to_json(tmp_path / "r.json")
    report.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("epoch,steps,train_loss")


def test_runs_without_dropout_are_bit_identical(manifest):
    cfg = TrainConfig(epochs=2, batch_size=8, dropout=False, seed=4)
    a, b = build(small_config(), seed=0), build(small_config(), seed=0)
    ra, rb = train(a, manifest, cfg), train(b, manifest, cfg)
    assert ra.step_losses == rb.step_losses
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_resume_reproduces_uninterrupted_run(manifest, tmp_path):
    cfg = small_config(dropout=0.3)
    full_dir, part_dir = tmp_path / "full", tmp_path / "part"
    tc = TrainConfig(epochs=3, batch_size=8, seed=7, checkpoint_dir=str(full_dir))
    full = build(cfg, seed=0)
    full_report = train(full, manifest, tc)

    resumed = build(cfg, seed=99)  # parameters are overwritten by the checkpoint
    tc_part = TrainConfig(epochs=3, batch_size=8, seed=7, checkpoint_dir=str(part_dir))
    part_report = train(resumed, manifest, tc_part, resume_from=full_dir / "epoch_000.npz")
    per_epoch = full_report.epochs[0].steps
    assert part_report.step_losses == full_report.step_losses[per_epoch:]
    for k in full.params:
        np.testing.assert_array_equal(resumed.params[k], full.params[k])


def test_divergence_is_reported_and_parameters_stay_finite(manifest):
    model = build(small_config(), seed=0)
    report = train(model, manifest, TrainConfig(epochs=3, batch_size=8, learning_rate=1e12, momentum=0.9))
    assert report.diverged
    assert all(np.isfinite(v).all() for v in model.params.values())


def test_label_arrays_feed_training(manifest):
    lengths, chars = label_arrays(manifest.labels(), manifest.max_len)
    assert lengths.min() >= 1 and lengths.max() <= 2
    assert ((chars >= 0).sum(axis=1) == lengths).all()
