"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL
line (collected again in the pytest terminal summary).

The training criteria share one 20k-sample synthetic dataset and take roughly
half an hour on one core; deselect them with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest

from conftest import CRITERIA
from multidigit import evaluator, tensor_nn as nn, worked_example
from multidigit.dataio import Pipeline, augment_batch
from multidigit.experiments import arch_sweep, augmentation_pair
from multidigit.gradcheck import grad_check, max_relative_error, numeric_gradient, relative_error
from multidigit.network import (
    LayerSpec,
    NetworkConfig,
    build,
    count_parameters,
    desk_config,
    load_checkpoint,
    preset,
    save_checkpoint,
)
from multidigit.sequence_head import (
    SequenceDistribution,
    SequenceLabel,
    Transcription,
    brute_force_max_sequence,
    label_arrays,
    nll_loss_and_grad,
    nll_loss_and_grad_batch,
    predict_max_sequence,
)
from multidigit.synth import SynthConfig, synth_generate
from multidigit.trainer import PreparedData, TrainConfig, evaluate_arrays, prepare, train, validation_split


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line)
    CRITERIA.append(line)
    assert ok, line


# --------------------------------------------------------------------------
# decoding


def test_worked_example_golden():
    dist = worked_example.distribution()
    t = predict_max_sequence(dist)
    rows = worked_example.length_table(dist)
    text = "".join(str(c) for c in t.chars)
    problems = []
    if text != "175" or t.overflow:
        problems.append(f"winner {text!r}")
    if abs(t.log_prob - (-0.42144)) > 1e-3:
        problems.append(f"winner log-prob {t.log_prob:.5f}")
    for (label, _, _, total), want in zip(rows, worked_example.EXPECTED_TOTALS):
        if abs(total - want) > 1e-3:
            problems.append(f"L={label} total {total:.4f} vs printed {want}")
    detail = f"winner {text!r} at {t.log_prob:.5f}; " + ("all seven rows match" if not problems else "; ".join(problems))
    verdict("worked-example golden", not problems, detail)


def test_inference_oracle_equivalence():
    rng = np.random.default_rng(2024)
    cases = []
    for n in range(1, 6):
        for k in range(1, 11):
            if sum(k**l for l in range(n + 1)) + k**n <= 250_000:
                cases += [(n, k)] * 20
    while len(cases) < 1200:
        cases.append((int(rng.integers(1, 4)), int(rng.integers(1, 11))))
    mismatches = 0
    for n, k in cases:
        sharp = rng.uniform(0.2, 4.0)
        dist = SequenceDistribution.from_logits(rng.standard_normal(n + 2) * sharp, rng.standard_normal((n, k)) * sharp)
        fast, slow = predict_max_sequence(dist), brute_force_max_sequence(dist)
        if (fast.chars, fast.overflow) != (slow.chars, slow.overflow) or abs(fast.log_prob - slow.log_prob) > 1e-9:
            mismatches += 1
    verdict("inference oracle equivalence", mismatches == 0, f"{len(cases)} random distributions, {mismatches} mismatches")


# --------------------------------------------------------------------------
# gradients and loss


def _tiny():
    layers = (
        LayerSpec("conv", 6, kernel=3, activation="maxout", pieces=3, pool_stride=2, normalize=True),
        LayerSpec("conv", 3, kernel=3, pool_stride=1, normalize=True),
        LayerSpec("locally_connected", 2, kernel=3),
        LayerSpec("dense", 5),
    )
    return NetworkConfig((8, 8, 1), layers, max_len=2, alphabet_size=3)


def _model_loss(model, x, labels):
    lengths, chars = label_arrays(labels, model.config.max_len)
    out = model.forward(x, train=True, dropout=False)
    loss, d_len, d_chr, _ = nll_loss_and_grad_batch(out.length_logits, out.char_logits, lengths, chars)
    return loss, model.backward(out.cache, d_len, d_chr)


def _layer_checks(rng):
    distinct = lambda shape: rng.permutation(int(np.prod(shape))).reshape(shape).astype(np.float64) * 0.1
    checks = {
        "conv": (
            lambda x, w, b: nn.conv2d(x, w, b, 2),
            lambda dout, x, w, b: dict(zip("xwb", nn.conv2d_backward(dout, nn.conv2d_forward(x, w, b, 2)[1]))),
            {"x": rng.standard_normal((2, 6, 5, 2)), "w": rng.standard_normal((5, 5, 2, 3)), "b": rng.standard_normal(3)},
        ),
        "locally connected": (
            nn.locally_connected,
            lambda dout, x, w, b: dict(zip("xwb", nn.locally_connected_backward(dout, nn.locally_connected_forward(x, w, b)[1]))),
            {"x": rng.standard_normal((2, 3, 4, 2)), "w": rng.standard_normal((3, 4, 3, 3, 2, 2)), "b": rng.standard_normal((3, 4, 2))},
        ),
        "fully connected": (
            nn.fully_connected,
            lambda dout, x, w, b: dict(zip("xwb", nn.fully_connected_backward(dout, nn.fully_connected_forward(x, w, b)[1]))),
            {"x": rng.standard_normal((3, 5)), "w": rng.standard_normal((5, 4)), "b": rng.standard_normal(4)},
        ),
        "subtractive normalization": (
            nn.subtractive_normalize,
            lambda dout, x: {"x": nn.subtractive_normalize_backward(dout, nn.subtractive_normalize_forward(x)[1])},
            {"x": rng.standard_normal((2, 4, 5, 3))},
        ),
        "max pooling": (
            lambda x: nn.max_pool2d(x, 2),
            lambda dout, x: {"x": nn.max_pool2d_backward(dout, nn.max_pool2d_forward(x, 2)[1])},
            {"x": distinct((1, 5, 5, 2))},
        ),
        "maxout": (
            lambda x: nn.maxout(x, 3),
            lambda dout, x: {"x": nn.maxout_backward(dout, nn.maxout_forward(x, 3)[1])},
            {"x": distinct((3, 3, 6))},
        ),
        "rectifier": (
            nn.rectifier,
            lambda dout, x: {"x": nn.rectifier_backward(dout, x > 0)},
            {"x": distinct((4, 5)) - 1.95},
        ),
    }
    return {name: max_relative_error(grad_check(f, b, inputs)) for name, (f, b, inputs) in checks.items()}


def test_gradient_correctness():
    model = build(_tiny(), seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 8, 1))
    labels = [SequenceLabel((1, 2)), SequenceLabel((0,))]
    _, grads = _model_loss(model, x, labels)
    end_to_end = 0.0
    for name, p in model.params.items():
        numeric = numeric_gradient(lambda: _model_loss(model, x, labels)[0], p, eps=1e-5)
        end_to_end = max(end_to_end, relative_error(grads[name], numeric, floor=1e-6))

    len_logits, chr_logits = rng.standard_normal(4), rng.standard_normal((2, 3))
    lab = SequenceLabel((2,))
    loss_fn = lambda: nll_loss_and_grad(len_logits, chr_logits, lab)[0]
    _, d_len, d_chr = nll_loss_and_grad(len_logits, chr_logits, lab)
    head = max(
        relative_error(d_len, numeric_gradient(loss_fn, len_logits, 1e-6)),
        relative_error(d_chr, numeric_gradient(loss_fn, chr_logits, 1e-6)),
    )
    layers = _layer_checks(np.random.default_rng(3))
    layers["sequence loss"] = head
    worst_layer = max(layers.values())
    ok = model.parameter_count() <= 10**4 and end_to_end < 1e-3 and worst_layer < 1e-4
    detail = f"{model.parameter_count()} params, end-to-end {end_to_end:.2e} (<1e-3), worst layer {worst_layer:.2e} (<1e-4)"
    verdict("gradient correctness", ok, detail)


def test_masked_loss():
    rng = np.random.default_rng(5)
    bad = 0
    total = 0
    for n_max in (3, 5):
        for n in range(n_max):
            for _ in range(20):
                lab = SequenceLabel(tuple(rng.integers(0, 10, n)))
                _, d_len, d_chr = nll_loss_and_grad(rng.standard_normal(n_max + 2) * 3, rng.standard_normal((n_max, 10)) * 3, lab)
                total += 1
                if d_chr[n:].any() or not np.all(np.abs(d_chr[:n]).sum(axis=1) > 0):
                    bad += 1
    # the same through the network: heads beyond the label get zero weight gradient
    model = build(_tiny(), seed=4, dtype=np.float64)
    _, grads = _model_loss(model, rng.standard_normal((1, 8, 8, 1)), [SequenceLabel((1,))])
    net_ok = not grads["chars.w"][1].any() and not grads["chars.b"][1].any() and grads["chars.w"][0].any()
    verdict("masked loss", bad == 0 and net_ok, f"{total} labels with n < N, {bad} with leaked gradient; network heads masked: {net_ok}")


# --------------------------------------------------------------------------
# architecture and checkpoints


def test_architecture_fidelity():
    cfg = preset("svhn-paper")
    kinds = [l.kind for l in cfg.layers]
    conv = [l for l in cfg.layers if l.kind == "conv"]
    shapes = cfg.shapes()
    model = build(cfg, seed=0)
    out = model.forward(np.zeros((54, 54, 3), np.float32))
    ok = (
        kinds == ["conv"] * 8 + ["locally_connected"] + ["dense"] * 2
        and [l.width for l in conv] == [48, 64, 128, 160, 192, 192, 192, 192]
        and all(l.kernel == 5 for l in cfg.layers if l.kind != "dense")
        and [l.width for l in cfg.layers if l.kind == "dense"] == [3072, 3072]
        and cfg.input_shape == (54, 54, 3)
        and out.length_logits.shape == (7,)
        and out.char_logits.shape == (5, 10)
    )
    detail = f"8 conv + 1 LC + 2 dense, {count_parameters(cfg):,} params, feature shapes {shapes[0]} -> {shapes[-1]}"
    verdict("architecture fidelity", ok, detail)


# --------------------------------------------------------------------------
# training at desk scale

DESK_SAMPLES = 20_000


@pytest.fixture(scope="module")
def desk_data():
    t0 = time.process_time()
    manifest = synth_generate(SynthConfig(), DESK_SAMPLES, seed=0)
    pipe = Pipeline.for_input(desk_config().input_shape)
    train_idx, val_idx = validation_split([s.id for s in manifest.samples], 0.1)
    data = prepare(manifest, pipe, 1, train_idx), prepare(manifest, pipe, 1, val_idx)
    return data, time.process_time() - t0


@pytest.fixture(scope="module")
def trained_desk(desk_data):
    (train_data, val_data), prep_seconds = desk_data
    model = build(preset("desk"), seed=0)
    tc = TrainConfig(epochs=6, decay_every=2, learning_rate=0.01, augment=True)
    report = train(model, None, tc, Pipeline.for_input(model.config.input_shape), data=(train_data, val_data))
    return model, report, prep_seconds


@pytest.mark.slow
def test_desk_training(trained_desk, desk_data):
    model, report, prep_seconds = trained_desk
    acc = report.best_accuracy
    cpu_min = (prep_seconds + report.cpu_time) / 60
    n = len(desk_data[0][0]) + len(desk_data[0][1])
    ok = n >= 20_000 and acc >= 0.90 and cpu_min <= 30
    verdict("desk-scale training", ok, f"{n} images, best validation accuracy {acc:.4f} (>=0.90) in {cpu_min:.1f} CPU-min (<=30)")


def _random_record_sets(rng, count):
    for _ in range(count):
        size = int(rng.integers(1, 11))
        confs = rng.choice([0.05, 0.2, 0.4, 0.5, 0.7, 0.9, 0.97, 1.0], size)
        yield [
            evaluator.EvalRecord(str(i), Transcription((1,), float(np.log(c))), SequenceLabel((1,) if rng.random() < 0.7 else (2,)))
            for i, c in enumerate(confs)
        ]


def _enumerated_coverage(records, target):
    best = None
    for t in sorted({0.0} | {r.confidence for r in records}):
        kept = [r for r in records if r.confidence >= t]
        if kept and sum(r.correct for r in kept) / len(kept) >= target:
            best = max(best or 0.0, len(kept) / len(records))
    return best


def _monotone(records):
    pts = evaluator.coverage_curve(records, list(np.linspace(0, 1, 101)))
    covs = [p.coverage for p in pts]
    return all(b <= a for a, b in zip(covs, covs[1:]))


@pytest.mark.slow
def test_coverage_properties(trained_desk, desk_data):
    model, _, _ = trained_desk
    _, val = desk_data[0]
    images = augment_batch(val.resized, Pipeline.for_input(model.config.input_shape))
    records = evaluate_arrays(model, images, val.labels, val.ids)
    rng = np.random.default_rng(9)
    sets = list(_random_record_sets(rng, 300))
    monotone = all(_monotone(s) for s in sets) and _monotone(records)
    enum_bad = 0
    for s in sets:
        for target in (0.5, 0.9, 0.98, 1.0):
            got = evaluator.coverage_at_accuracy(s, target)
            want = _enumerated_coverage(s, target)
            if (got is None) != (want is None) or (got is not None and abs(got[1] - want) > 1e-12):
                enum_bad += 1
    acc = evaluator.sequence_accuracy(records)
    cov = evaluator.coverage_at_accuracy(records, 0.98)
    trained_ok = cov is not None and (acc >= 0.98 or cov[1] < 1.0)
    cov_text = "none" if cov is None else f"{cov[1]:.4f} at threshold {cov[0]:.4f}"
    detail = f"monotone on {len(sets) + 1} sets: {monotone}; enumeration mismatches {enum_bad}; desk accuracy {acc:.4f}, coverage@98% {cov_text}"
    verdict("coverage properties", monotone and enum_bad == 0 and trained_ok, detail)


SWEEP_STEPS = 1700


@pytest.mark.slow
def test_depth_trend(desk_data):
    (train_data, val_data), _ = desk_data
    t0 = time.process_time()
    rows = {r.name: r for r in arch_sweep([1, 3, 5], train_data, val_data, SWEEP_STEPS)}
    hours = (time.process_time() - t0) / 3600
    one, five = rows["desk-1"], rows["desk-5"]
    control = next(r for name, r in rows.items() if name.startswith("control"))
    ok = (
        five.best_accuracy >= one.best_accuracy + 0.05
        and control.params >= five.params
        and control.best_accuracy < five.best_accuracy
        and hours <= 2
    )
    summary = ", ".join(f"{r.name} {r.best_accuracy:.4f} ({r.params:,} params)" for r in rows.values())
    verdict("depth trend", ok, f"{SWEEP_STEPS} steps each: {summary}; {hours * 60:.0f} CPU-min")


AUG_TRAIN = 1500
AUG_EPOCHS = 40


@pytest.mark.slow
def test_augmentation_trend(desk_data):
    (train_data, val_data), _ = desk_data
    reduced = PreparedData(
        train_data.resized[:AUG_TRAIN], train_data.lengths[:AUG_TRAIN], train_data.chars[:AUG_TRAIN],
        train_data.labels[:AUG_TRAIN], train_data.ids[:AUG_TRAIN],
    )
    base = TrainConfig(epochs=AUG_EPOCHS, decay_every=AUG_EPOCHS // 3, dropout=False, seed=0)
    pair = augmentation_pair(reduced, val_data, preset("desk"), base)
    with_aug, without = pair["augment"].best_accuracy, pair["plain"].best_accuracy
    verdict(
        "augmentation trend",
        with_aug >= without,
        f"{AUG_TRAIN} training images, {AUG_EPOCHS} epochs: shifted crops {with_aug:.4f} vs center crops {without:.4f}",
    )


@pytest.mark.slow
def test_checkpoint_round_trip(trained_desk, tmp_path):
    model, _, _ = trained_desk
    path = save_checkpoint(tmp_path / "desk.npz", model, {"note": "round trip"})
    back, meta, _ = load_checkpoint(path)
    exact = back.config == model.config and all(
        back.params[k].dtype == v.dtype and np.array_equal(back.params[k], v) for k, v in model.params.items()
    )
    x = np.random.default_rng(0).standard_normal((4, 32, 64, 1)).astype(np.float32)
    same_out = np.array_equal(back.forward(x).char_logits, model.forward(x).char_logits)

    small = synth_generate(SynthConfig(max_len=3, length_weights=(1, 1)), 120, seed=11)
    cfg = desk_config(2, widths=(4, 8), dense=16, input_shape=(16, 32, 1), max_len=3, dropout=0.2)
    full = build(cfg, seed=0)
    tc = TrainConfig(epochs=3, batch_size=16, seed=3, checkpoint_dir=str(tmp_path / "full"))
    full_report = train(full, small, tc)
    resumed = build(cfg, seed=1)
    tc2 = TrainConfig(epochs=3, batch_size=16, seed=3, checkpoint_dir=str(tmp_path / "resumed"))
    part = train(resumed, small, tc2, resume_from=tmp_path / "full" / "epoch_000.npz")
    k = full_report.epochs[0].steps
    resume_ok = part.step_losses == full_report.step_losses[k:] and all(
        np.array_equal(resumed.params[p], full.params[p]) for p in full.params
    )
    verdict(
        "checkpoint round trip",
        exact and same_out and meta == {"note": "round trip"} and resume_ok,
        f"parameters bit-exact: {exact}; outputs identical: {same_out}; resumed losses identical over {len(part.step_losses)} steps: {resume_ok}",
    )
