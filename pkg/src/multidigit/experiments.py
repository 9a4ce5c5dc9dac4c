"""Controlled comparisons at desk scale: depth sweep and augmentation pairs."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, replace

from .dataio import Pipeline
from .network import NetworkConfig, build, count_parameters, desk_config
from .trainer import PreparedData, TrainConfig, train


@dataclass
class SweepRow:
    name: str
    depth: int
    params: int
    steps: int
    best_accuracy: float
    final_accuracy: float
    cpu_seconds: float


def shallow_control(deep: NetworkConfig, dense: int = 64) -> NetworkConfig:
    """One conv layer as wide as the widest layer of ``deep``, with the dense
    layer grown until the parameter count is at least that of ``deep``."""
    width = max(l.width for l in deep.layers if l.kind == "conv")
    target = count_parameters(deep)
    while True:
        cfg = desk_config(
            1,
            widths=(width,),
            dense=dense,
            input_shape=deep.input_shape,
            max_len=deep.max_len,
            alphabet_size=deep.alphabet_size,
            name=f"control-1x{width}",
        )
        if count_parameters(cfg) >= target:
            return cfg
        dense *= 2


def budget_config(base: TrainConfig, steps: int, n_train: int) -> TrainConfig:
    """``base`` limited to ``steps`` updates, with the learning rate halved
    at each third of the run."""
    per_epoch = math.ceil(n_train / base.batch_size)
    epochs = math.ceil(steps / per_epoch)
    return replace(base, epochs=epochs, max_steps=steps, decay_every=max(1, math.ceil(epochs / 3)))


def run_one(cfg: NetworkConfig, data, pipeline: Pipeline, tc: TrainConfig, seed: int = 0) -> SweepRow:
    model = build(cfg, seed=seed)
    t0 = time.process_time()
    report = train(model, None, tc, pipeline, data=data)
    depth = sum(l.kind == "conv" for l in cfg.layers)
    final = report.epochs[-1].val_accuracy if report.epochs else float("nan")
    steps = report.epochs[-1].steps if report.epochs else 0
    return SweepRow(cfg.name, depth, model.parameter_count(), steps, report.best_accuracy, final, time.process_time() - t0)


def arch_sweep(
    depths,
    train_data: PreparedData,
    val_data: PreparedData,
    steps: int,
    base: TrainConfig | None = None,
    control: bool = True,
    input_shape=(32, 64, 1),
    max_len: int = 5,
    alphabet_size: int = 10,
    log=None,
) -> list[SweepRow]:
    """Train one desk model per depth for the same number of steps.

    With ``control`` a shallow model at least as large as the deepest one
    is trained under the same budget.
    """
    depths = sorted(set(int(d) for d in depths))
    if not depths or depths[0] < 1:
        raise ValueError("depths must be positive integers")
    base = base or TrainConfig(dropout=False)
    tc = budget_config(base, steps, len(train_data))
    configs = [desk_config(d, input_shape=input_shape, max_len=max_len, alphabet_size=alphabet_size) for d in depths]
    if control:
        configs.append(shallow_control(configs[-1]))
    pipeline = Pipeline.for_input(input_shape)
    rows = []
    for cfg in configs:
        row = run_one(cfg, (train_data, val_data), pipeline, tc, seed=base.seed)
        if log is not None:
            log(f"{row.name}: {row.params} params, best accuracy {row.best_accuracy:.4f} ({row.cpu_seconds:.0f}s)")
        rows.append(row)
    return rows


SWEEP_COLUMNS = ["name", "depth", "params", "steps", "best_accuracy", "final_accuracy"]


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    """One row per model; ``path`` may be an open text file."""
    if not hasattr(path, "write"):
        with open(path, "w", newline="") as fh:
            return write_sweep_csv(rows, fh)
    w = csv.writer(path, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.name, r.depth, r.params, r.steps, f"{r.best_accuracy:.6f}", f"{r.final_accuracy:.6f}"])


def augmentation_pair(
    train_data: PreparedData,
    val_data: PreparedData,
    cfg: NetworkConfig,
    base: TrainConfig,
) -> dict[str, SweepRow]:
    """Same model, data, seed and step count with and without random shifts."""
    pipeline = Pipeline.for_input(cfg.input_shape)
    out = {}
    for augment in (True, False):
        tc = replace(base, augment=augment)
        out["augment" if augment else "plain"] = run_one(cfg, (train_data, val_data), pipeline, tc, seed=base.seed)
    return out


def rows_as_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
