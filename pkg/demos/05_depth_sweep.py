"""Shallow versus deep at an equal step budget.

A one-layer network, made wide enough to carry more parameters than the
five-layer one, is included as a control: size alone does not close the gap.
The defaults run in roughly ten minutes.
"""

import sys

from multidigit.dataio import Pipeline
from multidigit.experiments import arch_sweep, write_sweep_csv
from multidigit.synth import SynthConfig, synth_generate
from multidigit.trainer import prepare, validation_split

count = int(sys.argv[1]) if len(sys.argv) > 1 else 6000
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 500

manifest = synth_generate(SynthConfig(), count, seed=0)
pipe = Pipeline.for_input((32, 64, 1))
train_idx, val_idx = validation_split([s.id for s in manifest.samples], 0.1)
rows = arch_sweep([1, 3, 5], prepare(manifest, pipe, 1, train_idx), prepare(manifest, pipe, 1, val_idx), steps, log=print)
write_sweep_csv(rows, sys.stdout)
