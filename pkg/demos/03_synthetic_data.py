"""Render synthetic street numbers and follow one through preprocessing.

Writes a few PNGs to ./demo_out so the crops can be inspected.
"""

from pathlib import Path

import numpy as np

from multidigit.dataio import Pipeline, write_image
from multidigit.synth import SynthConfig, synth_generate

out = Path("demo_out")
out.mkdir(exist_ok=True)

manifest = synth_generate(SynthConfig(), 8, seed=1)
pipe = Pipeline.for_input((32, 64, 1))
print(f"pipeline: union box grown by {pipe.expand:.0%}, resized to {pipe.resize}, cropped to {pipe.crop}")

rng = np.random.default_rng(0)
for s in manifest.samples:
    stage_one = pipe.stage_one(s.array, s.boxes)
    crops = [pipe.stage_two(stage_one, rng, train=True) for _ in range(3)]
    write_image(out / f"{s.id}_raw.png", s.array)
    write_image(out / f"{s.id}_box.png", stage_one)
    # training crops are mean-subtracted; shift back for viewing
    strip = np.concatenate([c - c.min() for c in crops], axis=1)
    write_image(out / f"{s.id}_crops.png", strip / max(strip.max(), 1e-6))
    print(f"{s.id}: label {s.text!r:8} {len(s.boxes)} boxes, raw {s.array.shape[:2]}")

print(f"\nimages in {out.resolve()}")
