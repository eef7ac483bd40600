"""The whole ingest-then-query story at desk scale.

1. Render a synthetic street and cut labelled patches out of it.
2. Train the cheap and the expensive network on those patches.
3. Ingest: the cheap network writes a Top-3 index and caches its activations
   at cuts 4 and 7.
4. Query: the expensive network classifies the test patches from pixels
   (baseline), from the cache with its own suffix weights (raw reuse) and
   from the cache with a suffix retrained on those activations.

Raw reuse is fast but wrong; the retrained suffix keeps the speed and gets the
accuracy back.  The default settings take about 3-4 minutes on one core;
``--quick`` shrinks everything to a ~15 second smoke run.

    python3 demos/desk_pipeline.py [--out DIR] [--quick]
"""

import argparse
import logging
import tempfile
from pathlib import Path

from splitinfer.pipeline import PipelineConfig, run_pipeline

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", type=Path, help="run directory (default: a temporary one)")
parser.add_argument("--quick", action="store_true", help="160 frames and one epoch per training run")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="  %(message)s")

cfg = PipelineConfig(n_frames=160, epochs=1, decay_epoch=1, repeats=2) if args.quick else PipelineConfig()
out = args.out or Path(tempfile.mkdtemp(prefix="desk-"))
reports = run_pipeline(out, cfg)

base = reports[0]
print(f"\nartifacts in {out}")
print(f"{'mode':<20} {'accuracy':>8} {'ms/image':>9} {'vs baseline':>12} {'predicted':>10}")
for r in reports:
    print(f"{r.mode:<20} {r.accuracy:>8.4f} {r.mean_latency * 1e3:>9.3f} "
          f"{r.mean_latency / base.mean_latency:>12.3f} {r.flops_predicted_fraction:>10.3f}")
