"""End-to-end interference suppression on a simulated scene.

Builds an interfered echo, runs the detect/mask/subtract/resynthesize
pipeline with the oracle mask, compares it against the classical notch
baseline, and reports image-quality numbers plus per-target energy
retention. Writes before/after range-doppler images as PGMs.

Run:  python3 demos/demo_suppression_pipeline.py [out_dir]
"""

import os
import sys

import numpy as np

from rfi_forge import io_formats, metrics
from rfi_forge.datasets import ScenarioSpec, make_scenario
from rfi_forge.signal_model import RfiKind
from rfi_forge.suppression import (PipelineConfig, notch_filter_echo,
                                   range_doppler_image, suppress_pipeline,
                                   target_neighborhood_energy)

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
os.makedirs(out_dir, exist_ok=True)

scn = ScenarioSpec(kind=RfiKind.NBI, sir_db=-20.0, pulse_fraction=0.5,
                   n_targets=4)
echo, mixed, rfi_truth, flags, scene = make_scenario(scn, seed=42)
print(f"scenario: {scn.kind.name} at SIR {scn.sir_db:+.0f} dB on "
      f"{int(flags.sum())}/{len(flags)} pulses, {len(scene.targets)} targets")

cfg = PipelineConfig(use_oracle_mask=True)
suppressed, masks, detected = suppress_pipeline(mixed, cfg, rfi_truth=rfi_truth)
print(f"detector flagged {int(detected.sum())} pulses "
      f"(truth: {int(flags.sum())})")
occ = np.mean([m.cells.mean() for m in masks]) if masks else 0.0
print(f"mean TF mask occupancy on flagged pulses: {occ:.1%}")

notched = notch_filter_echo(mixed, k_sigma=3.0, flags=flags.astype(bool))

img_clean = range_doppler_image(echo)
img_mixed = range_doppler_image(mixed)
img_supp = range_doppler_image(suppressed)
img_notch = range_doppler_image(notched)

for name, img in (("clean", img_clean), ("interfered", img_mixed),
                  ("suppressed", img_supp), ("notch", img_notch)):
    mag = np.abs(img.pixels)
    io_formats.write_pgm(os.path.join(out_dir, f"rd_{name}.pgm"),
                         255.0 * mag / mag.max())

print("\nimage quality (lower ME = sharper, less interference energy):")
for name, img in (("interfered", img_mixed), ("notch", img_notch),
                  ("suppressed", img_supp), ("clean", img_clean)):
    me = metrics.me(np.abs(img.pixels))
    psnr = metrics.psnr(np.abs(img.pixels), np.abs(img_clean.pixels))
    tag = f"  {name:10s} ME {me:8.3f}"
    if name != "clean":
        tag += f"   PSNR vs clean {psnr:6.2f} dB"
    print(tag)

print("\nper-target energy retained (1.0 = unharmed):")
for i, tgt in enumerate(scene.targets):
    d, r = tgt["doppler_bin"], tgt["range_bin"]
    ref = target_neighborhood_energy(img_clean, d, r)
    sup = target_neighborhood_energy(img_supp, d, r) / ref
    ntc = target_neighborhood_energy(img_notch, d, r) / ref
    print(f"  target {i}: suppressed {sup:5.2f}   notch {ntc:5.2f}")

print(f"\nrange-doppler PGMs written to {out_dir}/")
