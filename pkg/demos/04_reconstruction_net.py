"""Train the subset and the reconstruction net together.

The net starts as the exact identity (its head is zero-initialized), so
every epoch of training is pure improvement over the raw sub-sampled map.
Takes about a minute.
"""

import numpy as np

from sal import (ArrayConfig, TrainConfig, evaluate_design, make_dataset,
                 reconstruct_maps, train)
from sal.beamform import write_map_pgm

out_dir = __import__("pathlib").Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

cfg = ArrayConfig(n_tx=2, n_rx=16, n_range=16, n_azimuth=16)
data = make_dataset(cfg, n_train=150, n_test=30, noise_sigma=0.5,
                    master_seed=1, threads=2)

tcfg = TrainConfig(scenario="discrete", budget=6, epochs=40, batch_size=10,
                   learning_rate=1e-3, design_lr=0.05, temperature=0.5,
                   use_model=True, model_depth=2, model_channels=8)
result = train(data, tcfg, master_seed=4,
               progress=lambda e, l: e % 10 == 9 and print(
                   f"  epoch {e + 1:3d}  loss {l:.4f}"))

print(f"receivers kept: {result.design_values}")
raw = evaluate_design(data.test_records, "discrete", result.design_values,
                      cfg)
net = evaluate_design(data.test_records, "discrete", result.design_values,
                      cfg, result.model)
print(f"sub-sampled map : psnr {raw.psnr_mean:.2f} dB  ssim {raw.ssim_mean:.3f}")
print(f"after the net   : psnr {net.psnr_mean:.2f} dB  ssim {net.ssim_mean:.3f}")
print(f"gain {net.psnr_mean - raw.psnr_mean:+.2f} dB")

# side-by-side images of one held-out record
rec = data.test_records[0]
sub = reconstruct_maps([rec], "discrete", result.design_values, cfg)[0]
fixed = reconstruct_maps([rec], "discrete", result.design_values, cfg,
                         result.model)[0]
for name, z in (("reference", rec.reference_map), ("subsampled", sub),
                ("reconstructed", fixed)):
    write_map_pgm(out_dir / f"recon_{name}.pgm", z)
print(f"wrote 3 maps under {out_dir}/recon_*.pgm")
