"""Learn which receivers to keep.

Trains the relaxed subset design (no reconstruction net) on a small
simulated dataset and compares the learned subset against the best of ten
random subsets and an evenly spread one.
"""

import numpy as np

from sal import (ArrayConfig, TrainConfig, baseline_random_best,
                 evaluate_design, make_dataset, train,
                 uniform_design_values)

cfg = ArrayConfig(n_tx=2, n_rx=16, n_range=16, n_azimuth=16)
data = make_dataset(cfg, n_train=120, n_test=30, noise_sigma=0.5,
                    master_seed=1, threads=2)

budget = 6
tcfg = TrainConfig(scenario="discrete", budget=budget, epochs=40,
                   batch_size=10, learning_rate=0.05, temperature=0.5,
                   use_model=False)
result = train(data, tcfg, master_seed=4)
print(f"learned receivers (of {cfg.n_rx}): {result.design_values}")
print(f"picked at epoch {result.history.get('selected_epoch')}")

rivals = {"learned": result.design_values}
rivals["best-of-10 random"], _ = baseline_random_best(data, tcfg, k=10,
                                                      master_seed=4)
rivals["uniform"] = uniform_design_values("discrete", cfg.n_rx, budget)

for name, values in rivals.items():
    rep = evaluate_design(data.test_records, "discrete", values, cfg)
    print(f"{name:>18}: psnr {rep.psnr_mean:.2f} +- {rep.psnr_ci:.2f} dB, "
          f"ssim {rep.ssim_mean:.3f}   {np.asarray(values)}")
