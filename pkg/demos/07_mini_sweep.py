# Config-driven pipeline, end to end, at mouse scale.
#
# The same machinery behind `mmjepa --desk` runs here from a dict: generate
# datasets, pretrain (label-free and supervised-on-S), then sweep the two
# warm-start strategies over a grid of finetune sizes with paired seeds.
# A Wilcoxon signed-rank test compares the strategies pairwise and a
# Spearman rho per strategy asks whether more labeled data helps.
#
# Expect a couple of minutes of CPU. Statistics over 2 seeds and 3 sizes
# are illustrative only; the calibrated run lives in the test suite.

import tempfile

from mmjepa.runs import (
    config_from_dict,
    run_gen,
    run_pretrain_jepa,
    run_pretrain_sup,
    run_sweep,
)

workdir = tempfile.mkdtemp(prefix="mmjepa_demo_")

config = {
    "schema_version": 1,
    "experiment": "mini-sweep-demo",
    "out_dir": workdir,
    "seeds": [0, 1],
    "mixing_seed": 0,
    "datasets": {
        "U": {"kind": "U", "n": 500, "complete": True, "labeled": False,
              "beta": 0.99, "m": 16, "image_size": 16, "cohort_seed": 101},
        "S": {"kind": "S", "n": 500, "complete": False, "labeled": True,
              "beta": 0.99, "m": 16, "image_size": 16, "cohort_seed": 102},
        "S-test": {"kind": "S", "n": 200, "complete": False, "labeled": True,
                   "beta": 0.99, "m": 16, "image_size": 16, "cohort_seed": 103},
        "F": {"kind": "F", "n": 400, "complete": True, "labeled": True,
              "beta": 0.99, "m": 16, "image_size": 16, "cohort_seed": 104},
        "T": {"kind": "T", "n": 300, "complete": True, "labeled": True,
              "beta": 0.99, "m": 16, "image_size": 16, "cohort_seed": 105},
    },
    "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
              "predictor_layers": 1, "image_channels": [4, 8],
              "expression_dim": 8, "image_size": 16},
    "jepa": {"mask_ratio": 0.3, "ema_momentum": 0.95, "lr_max": 3e-3,
             "batch_size": 32, "total_steps": 150, "checkpoint_every": 150,
             "seed": 0},
    "pretrain_sup": {"total_steps": 300, "batch_size": 64,
                     "encoder_lr": 3e-3, "head_lr": 3e-3, "eval_every": 100},
    "finetune": {"total_steps": 250, "batch_size": 64, "eval_every": 100},
    "strategies": [
        {"kind": "SUPERVISED_S_THEN_F", "f_size": 400, "encoder_lr": 3e-3, "head_lr": 3e-3},
        {"kind": "JEPA_U_THEN_F", "f_size": 400, "encoder_lr": 3e-3, "head_lr": 3e-3},
    ],
    "sweep": {
        "strategies": ["SUPERVISED_S_THEN_F", "JEPA_U_THEN_F"],
        "f_sizes": [100, 200, 400],
        "total_steps": 250,
    },
}

cfg = config_from_dict(config)
print("workdir:", workdir)
print("generating datasets...")
run_gen(cfg)
print("pretraining (jepa on U, supervised on S), seeds", cfg.seeds, "...")
run_pretrain_jepa(cfg)
run_pretrain_sup(cfg)

print("sweeping finetune sizes", cfg.sweep_f_sizes, "...")
report = run_sweep(cfg, config, workdir, workers=1)

print()
print(report.to_csv())
w = report.wilcoxon
print(f"wilcoxon: W={w.w} p_two_sided={w.p_two_sided:.4f} n_effective={w.n_effective} ({w.method})")
for strat, rho in report.spearman_by_strategy.items():
    print(f"spearman rho({strat}) = {rho:+.3f}")
