"""
Training the double-sequence model
==================================

A small end-to-end run: prepare a synthetic corpus, pre-train the code
classifier, train the full model, then compare a couple of ablations and
decay settings. Takes a minute or two on a laptop.
"""

import logging
from dataclasses import replace

from progkt import datamodel as dm
from progkt import trainer as tr

logging.basicConfig(level=logging.INFO, format="%(message)s")

kb, events, roles, _ = dm.synth_generate(dm.SynthConfig(n_students=80), seed=2)
cfg = tr.TrainConfig(hidden_dim=16, problem_dim=16, code_dim=16, token_dim=16, gat_in_dim=16,
                     gat_hidden_dim=16, code_filters=8, code_epochs=4, code_lr=3e-3,
                     code_batch_size=128, sg_epochs=1, sg_max_pairs=50_000, epochs=6,
                     batch_size=16, lr=2e-3, seeds=(0, 1))
prepared = tr.Prepared(kb, events, roles, cfg)
print(len(prepared.train_users), "train students,", len(prepared.test_users), "test students")

rep = prepared.code_assets(cfg)["report"]
print(f"code classifier accuracy {rep.accuracy:.3f} (majority {rep.majority_baseline:.3f})")

###############################################################################
# Full model and two ablations, same seeds.

reports = tr.run_ablations(cfg, prepared, variants=("full", "no_code", "no_classification"))
for name, r in reports.items():
    print(f"{name:20s} mean AUC {r.mean_auc:.4f}  per seed {[round(a, 4) for a in r.per_seed_auc]}")

###############################################################################
# A short decay sweep, both attention modes.

rows = tr.sweep_lambda(replace(cfg, seeds=(0,)), prepared, grid=(0.0, 0.6, 30.0))
for (lam, mode), a in tr.summarize_sweep(rows).items():
    print(f"lambda {lam:5.1f} {mode:10s} AUC {a:.4f}")
