"""
The stage-by-stage command line
===============================

The same pipeline as ``python -m progkt <stage>`` calls. Each stage writes
versioned artifacts under ``<data>/run`` and a JSON-lines report that embeds
the effective configuration. The dimensions here are toy-sized, so the AUCs
it prints sit near chance; see train_and_ablate.py for a run that learns.
"""

import json
import os
import tempfile

from progkt.cli import main

root = tempfile.mkdtemp()
data = os.path.join(root, "data")
config = os.path.join(root, "config.json")
with open(config, "w") as fh:
    json.dump({"hidden_dim": 8, "problem_dim": 8, "code_dim": 8, "token_dim": 8, "gat_in_dim": 8,
               "gat_hidden_dim": 8, "code_filters": 4, "code_epochs": 2, "sg_epochs": 1,
               "sg_max_pairs": 20000, "epochs": 3, "seeds": [0, 1]}, fh)

common = ["--config", config, "--data", data]
for argv in (["synth", "--students", "50", "--seed", "7"], ["ingest"], ["embed-problems"],
             ["pretrain-code"], ["train"], ["eval"], ["ablate", "--variants", "full,no_code,node2vec"],
             ["sweep", "--lambdas", "0,0.6,30", "--seeds", "0"]):
    print("$ python -m progkt", " ".join(argv))
    code = main(argv + common)
    assert code == 0, code

print(open(os.path.join(data, "run", "sweep.csv")).read())
print("artifacts:", sorted(os.listdir(os.path.join(data, "run"))))
