"""Train the toy model for a few epochs, then look at how it routes.

Runs in about ten seconds. Pass an output directory to keep the CSV tables.
"""

import json
import sys
import tempfile
from dataclasses import replace

from ldmole import analysis
from ldmole.training import make_dataset, model_from_checkpoint, toy_config, train

cfg = toy_config(epochs=3, beta=0.1, k_target=2)
cfg = replace(cfg, data=replace(cfg.data, n_train=512, n_val=128))

result = train(cfg)
print(f"train LM loss {result.initial_train.lm_loss:.3f} -> {result.final_train.lm_loss:.3f}, "
      f"accuracy {result.final_train.accuracy:.3f}")

# everything needed to reproduce the run lives in the checkpoint
model, tcfg = model_from_checkpoint(result.checkpoint)
val = make_dataset(tcfg.data, tcfg.dataset_seed).val
tables = analysis.analyze(model, val, result.routing_mass)
print(json.dumps(tables.summary(), indent=2))

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ldmole-")
for path in analysis.write_tables(tables, out):
    print("wrote", path)
