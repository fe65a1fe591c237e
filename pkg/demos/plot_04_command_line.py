"""
The command-line pipeline
=========================

synth -> pretrain -> tune -> eval -> export-codebook, run in a scratch
directory through the same entry point as the ``instaprompt`` script.
"""

# %%
import json
import tempfile
from pathlib import Path

from instaprompt.cli import main

work = Path(tempfile.mkdtemp())
data = str(work / "graphs.jsonl")

# %%
# A small two-class dataset, then a short pretraining run.
main(["synth", "--out", data, "--per-class", "40", "--seed", "1"])
main(["pretrain", "--data", data, "--out", str(work / "backbone"), "--pretrain-epochs", "5"])
print(sorted(p.name for p in (work / "backbone").iterdir()))

# %%
# Tune with a config file; the flag on the command line wins.
conf = work / "tune.conf"
conf.write_text("mode = prompt_tune\nepochs = 40\nshots = 20\ncodebook_size = 8\n")
main(["tune", "--config", str(conf), "--epochs", "30", "--data", data,
      "--backbone", str(work / "backbone"), "--out", str(work / "run")])
print("echoed epochs:", json.loads((work / "run" / "config.json").read_text())["epochs"])

# %%
# Evaluate on the held-out part of the saved split and export the codebook.
main(["eval", "--model", str(work / "run"), "--data", data, "--split", str(work / "run" / "split.json")])
main(["export-codebook", "--model", str(work / "run"), "--data", data, "--out", str(work / "codes.csv")])
print((work / "codes.csv").read_text().splitlines()[0][:60], "...")
