# coding: utf-8

# # The command line, end to end
#
# Everything the library does is reachable from `stkd`. This script drives
# it through subprocesses so the exact commands are visible.
#
# Run with `python3 demos/03_cli_round_trip.py [output_dir]`.

# In[1]:

import json
import subprocess
import sys
import tempfile
from pathlib import Path

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="stkd_cli_"))


def stkd(*args):
    cmd = [sys.executable, "-m", "stkd", *map(str, args)]
    print("$ stkd", " ".join(map(str, args)))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print(proc.stdout, end="")
    if proc.returncode:
        print(proc.stderr, end="")
    return proc.returncode


# A training set and a held-out set.

# In[2]:

stkd("synth", "--out", out / "train", "--sequences", 4, "--frames", 5, "--seed", 1)
stkd("synth", "--out", out / "test", "--sequences", 2, "--frames", 5, "--seed", 2)


# Short runs of both stages. `--max-iter` also shortens the lr schedule.

# In[3]:

common = ["--config", "demos/configs/toy.cfg", "--data", out / "train", "--out", out / "run"]
stkd("train", "--stage", 1, *common, "--max-iter", 200)
stkd("train", "--stage", 2, *common, "--max-iter", 50)


# Maps for the held-out clips, then the scores.

# In[4]:

stkd("infer", "--ckpt", out / "run" / "stage2_final.stkd", "--data", out / "test", "--out", out / "maps")
stkd("eval", "--pred", out / "maps", "--gt", out / "test" / "Annotations" / "480p", "--out", out / "eval.json")
report = json.loads((out / "eval.json").read_text())
print("conventions:", report["conventions"]["averaging"])


# Failures come back as exit codes: 1 for usage, 2 for data, 3 for numerics.

# In[5]:

print("exit code:", stkd("infer", "--ckpt", out / "missing.stkd", "--data", out / "test", "--out", out / "x"))
