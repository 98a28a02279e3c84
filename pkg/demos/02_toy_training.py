# coding: utf-8

# # Two-stage training on a moving square
#
# A synthetic clip of five frames, a tiny backbone, and the two training
# stages: single frames first, then frame pairs with spatial and temporal
# distillation plus the inter-frame encoder. Takes well under a minute on
# one CPU core.
#
# Run with `python3 demos/02_toy_training.py [output_dir]`.

# In[1]:

import sys
import tempfile
from pathlib import Path

from stkd import metrics
from stkd.config import load_config
from stkd.inference import Predictor
from stkd.persistence import index_dataset, load_checkpoint, load_image, load_mask
from stkd.synthetic import make_dataset
from stkd.training import train_stage1, train_stage2

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="stkd_toy_"))
cfg = load_config("demos/configs/toy.cfg")
print("writing to", out)


# ## Data
#
# One sequence, five 64x64 frames, written in the DAVIS directory layout.

# In[2]:

index = index_dataset(make_dataset(out / "data", n_sequences=1, n_frames=5, size=64, seed=0))
seq = index.sequences[0]
print(seq.name, len(seq), "frames")


# ## Stage 1
#
# Single frames, spatial loss over P_0..P_2. The loss log is tab separated,
# one line per iteration.

# In[3]:

s1 = train_stage1([index], cfg, out / "run")
print(f"stage 1 loss: {s1.history[0]['total']:.3f} -> {s1.history[-1]['total']:.3f}")


# ## Stage 2
#
# Frame pairs (t, t+t0). P_2 of frame t teaches every phase of the other
# frame. The encoder's parameters start fresh; everything else comes from
# stage 1.

# In[4]:

s2 = train_stage2(load_checkpoint(s1.checkpoint), [index], cfg, out / "run")
print("fresh keys:", len(s2.init_report["fresh"]), "adopted keys:", len(s2.init_report["adopted"]))
print(f"stage 2 loss: {s2.history[0]['total']:.3f} -> {s2.history[-1]['total']:.3f}")


# Stage 2 barely moves here: stage 1 has already fit the clip, and the soft
# area-averaged targets at the square's edges put a floor under the loss.

# ## Evaluate on the training clip

# In[5]:

pred = Predictor(s2.checkpoint)
maps = [pred.infer_frame(load_image(f)) for f in seq.frames]
res = metrics.evaluate(maps, [load_mask(m) for m in seq.masks])
print(f"max F {res.f_max:.4f}  MAE {res.mae:.4f}")


# The encoder is only a training aid. Dropping it from the checkpoint changes
# nothing at test time.

# In[6]:

ckpt = load_checkpoint(s2.checkpoint)
bare = Predictor(ckpt.strip_removable())
same = all((bare.infer_frame(load_image(f)) == m).all() for f, m in zip(seq.frames, maps))
print("identical without encoder:", same)
