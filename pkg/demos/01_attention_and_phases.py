# coding: utf-8

# # Mutual attention and phase predictions
#
# A walk through the two pieces of the network that are easiest to look at
# in isolation: the attention between two frames' high-level features, and
# the residual refinement that turns one coarse saliency guess into three.
#
# Run with `python3 demos/01_attention_and_phases.py`.

# In[1]:

import torch

from stkd.attention import InterFrameEncoder, mutual_attention
from stkd.config import load_config
from stkd.model import STKDNet

torch.manual_seed(0)


# ## Attention between two frames
#
# Each column of the attention matrix says where, in frame t, a location of
# the reference frame draws its weight from. Columns are a softmax, so they
# sum to one.

# In[2]:

h_t = torch.randn(1, 32, 4, 4)
h_ref = torch.randn(1, 32, 4, 4)
res = mutual_attention(h_t, h_ref)
print("attention shape:", tuple(res.attention.shape))
print("column sums (first 4):", res.attention.sum(dim=1)[0, :4].tolist())
print("scale 1/sqrt(c):", res.scale)


# With a single spatial location there is nothing to choose between, so the
# matrix is exactly [[1]] and the weighted features are the reference itself.

# In[3]:

one = mutual_attention(torch.randn(1, 8, 1, 1), torch.randn(1, 8, 1, 1))
print(one.attention.tolist())


# The encoder wraps the attention with one 3x3 fusion convolution.

# In[4]:

enc = InterFrameEncoder(32, "mutual").eval()
with torch.no_grad():
    fused = enc(h_t, h_ref)
print("fused features:", tuple(fused.shape))


# ## Three phases from one guess
#
# The tiny backbone keeps this CPU friendly. P_0 comes straight from the
# high-level features; each embedding unit adds a residual on top.

# In[5]:

cfg = load_config("demos/configs/toy.cfg")
net = STKDNet(cfg.arch, with_encoder=True).eval()
frame = torch.randn(1, 3, 64, 64)
with torch.no_grad():
    pyr, phases = net.forward_spatial(frame)
    extended = net.forward_temporal(pyr.high_level, pyr, phases)

for j, p in enumerate(phases.logits):
    print(f"P_{j}: shape {tuple(p.shape)}, mean logit {p.mean().item():+.4f}")


# The residuals telescope exactly: every phase is the previous one plus its
# residual, with no rounding slack.

# In[6]:

for j, r in enumerate(phases.residuals, 1):
    print(f"P_{j} - P_{j-1} == R_{j}:", torch.equal(phases.logits[j] - phases.logits[j - 1], r))


# The temporal branch reuses the same two units, so its first three phases are
# the spatial ones, and it appends a fourth.

# In[7]:

print("phases in temporal branch:", len(extended))
print("shared prefix:", all(a is b for a, b in zip(extended.logits[:3], phases.logits)))
