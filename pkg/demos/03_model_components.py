"""
The five-component classifier, piece by piece
=============================================

Latent widths are a hard contract: history -> 224, map tile -> 128,
demographics -> 28, fused 380, probabilities 2. This walk-through also
shows the two primitives inside the sequence encoder: moving-average
series decomposition and the learned frequency-domain filter.
"""

import torch

from crashformer.model import (CrashFormer, ModelConfig, feb_forward, probabilities,
                               series_decompose, weighted_ce)
from crashformer.dataset import ClassWeights

torch.manual_seed(0)

# --- series decomposition: seasonal + trend == input, exactly -----------
x = torch.tensor([[[1.0], [4.0], [2.0], [8.0], [3.0], [9.0]]])
seasonal, trend = series_decompose(x, kernel=3)
print("series:", x.flatten().tolist())
print("trend :", [round(v, 3) for v in trend.flatten().tolist()])
print("reconstruction error:", float((seasonal + trend - x).abs().max()))

# --- frequency block: keep low modes, filter them, invert ---------------
sig = torch.randn(1, 8, 2)
n_freq = 8 // 2 + 1
identity = torch.eye(2, dtype=torch.complex64).unsqueeze(0).repeat(n_freq, 1, 1)
print("\nidentity filter max deviation:",
      float((feb_forward(sig, identity) - sig).abs().max()))
low_pass = identity.clone()
low_pass[2:] = 0  # zero everything above the two lowest modes
smoothed = feb_forward(sig, low_pass)
print("low-pass output is smoother: std",
      round(float(sig.diff(dim=1).std()), 3), "->",
      round(float(smoothed.diff(dim=1).std()), 3))

# --- full model on a batch ----------------------------------------------
cfg = ModelConfig(seq_len=4, d_model=32, n_enc_layers=2, img_size=64,
                  img_channels=[8, 16, 32])
model = CrashFormer(cfg).eval()
history = torch.randn(5, 4, 27)
tiles = torch.rand(5, 3, 64, 64)
demo = torch.randn(5, 144)

latents = model.latents(history, tiles, demo)
print("\nlatent widths:", latents.seq.shape[1], latents.img.shape[1],
      latents.demo.shape[1], "fused", latents.fused.shape[1])
probs = model.predict_proba(history, tiles, demo)
print("probability rows sum to:", probs.sum(dim=1).tolist())

# --- class-weighted loss on logits ---------------------------------------
logits = model(history, tiles, demo)
labels = torch.tensor([0, 1, 0, 0, 1])
loss = weighted_ce(logits, labels, ClassWeights(w0=0.516, w1=15.327))
print("weighted cross entropy:", round(float(loss), 4))

# --- ablation arms keep the fused width ----------------------------------
for use_img, use_demo in [(False, True), (True, False), (False, False)]:
    arm_cfg = ModelConfig(**{**cfg.__dict__, "use_img": use_img, "use_demo": use_demo})
    torch.manual_seed(0)
    arm = CrashFormer(arm_cfg).eval()
    fused = arm.latents(history, tiles if use_img else None,
                        demo if use_demo else None).fused
    print(f"use_img={use_img!s:5} use_demo={use_demo!s:5} fused width {fused.shape[1]}")
