#!/usr/bin/env python3
"""Walk through the numpy layer stack and check its gradients by finite differences."""
import numpy as np

from smoe_vae.backbone import Adam, Conv2d, ConvTranspose2d, Param, grad_check, make_rng
from smoe_vae.losses import LossConfig, total_loss, total_loss_grads
from smoe_vae.model import ModelConfig, SmoeVae

rng = make_rng(0)

# A stride-2 convolution halves the image; its transpose doubles it back.
conv = Conv2d("conv", 1, 4, 4, stride=2, padding=1, rng=rng)
deconv = ConvTranspose2d("deconv", 4, 1, 4, stride=2, padding=1, rng=rng)
x = rng.uniform(size=(2, 1, 28, 28)).astype(np.float32)
h = conv.forward(x)
print("conv   ", x.shape, "->", h.shape)
print("deconv ", h.shape, "->", deconv.forward(h).shape)

# The full model at miniature size: 8x8 images, 3 experts, 64-bit floats.
# Zero biases leave ReLUs exactly on their kinks, so nudge them, and scale the
# small fan-in weights up so the differences are not swamped by rounding.
cfg = ModelConfig(num_experts=3, latent_dim=4, image_side=8, enc_channels=(3, 4), enc_hidden=8, dec_hidden=6,
                  dec_channels=(3, 2), gate_hidden=(5, 4))
model = SmoeVae(cfg, make_rng(1), np.float64)
for p in model.params():
    if p.name.endswith("bias"):
        p.value += rng.normal(scale=0.05, size=p.value.shape)
    else:
        p.value *= np.sqrt(6.0)
imgs = make_rng(2).uniform(size=(4, 1, 8, 8))


def loss_fn():
    model.zero_grad()
    fwd = model.forward_soft(imgs, make_rng(3))      # fixed noise: the loss is a plain function of params
    model.backward(fwd, total_loss_grads(imgs, fwd, LossConfig()))
    return total_loss(imgs, fwd, LossConfig()).total


report = grad_check(loss_fn, model.params(), epsilon=1e-4, tolerance=1e-5, n_coords=200)
print(f"\ngradient check over {report.n_checked} coordinates: max relative error {report.max_rel_error:.2e}"
      f" ({'pass' if report.passed else 'FAIL'}; worst at {report.worst})")

# Adam's first step is lr * g / (|g| + eps) after bias correction, about lr for any g.
w = Param("w", np.zeros(3))
opt = Adam([w], lr=1e-4)
w.grad[...] = [1.0, -5.0, 1e-3]
opt.step()
print("\nAdam step 1 from grads [1, -5, 1e-3]:", w.value)
