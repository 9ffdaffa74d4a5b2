#!/usr/bin/env python3
"""Soft vs hard gating, the gating loss, and why the uniform gate tends to collapse.

Run with --train to watch the first 150 optimizer steps of a desk-scale run
(about a minute on one core).
"""
import argparse

import numpy as np

from smoe_vae.backbone import make_rng, softmax_rows
from smoe_vae.losses import LossConfig, balance_loss, entropy_loss
from smoe_vae.model import GateOutput, ModelConfig, init

parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
parser.add_argument("--train", action="store_true", help="also trace the first optimizer steps")
parser.add_argument("--experts", type=int, default=5)
args = parser.parse_args()
E = args.experts
cfg = LossConfig()

# Soft gating mixes every decoder; hard gating runs only the argmax expert.
# With a logit margin of 20 the two agree to float precision.
model = init(ModelConfig(num_experts=E), make_rng(0))
x = make_rng(1).uniform(size=(4, 1, 28, 28)).astype(np.float32)
experts = np.array([0, 2, 1, E - 1])
logits = np.zeros((4, E))
logits[np.arange(4), experts] = 20.0
soft = model.forward_soft(x, None, route=GateOutput(logits, softmax_rows(logits), experts)).x_hat
model.decoder_evals = 0
hard, chosen, _, _ = model.forward_hard(x, experts=experts)
print(f"margin 20: max |soft - hard| = {np.abs(soft - hard).max():.2e}, "
      f"decoders run by the hard pass: {model.decoder_evals}")

# Three gate states and what the gating loss charges for each.
uniform = np.full((100, E), 1 / E)
collapsed = np.zeros((100, E))
collapsed[:, 0] = 1
specialized = np.eye(E)[np.arange(100) % E]


def gating(p):
    return cfg.lambda_balance * balance_loss(p) + cfg.lambda_entropy * entropy_loss(p)


print(f"\ngating loss, E={E}:")
for name, p in [("uniform", uniform), ("all to one expert", collapsed), ("one expert per class", specialized)]:
    print(f"  {name:22s} balance {balance_loss(p):.3f}  entropy {entropy_loss(p):.3f}  -> {gating(p):8.2f}")

# Near the uniform start, a shift d shared by every sample's centred logits
# costs about 200/E^2 |d|^2 in balance but saves about 400/(2E) |d|^2 in
# entropy, so the shared direction is unstable: 200(1-E)/E^2 |d|^2 < 0.
# Per-sample deviations are unstable too, but early on the gate mostly sees
# reparameterization noise rather than the encoder's mean, and only the
# shared shift is consistent from batch to batch.
d = 1e-2 * make_rng(2).normal(size=E)
d -= d.mean()
shifted = softmax_rows(np.tile(d, (100, 1)))
print(f"\nshared logit shift of size {np.linalg.norm(d):.1e}: gating loss change "
      f"{gating(shifted) - gating(uniform):+.3e} (predicted {200 * (1 - E) / E**2 * d @ d:+.3e})")

if args.train:
    from smoe_vae import losses
    from smoe_vae.data import SyntheticSpec, batches, build_dataset, synthetic_sources
    from smoe_vae.training import TrainConfig, Trainer

    train_set, test_set = build_dataset(synthetic_sources(SyntheticSpec(samples_per_class=2000)), 2000)
    trainer = Trainer(TrainConfig(model=ModelConfig(num_experts=E)), train_set, test_set)
    m = trainer.model
    pick = make_rng(3).permutation(len(test_set))[:500]
    probe = test_set.floats()[pick]
    print("\nstep  mu std  shared logit  per-sample logit  entropy  routed counts")
    step = 0
    for xb, _ in batches(train_set, trainer.plan, 0):
        if step % 15 == 0:
            mu, _ = m.encode(probe)
            g = m.gate(mu)
            centred = g.logits - g.logits.mean(1, keepdims=True)
            shared = centred.mean(0)
            own = np.sqrt(((centred - shared) ** 2).sum(1).mean())
            print(f"{step:4d}  {mu.std():6.2f}  {np.linalg.norm(shared):12.3f}  {own:16.3f}  "
                  f"{losses.entropy_loss(g.probs):7.3f}  {np.bincount(g.experts, minlength=E)}")
        m.zero_grad()
        fwd = m.forward_soft(xb, trainer.noise_rng)
        m.backward(fwd, losses.total_loss_grads(xb, fwd, cfg))
        trainer.optimizer.step()
        step += 1
