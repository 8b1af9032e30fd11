"""
Autodiff, a small decoder and its key/value cache
==================================================

Trains a two-layer decoder to copy short digit strings, then checks that
cached (one token at a time) decoding gives the same logits as running the
whole sequence at once.
"""
import time

import numpy as np

from ctrldial import autodiff as ad
from ctrldial.autodiff import Tensor
from ctrldial.model import DecoderLM, ModelConfig, TrainConfig, fit, generate
from ctrldial.vocab import EOS_ID, Vocab

# a quick look at the autodiff engine: gradients of a tiny function, checked numerically
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
f = lambda: ad.log_softmax(x @ w).sum()
print("grad_check worst relative error:", ad.grad_check(f, [x, w]))

# copy task: "a b c =" -> "a b c"
digits = [str(i) for i in range(10)]
vocab = Vocab(digits + ["="])


def example(rng):
    s = " ".join(rng.choice(digits, size=rng.integers(2, 5)))
    return vocab.encode(s + " =", bos=True), vocab.encode(s) + [EOS_ID]


data = [example(rng) for _ in range(400)]
model = DecoderLM(ModelConfig(len(vocab), d_model=32, n_layers=2, n_heads=2, ffn_dim=64, max_len=16), seed=0)
start = time.perf_counter()
result = fit(model, data, TrainConfig(lr=3e-3, batch_size=32, epochs=25, warmup_steps=10))
print(f"trained {result.steps} steps in {time.perf_counter() - start:.0f}s, "
      f"loss {result.epoch_losses[0]:.3f} -> {result.epoch_losses[-1]:.3f}")

# greedy copies on fresh strings
hits = 0
for _ in range(50):
    prefix, target = example(rng)
    out = generate(model, prefix, 6, greedy_decoding=True)[0]
    hits += out == target[:-1]
print(f"exact copies: {hits}/50")
prefix, _ = example(rng)
print(vocab.decode(prefix), "->", vocab.decode(generate(model, prefix, 6, greedy_decoding=True)[0]))

# cached decoding matches the full forward pass
ids = prefix + generate(model, prefix, 6, greedy_decoding=True)[0]
with ad.no_grad():
    full, _, _ = model.forward([ids])
    state = model.empty_state()
    steps = []
    for tok in ids:
        logits, state = model.step(tok, state)
        steps.append(logits.data)
gap = np.abs(np.stack(steps) - full.data[0]).max()
print(f"largest gap between cached and full logits: {gap:.2e}")
