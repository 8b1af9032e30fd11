"""
Mixing experts in parameter space versus output space
=====================================================

A mixture of experts runs every expert and averages the outputs.  Mixing the
expert *parameters* first and running one layer gives the same answer for
linear experts, at a fraction of the multiplications once the number of
positions t exceeds a couple of experts.  For nonlinear (Transformer layer)
experts the two differ, except when the mixture picks a single expert.
"""
import time

import numpy as np

from ctrldial.autodiff import Tensor
from ctrldial.experts import (ExpertBank, aop_forward, expert_forward, flop_count, instrumented_count,
                              moe_forward)

print(f"{'r':>3} {'t':>4} {'d':>4} {'n':>4} {'MoE':>10} {'AoP':>10}  counted on scalars")
for r, t, d, n in [(2, 2, 4, 4), (2, 8, 16, 16), (13, 16, 64, 64), (4, 128, 64, 64)]:
    moe, aop = flop_count("MOE", r, t, d, n).count, flop_count("AOP", r, t, d, n).count
    counted = "" if r * t * d * n > 20_000 else \
        f"{instrumented_count('MOE', r, t, d, n)[0]} / {instrumented_count('AOP', r, t, d, n)[0]}"
    print(f"{r:>3} {t:>4} {d:>4} {n:>4} {moe:>10,} {aop:>10,}  {counted}")

# with a single expert, mixing parameters is pure overhead
print("r=1, t=2, d=3, n=1:", flop_count("MOE", 1, 2, 3, 1).count, "vs", flop_count("AOP", 1, 2, 3, 1).count)

# linear experts: identical outputs
rng = np.random.default_rng(0)
bank = ExpertBank.affine(r=8, d=64, n=64, rng=rng)
x = Tensor(rng.normal(size=(1, 512, 64)))
alpha = rng.dirichlet(np.ones(8))[None]
timings = {}
for name, fn in (("moe", moe_forward), ("aop", aop_forward)):
    t0 = time.perf_counter()
    for _ in range(20):
        out = fn(x, bank, alpha)
    timings[name] = (time.perf_counter() - t0) / 20, out.data
print(f"\nlinear experts, r=8 t=512: max |AoP - MoE| = {np.abs(timings['aop'][1] - timings['moe'][1]).max():.1e}, "
      f"time {1e3 * timings['moe'][0]:.1f} ms vs {1e3 * timings['aop'][0]:.1f} ms")

# Transformer-layer experts: different in general, equal for one-hot mixtures
layers = ExpertBank.decoder(r=4, d=32, ffn=64, n_heads=2, seed=1)
h = Tensor(rng.normal(size=(2, 10, 32)))
soft = rng.dirichlet(np.ones(4), size=2)
gap = np.abs(aop_forward(h, layers, soft).data - moe_forward(h, layers, soft).data).max()
print(f"layer experts, soft mixture: max |AoP - MoE| = {gap:.3f}")
onehot = np.eye(4)[[2, 2]]
same = np.array_equal(aop_forward(h, layers, onehot).data, expert_forward(h, layers, 2).data)
print("layer experts, one-hot on expert 2: AoP output equals that expert bitwise:", same)
