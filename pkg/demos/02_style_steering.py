"""
Steering a decoder towards a style, then distilling the steering
================================================================

A toy corpus has two styles ("positive" and "negative") that differ only in
their marker words.  We train a base LM on the mix, steer it towards the
negative style by perturbing its key/value cache, and finally distil the
steered outputs into a residual adapter that needs no steering at decode
time.  An external bag-of-words classifier scores every response.
"""
import time
from dataclasses import replace

import numpy as np

from ctrldial.model import generate
from ctrldial.recipes import STYLE_ADAPTER_TRAIN, build_style_bench, style_rate, train_style_stack
from ctrldial.steering import SteeringConfig, distill_attribute, steered_generate

start = time.perf_counter()
bench = build_style_bench()
model, attr, scorer = train_style_stack(bench)
target = bench.spec.styles.index("negative")
print(f"vocabulary {len(bench.vocab)}, base LM {model.num_parameters():,} parameters, "
      f"trained in {time.perf_counter() - start:.0f}s")

# steering: 10 gradient steps on the cache per token
cfg = SteeringConfig(step_size=0.1, iterations=10, n_hypotheses=10)
t0 = time.perf_counter()
dist = distill_attribute(model, attr, target, bench.prefixes, cfg, 16, STYLE_ADAPTER_TRAIN, max_new=8)
print(f"distilled {len(dist.dataset)} steered responses into adapter {dist.label!r} "
      f"in {time.perf_counter() - t0:.0f}s")

held = dist.heldout_prefixes[:20]
single = replace(cfg, n_hypotheses=1)
base, pplm, adapted = [], [], []
timing = {"pplm": 0.0, "adapter": 0.0}
for i, p in enumerate(held):
    base.append(generate(model, p, 8, 10, 1, np.random.default_rng(i))[0])
    t0 = time.perf_counter()
    pplm.append(steered_generate(model, p, attr, target, single, 8, np.random.default_rng(i)).chosen)
    timing["pplm"] += time.perf_counter() - t0
    t0 = time.perf_counter()
    adapted.append(generate(model, p, 8, 10, 1, np.random.default_rng(i), adapter=dist.label)[0])
    timing["adapter"] += time.perf_counter() - t0

print("\nnegative-style rate on held-out prefixes (external scorer):")
for name, responses in (("unsteered", base), ("steered", pplm), ("adapter", adapted)):
    print(f"  {name:10s} {style_rate(scorer, responses, target):.2f}")
print(f"decode time: steered {timing['pplm']:.2f}s, adapter {timing['adapter']:.2f}s")

print("\none prefix, three decoders:")
print("  prefix   ", bench.vocab.decode(held[0]))
for name, responses in (("unsteered", base), ("steered", pplm), ("adapter", adapted)):
    print(f"  {name:10s}", bench.vocab.decode(responses[0]))
