"""
Checking the hand-written backward pass
=======================================

Every gradient in the model comes from the tape in ``dmasum.autodiff``.
Compare it with central differences on the full desk-scale network.
"""

import time

import numpy as np

from dmasum.autodiff import Tape, finite_diff_check
from dmasum.model import DmaSumModel, ModelConfig

cfg = ModelConfig(input_dim=16, attn_dim=8, lstm_hidden=8, head_hidden=16)
model = DmaSumModel(cfg, seed=0)
r = np.random.default_rng(0)
x, y = r.normal(size=(12, 16)), r.uniform(size=12)

tape = Tape()
loss = model.loss(tape, x, y)
grads = tape.backward(loss)
print(f"loss {loss.value.item():.6f}, {model.params.size} parameters in {len(grads)} arrays")

# float64 differences lose digits on tiny gradient entries (error ~ eps*loss/h),
# so the second run evaluates the same quotient in extended precision
for extended in (False, True):
    t0 = time.perf_counter()
    err = finite_diff_check(model.loss_fn(x, y), model.params, grads=grads, batch=512,
                            extended=extended)
    print(f"extended={extended!s:5}: max relative error {err:.2e} ({time.perf_counter() - t0:.1f}s)")
