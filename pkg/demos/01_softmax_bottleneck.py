"""
Why query twice
===============

A single softmax over ``K.T @ Q`` with a narrow attention width cannot
produce a high-rank log-attention map. Mixing in a second map built from a
tanh-transformed query lifts that limit. This script measures both over
random draws.
"""

import numpy as np

from dmasum.attention import associated_attention, bottleneck_trial, mixture_attention, scaled_attention
from dmasum.tensor import SeededRng, numerical_rank

# One draw, looked at closely: D_a = 2 and T = 8.
rng = SeededRng(0)
K, Q = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
W = rng.normal(size=(2, 2))

A = scaled_attention(K, Q)
A_hat = associated_attention(K, Q, W)
A_moa, _ = mixture_attention(A, A_hat, np.zeros((1, 8)))

print("rows of A sum to", A.sum(axis=1).round(12))
print("rank(A)        =", numerical_rank(A))
print("rank(log A)    =", numerical_rank(np.log(A)), "(logits have rank 2, normaliser adds 1)")
print("rank(log A_moa)=", numerical_rank(np.log(A_moa)))

# Now 100 seeds.
ranks = np.array([bottleneck_trial(s) for s in range(100)])
print()
print("log A     : max rank", ranks[:, 0].max())
print("log A_moa : rank >= 4 in", int((ranks[:, 1] >= 4).sum()), "of 100 draws")
print("rank histogram for log A_moa:", np.bincount(ranks[:, 1], minlength=9))
