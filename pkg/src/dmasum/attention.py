"""Mixture-of-Attention layers and softmax-bottleneck rank diagnostics.

Layout follows the column convention: a feature sequence ``H`` is stored
frames-by-features (T x D) and projections are ``Q = W_Q @ H.T`` (D_a x T).
The attention map is ``row_softmax(K.T @ Q / sqrt(D_a))`` and the layer
output is ``Z = V @ A_moa`` with ``A_moa = A @ A_hat.T``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autodiff import Node, ParameterVector, Tape
from .errors import DomainError, ShapeError

BUCKETS = ("0-3", "4-7", "8-11", ">11")
RANK_CSV_HEADER = ["video_id", "T", "rank", "diff", "bucket"]


@dataclass
class AttentionParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_Qhat: np.ndarray  # D_a x D_a, acts on Q

    @property
    def attn_dim(self) -> int:
        return self.W_Q.shape[0]

    def __post_init__(self):
        shapes = {self.W_Q.shape, self.W_K.shape, self.W_V.shape}
        if len(shapes) != 1:
            raise ShapeError(f"W_Q/W_K/W_V disagree: {shapes}")
        d_a = self.W_Q.shape[0]
        if self.W_Qhat.shape != (d_a, d_a):
            raise ShapeError(f"W_Qhat must be {d_a}x{d_a}, got {self.W_Qhat.shape}")


@dataclass
class AttentionMaps:
    A: np.ndarray
    A_hat: np.ndarray
    A_moa: np.ndarray


def project_qkv(h: np.ndarray, p: AttentionParams):
    """Return ``(Q, K, V)``, each D_a x T."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != p.W_Q.shape[1]:
        raise ShapeError(f"features {h.shape} do not match weights {p.W_Q.shape}")
    ht = h.T
    return tensor.matmul(p.W_Q, ht), tensor.matmul(p.W_K, ht), tensor.matmul(p.W_V, ht)


def _scale(d_a: int) -> float:
    return 1.0 / np.sqrt(d_a)


def scaled_attention(K: np.ndarray, Q: np.ndarray) -> np.ndarray:
    if K.shape != Q.shape:
        raise ShapeError(f"K {K.shape} and Q {Q.shape} differ")
    return tensor.row_softmax(tensor.matmul(K.T, Q) * _scale(K.shape[0]))


def associated_query(Q: np.ndarray, W_Qhat: np.ndarray) -> np.ndarray:
    return np.tanh(tensor.matmul(W_Qhat, Q))


def associated_attention(K: np.ndarray, Q: np.ndarray, W_Qhat: np.ndarray) -> np.ndarray:
    return scaled_attention(K, associated_query(Q, W_Qhat))


def mixture_attention(A: np.ndarray, A_hat: np.ndarray, V: np.ndarray,
                      renormalize_rows: bool = False):
    """Return ``(A_moa, Z)`` with ``A_moa = A @ A_hat.T`` and ``Z = V @ A_moa``."""
    if A.shape != A_hat.shape or V.shape[1] != A.shape[0]:
        raise ShapeError(f"A {A.shape}, A_hat {A_hat.shape}, V {V.shape}")
    a_moa = tensor.matmul(A, A_hat.T)
    if renormalize_rows:
        a_moa = a_moa / a_moa.sum(axis=1, keepdims=True)
    return a_moa, tensor.matmul(V, a_moa)


def moa_maps(h: np.ndarray, p: AttentionParams) -> AttentionMaps:
    Q, K, V = project_qkv(h, p)
    A = scaled_attention(K, Q)
    A_hat = associated_attention(K, Q, p.W_Qhat)
    A_moa, _ = mixture_attention(A, A_hat, V)
    return AttentionMaps(A, A_hat, A_moa)


# -- stacked layers on the tape ------------------------------------------


@dataclass
class LayerStack:
    """Hyper-parameters of one stack; weights live in a ParameterVector
    under ``{prefix}.{layer}.{name}``."""

    prefix: str
    n_layers: int
    d_model: int
    d_attn: int
    dropout: float = 0.0
    plain_softmax: bool = False
    renormalize_rows: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("a stack needs at least one layer")

    def layer_names(self, i: int) -> dict[str, str]:
        base = f"{self.prefix}.{i}"
        names = {k: f"{base}.{k}" for k in
                 ("W_Q", "W_K", "W_V", "W_Qhat", "W_O", "ln_gain", "ln_bias")}
        if self.plain_softmax:
            del names["W_Qhat"]
        return names

    def init_params(self, rng: tensor.SeededRng) -> list[tuple[str, np.ndarray]]:
        out = []
        for i in range(self.n_layers):
            names = self.layer_names(i)
            shapes = {
                "W_Q": (self.d_attn, self.d_model),
                "W_K": (self.d_attn, self.d_model),
                "W_V": (self.d_attn, self.d_model),
                "W_Qhat": (self.d_attn, self.d_attn),
                "W_O": (self.d_model, self.d_attn),
            }
            for key in ("W_Q", "W_K", "W_V", "W_Qhat", "W_O"):
                if key in names:
                    out.append((names[key], rng.glorot(*shapes[key])))
            out.append((names["ln_gain"], np.ones((1, self.d_model))))
            out.append((names["ln_bias"], np.zeros((1, self.d_model))))
        return out


@dataclass
class CapturedMaps:
    """Per-layer attention maps recorded during a forward pass."""
    layers: list[AttentionMaps] = field(default_factory=list)


def attention_sublayer(tape: Tape, z: Node, w: dict[str, Node], d_attn: int,
                       plain_softmax=False, renormalize_rows=False,
                       capture: CapturedMaps | None = None) -> Node:
    """One MoA block on the tape: T x D_model in, T x D_model out."""
    zt = tape.transpose(z)
    Q = tape.matmul(w["W_Q"], zt)
    K = tape.matmul(w["W_K"], zt)
    V = tape.matmul(w["W_V"], zt)
    Kt = tape.transpose(K)
    s = _scale(d_attn)
    A = tape.row_softmax(tape.scale(tape.matmul(Kt, Q), s))
    if plain_softmax:
        A_hat = None
        mix = A
    else:
        Q_hat = tape.tanh(tape.matmul(w["W_Qhat"], Q))
        A_hat = tape.row_softmax(tape.scale(tape.matmul(Kt, Q_hat), s))
        mix = tape.matmul(A, tape.transpose(A_hat))
        if renormalize_rows:
            mix = tape.row_normalize(mix)
    if capture is not None:
        capture.layers.append(AttentionMaps(
            A.value, None if A_hat is None else A_hat.value, mix.value))
    Z = tape.matmul(V, mix)
    return tape.transpose(tape.matmul(w["W_O"], Z))


def stacked_forward(tape: Tape, z0: Node, stack: LayerStack,
                    nodes: dict[str, Node], rng=None,
                    capture: CapturedMaps | None = None) -> Node:
    """Apply ``z <- layer_norm(dropout(attention(z)) + z)`` for each layer."""
    if z0.shape[-1] != stack.d_model:
        raise ShapeError(f"stack {stack.prefix} expects width {stack.d_model}, "
                         f"got {z0.shape[-1]}")
    z = z0
    for i in range(stack.n_layers):
        names = stack.layer_names(i)
        w = {k: nodes[v] for k, v in names.items()}
        out = attention_sublayer(tape, z, w, stack.d_attn, stack.plain_softmax,
                                 stack.renormalize_rows, capture)
        out = tape.dropout(out, stack.dropout, rng)
        z = tape.layer_norm(tape.add(out, z), w["ln_gain"], w["ln_bias"])
    return z


# -- rank diagnostics ------------------------------------------------------


def bucket_for(diff: int) -> str:
    if diff <= 3:
        return BUCKETS[0]
    if diff <= 7:
        return BUCKETS[1]
    if diff <= 11:
        return BUCKETS[2]
    return BUCKETS[3]


@dataclass(frozen=True)
class RankDiagnostic:
    T: int
    rank: int
    diff: int
    rel_tol: float
    bucket: str
    mode: str = "raw"


def rank_diagnose(attn_map: np.ndarray, mode: str = "raw",
                  rel_tol: float = tensor.DEFAULT_RANK_TOL) -> RankDiagnostic:
    m = np.asarray(attn_map, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"attention map must be square, got {m.shape}")
    if mode == "log":
        if np.any(m <= 0):
            raise DomainError("log-mode rank needs strictly positive entries")
        m = np.log(m)
    elif mode != "raw":
        raise ValueError(f"unknown mode {mode!r}")
    T = m.shape[0]
    r = tensor.numerical_rank(m, rel_tol)
    return RankDiagnostic(T, r, T - r, rel_tol, bucket_for(T - r), mode)


def rank_histogram(diags) -> dict[str, int]:
    counts = Counter(d.bucket for d in diags)
    return {b: counts.get(b, 0) for b in BUCKETS}


def write_rank_csv(path, rows) -> None:
    """``rows`` is an iterable of ``(video_id, RankDiagnostic)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANK_CSV_HEADER)
        for vid, d in rows:
            w.writerow([vid, d.T, d.rank, d.diff, d.bucket])


def read_rank_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != RANK_CSV_HEADER:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    return [dict(r, T=int(r["T"]), rank=int(r["rank"]), diff=int(r["diff"]))
            for r in reader]


def bottleneck_trial(seed: int, d_attn: int = 2, T: int = 8,
                     rel_tol: float = tensor.DEFAULT_RANK_TOL) -> tuple[int, int]:
    """Draw standard-normal K, Q, W_Qhat and return the log-domain ranks
    ``(rank(log A), rank(log A_moa))``."""
    rng = tensor.SeededRng(seed)
    K = rng.normal(size=(d_attn, T))
    Q = rng.normal(size=(d_attn, T))
    W = rng.normal(size=(d_attn, d_attn))
    A = scaled_attention(K, Q)
    A_hat = associated_attention(K, Q, W)
    A_moa, _ = mixture_attention(A, A_hat, np.zeros((1, T)))
    return (tensor.numerical_rank(np.log(A), rel_tol),
            tensor.numerical_rank(np.log(A_moa), rel_tol))


def params_from_vector(params: ParameterVector, stack: LayerStack,
                       layer: int) -> dict[str, np.ndarray]:
    return {k: params[v] for k, v in stack.layer_names(layer).items()}
