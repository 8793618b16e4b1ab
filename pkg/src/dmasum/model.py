"""The dual-channel network: visual MoA stack, Bi-LSTM + sequential MoA
stack, concatenation and a sigmoid score head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import CapturedMaps, LayerStack, stacked_forward
from .autodiff import Node, ParameterVector, Tape, bind
from .errors import InputError, ShapeError
from .tensor import SeededRng

CHECKPOINT_MAGIC = b"DMASUM01"
CHANNELS = ("dual", "visual", "sequential")
GATES = ("i", "f", "g", "o")


@dataclass
class ModelConfig:
    input_dim: int = 64
    attn_dim: int = 32
    lstm_hidden: int = 32
    lstm_layers: int = 2
    head_hidden: int = 64
    n_visual: int = 4
    n_sequential: int = 2
    dropout: float = 0.0
    channel: str = "dual"
    plain_softmax: bool = False
    renormalize_rows: bool = False

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise InputError(f"channel must be one of {CHANNELS}")
        for name in ("input_dim", "attn_dim", "lstm_hidden", "lstm_layers",
                     "head_hidden", "n_visual", "n_sequential"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError("dropout must lie in [0, 1)")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """GoogLeNet pool5 width, attention width 1024, 2x512 Bi-LSTM,
        1024-unit head, 4 visual / 2 sequential layers."""
        base = dict(input_dim=1024, attn_dim=1024, lstm_hidden=512,
                    lstm_layers=2, head_hidden=1024, n_visual=4, n_sequential=2)
        base.update(overrides)
        return cls(**base)

    @property
    def uses_visual(self) -> bool:
        return self.channel in ("dual", "visual")

    @property
    def uses_sequential(self) -> bool:
        return self.channel in ("dual", "sequential")

    def visual_stack(self) -> LayerStack:
        return LayerStack("visual", self.n_visual, self.input_dim, self.attn_dim,
                          self.dropout, self.plain_softmax, self.renormalize_rows)

    def sequential_stack(self) -> LayerStack:
        return LayerStack("sequential", self.n_sequential, 2 * self.lstm_hidden,
                          self.attn_dim, self.dropout, self.plain_softmax,
                          self.renormalize_rows)

    @property
    def head_input(self) -> int:
        return (self.input_dim if self.uses_visual else 0) + \
            (2 * self.lstm_hidden if self.uses_sequential else 0)


def _lstm_names(layer: int, direction: str) -> dict[str, str]:
    base = f"lstm.{layer}.{direction}"
    out = {}
    for g in GATES:
        out[f"W_{g}"] = f"{base}.W_{g}"
        out[f"U_{g}"] = f"{base}.U_{g}"
        out[f"b_{g}"] = f"{base}.b_{g}"
    return out


def init_params(cfg: ModelConfig, seed: int) -> ParameterVector:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = SeededRng(seed)
    items: list[tuple[str, np.ndarray]] = []
    if cfg.uses_visual:
        items += cfg.visual_stack().init_params(rng)
    if cfg.uses_sequential:
        h = cfg.lstm_hidden
        for layer in range(cfg.lstm_layers):
            d_in = cfg.input_dim if layer == 0 else 2 * h
            for direction in ("fwd", "bwd"):
                names = _lstm_names(layer, direction)
                for g in GATES:
                    items.append((names[f"W_{g}"], rng.glorot(d_in, h)))
                    items.append((names[f"U_{g}"], rng.glorot(h, h)))
                    items.append((names[f"b_{g}"], np.zeros((1, h))))
        items += cfg.sequential_stack().init_params(rng)
    items.append(("head.W1", rng.glorot(cfg.head_input, cfg.head_hidden)))
    items.append(("head.b1", np.zeros((1, cfg.head_hidden))))
    items.append(("head.W2", rng.glorot(cfg.head_hidden, 1)))
    items.append(("head.b2", np.zeros((1, 1))))
    return ParameterVector(items)


def _lstm_direction(tape: Tape, x: Node, w: dict[str, Node], hidden: int,
                    reverse: bool) -> Node:
    # input projections for every frame at once, then the recurrence
    proj = {g: tape.rows(tape.add(tape.matmul(x, w[f"W_{g}"]), w[f"b_{g}"]))
            for g in GATES}
    T = x.shape[-2]
    h = tape.leaf(np.zeros((1, hidden)))
    c = tape.leaf(np.zeros((1, hidden)))
    outs: list[Node] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        pre = {g: tape.add(proj[g][t], tape.matmul(h, w[f"U_{g}"])) for g in GATES}
        i = tape.sigmoid(pre["i"])
        f = tape.sigmoid(pre["f"])
        cand = tape.tanh(pre["g"])
        o = tape.sigmoid(pre["o"])
        c = tape.add(tape.mul(f, c), tape.mul(i, cand))
        h = tape.mul(o, tape.tanh(c))
        outs[t] = h
    return tape.stack_rows(outs)


def sequential_encode(tape: Tape, x: Node, nodes: dict[str, Node],
                      cfg: ModelConfig) -> Node:
    """Bidirectional LSTM; per-frame ``[h_fwd, h_bwd]`` of width 2*hidden."""
    for layer in range(cfg.lstm_layers):
        fwd = _lstm_direction(tape, x, {k: nodes[v] for k, v in
                                        _lstm_names(layer, "fwd").items()},
                              cfg.lstm_hidden, reverse=False)
        bwd = _lstm_direction(tape, x, {k: nodes[v] for k, v in
                                        _lstm_names(layer, "bwd").items()},
                              cfg.lstm_hidden, reverse=True)
        x = tape.concat_cols(fwd, bwd)
    return x


@dataclass
class ForwardTrace:
    visual: CapturedMaps = field(default_factory=CapturedMaps)
    sequential: CapturedMaps = field(default_factory=CapturedMaps)


class DmaSumModel:
    def __init__(self, config: ModelConfig, params: ParameterVector | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, tape: Tape, features, params: ParameterVector | None = None,
                rng=None, trace: ForwardTrace | None = None) -> Node:
        """Scores node of shape T x 1 (with a leading batch axis when the
        parameters carry one)."""
        cfg = self.config
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != cfg.input_dim:
            raise ShapeError(f"features {feats.shape} do not match input_dim "
                             f"{cfg.input_dim}")
        nodes = bind(tape, self.params if params is None else params)
        h = tape.leaf(feats)
        parts = []
        if cfg.uses_visual:
            parts.append(stacked_forward(tape, h, cfg.visual_stack(), nodes, rng,
                                         trace.visual if trace else None))
        if cfg.uses_sequential:
            hs = sequential_encode(tape, h, nodes, cfg)
            parts.append(stacked_forward(tape, hs, cfg.sequential_stack(), nodes,
                                         rng, trace.sequential if trace else None))
        z = parts[0] if len(parts) == 1 else tape.concat_cols(*parts)
        hid = tape.relu(tape.add(tape.matmul(z, nodes["head.W1"]), nodes["head.b1"]))
        return tape.sigmoid(tape.add(tape.matmul(hid, nodes["head.W2"]),
                                     nodes["head.b2"]))

    def predict(self, features, params=None) -> np.ndarray:
        return self.forward(Tape(), features, params).value[:, 0].copy()

    def attention_maps(self, features) -> ForwardTrace:
        trace = ForwardTrace()
        self.forward(Tape(), features, trace=trace)
        return trace

    def loss(self, tape: Tape, features, target, params=None, rng=None) -> Node:
        pred = self.forward(tape, features, params, rng)
        return mse_loss(tape, pred, tape.leaf(_column(target)))

    def loss_fn(self, features, target, rng_seed: int | None = None):
        """``(params, tape) -> loss node`` closure for gradient checks."""
        def fn(params, tape):
            rng = SeededRng(rng_seed) if rng_seed is not None else None
            return self.loss(tape, features, target, params, rng)
        return fn

    def loss_and_grad(self, features, target, params=None, rng=None):
        tape = Tape()
        loss = self.loss(tape, features, target, params, rng)
        grads = tape.backward(loss)
        return float(loss.value.ravel()[0]), grads


def _column(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


def mse_loss(tape: Tape, pred: Node, target: Node) -> Node:
    """Mean squared error over frames."""
    if pred.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return tape.mse(pred, target)


def dual_forward(model: DmaSumModel, features, tape: Tape | None = None) -> np.ndarray:
    tape = tape if tape is not None else Tape()
    return model.forward(tape, features).value[:, 0].copy()


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model: DmaSumModel, extra: dict | None = None) -> None:
    header = {
        "config": asdict(model.config),
        "params": [{"name": n, "shape": list(s)} for n, s in model.params.shapes()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(model.params.flatten().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[DmaSumModel, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: bad checkpoint magic")
    (n,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16:16 + n].decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    payload = np.frombuffer(data, dtype="<f8", offset=16 + n).astype(np.float64)
    items, pos = [], 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        if pos + size > payload.size:
            raise InputError(f"{path}: truncated parameter payload")
        items.append((entry["name"], payload[pos:pos + size].reshape(shape).copy()))
        pos += size
    if pos != payload.size:
        raise InputError(f"{path}: trailing bytes after parameters")
    return DmaSumModel(cfg, ParameterVector(items)), header.get("extra", {})
