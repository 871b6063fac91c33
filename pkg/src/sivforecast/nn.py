"""LSTM blocks, linear output map, initialization, Adam and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DArray, DimensionError, NumericalError


@dataclass
class LstmCellParams:
    w_ih: DArray  # (4H, D)
    w_hh: DArray  # (4H, H)
    b: DArray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_width(self) -> int:
        return self.w_ih.shape[1]

    def named(self, prefix: str) -> Iterator[tuple[str, DArray]]:
        yield f"{prefix}.w_ih", self.w_ih
        yield f"{prefix}.w_hh", self.w_hh
        yield f"{prefix}.b", self.b


@dataclass
class StackedLstmParams:
    """``layers[l][d]`` is layer ``l``, direction ``d`` (0 forward, 1 backward)."""

    layers: list[list[LstmCellParams]]
    bidirectional: bool = False

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def hidden(self) -> int:
        return self.layers[0][0].hidden

    @property
    def output_width(self) -> int:
        return 2 * self.hidden if self.bidirectional else self.hidden

    def named(self, prefix: str) -> Iterator[tuple[str, DArray]]:
        for li, layer in enumerate(self.layers):
            for di, cell in enumerate(layer):
                yield from cell.named(f"{prefix}.l{li}.{'fb'[di]}")


@dataclass
class Linear:
    w: DArray  # (out, in)
    b: DArray  # (out,)

    def named(self, prefix: str) -> Iterator[tuple[str, DArray]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


# ------------------------------------------------------------------ init

def init_lstm_cell(input_width: int, hidden: int, rng: np.random.Generator) -> LstmCellParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1, other biases 0."""
    if input_width <= 0 or hidden <= 0:
        raise ContractError(f"init_lstm_cell: widths must be positive, got {input_width}, {hidden}")
    bound = 1.0 / math.sqrt(hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return LstmCellParams(
        DArray(rng.uniform(-bound, bound, (4 * hidden, input_width)), requires_grad=True),
        DArray(rng.uniform(-bound, bound, (4 * hidden, hidden)), requires_grad=True),
        DArray(b, requires_grad=True),
    )


def init_stacked(input_width: int, hidden: int, num_layers: int, bidirectional: bool,
                 rng: np.random.Generator) -> StackedLstmParams:
    if num_layers <= 0:
        raise ContractError("init_stacked: need at least one layer")
    dirs = 2 if bidirectional else 1
    layers = []
    width = input_width
    for _ in range(num_layers):
        layers.append([init_lstm_cell(width, hidden, rng) for _ in range(dirs)])
        width = dirs * hidden
    return StackedLstmParams(layers, bidirectional)


def init_linear(in_width: int, out_width: int, rng: np.random.Generator) -> Linear:
    bound = 1.0 / math.sqrt(in_width)
    return Linear(DArray(rng.uniform(-bound, bound, (out_width, in_width)), requires_grad=True),
                  DArray(np.zeros(out_width), requires_grad=True))


# --------------------------------------------------------------- forward

def lstm_cell_step(p: LstmCellParams, x: DArray, h_prev: DArray,
                   c_prev: DArray) -> tuple[DArray, DArray]:
    """One batched LSTM step; ``x`` (N, D), states (N, H)."""
    return ad.lstm_cell(x, h_prev, c_prev, p.w_ih, p.w_hh, p.b)


def lstm_cell_step_reference(p: LstmCellParams, x: DArray, h_prev: DArray,
                             c_prev: DArray) -> tuple[DArray, DArray]:
    """Same recurrence as :func:`lstm_cell_step`, composed from primitive ops.

    Kept as an independent route for checking the fused cell.
    """
    H = p.hidden
    wt_ih, wt_hh = ad.transpose(p.w_ih), ad.transpose(p.w_hh)
    z = ad.add_bias(ad.add(ad.matmul(x, wt_ih), ad.matmul(h_prev, wt_hh)), p.b)
    i = ad.sigmoid(ad.slice_(z, 1, 0, H))
    f = ad.sigmoid(ad.slice_(z, 1, H, 2 * H))
    g = ad.tanh(ad.slice_(z, 1, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_(z, 1, 3 * H, 4 * H))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def encode_sequence(p: StackedLstmParams, seq: np.ndarray) -> DArray:
    """Run the stack over ``seq`` (N, T, D) and return the top layer's summary.

    A unidirectional stack returns the hidden state after the last step. A
    bidirectional one concatenates the forward state after the last step with
    the backward state after the first step, width 2H.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3:
        raise DimensionError(f"encode_sequence: expected (N, T, D) input, got {seq.shape}")
    xs = DArray(np.ascontiguousarray(seq.transpose(1, 0, 2)))
    T, N = xs.shape[0], xs.shape[1]
    if T == 0:
        raise ContractError("encode_sequence: empty sequence")
    H = p.hidden
    for layer in p.layers:
        outs = [ad.lstm_layer(xs, cell.w_ih, cell.w_hh, cell.b, reverse=(di == 1))
                for di, cell in enumerate(layer)]
        xs = outs[0] if len(outs) == 1 else ad.concat(outs, axis=2)
    last = ad.reshape(ad.slice_(outs[0], 0, T - 1, T), (N, H))
    if len(outs) == 1:
        return last
    first = ad.reshape(ad.slice_(outs[1], 0, 0, 1), (N, H))
    return ad.concat([last, first], axis=1)


@dataclass
class DecoderState:
    h: list[DArray]
    c: list[DArray]


def zero_decoder_state(p: StackedLstmParams, n: int) -> DecoderState:
    H = p.hidden
    return DecoderState([DArray(np.zeros((n, H))) for _ in p.layers],
                        [DArray(np.zeros((n, H))) for _ in p.layers])


def decoder_step(p: StackedLstmParams, x: DArray, state: DecoderState) -> tuple[DArray, DecoderState]:
    """Advance a unidirectional stack one step; returns top hidden and new state."""
    hs, cs = [], []
    inp = x
    for li, layer in enumerate(p.layers):
        h, c = lstm_cell_step(layer[0], inp, state.h[li], state.c[li])
        hs.append(h)
        cs.append(c)
        inp = h
    return inp, DecoderState(hs, cs)


def linear(p: Linear, h: DArray) -> DArray:
    """``h`` (N, in) -> (N, out) = h W^T + b."""
    if h.data.ndim != 2 or h.shape[1] != p.w.shape[1]:
        raise DimensionError(f"linear: input {h.shape} vs weight {p.w.shape}")
    return ad.add_bias(ad.matmul(h, ad.transpose(p.w)), p.b)


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, DArray]) -> None:
    """One Adam update using each parameter's ``.grad``; mutates in place.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` before the Adam delta.
    """
    for name, p in params.items():
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------- checkpoints

def save_params(path: str | Path, params: dict[str, DArray], meta: dict | None = None) -> None:
    """Write (name, shape, values) records; floats are stored as hex for exact round-trip."""
    records = [
        {"name": n, "shape": list(p.shape), "values": [float(v).hex() for v in p.data.reshape(-1)]}
        for n, p in params.items()
    ]
    Path(path).write_text(json.dumps({"meta": meta or {}, "params": records}, indent=1))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for rec in doc["params"]:
        vals = np.array([float.fromhex(v) for v in rec["values"]], dtype=np.float64)
        out[rec["name"]] = vals.reshape(rec["shape"])
    return out, doc.get("meta", {})
