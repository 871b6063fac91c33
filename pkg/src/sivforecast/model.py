"""Linked encoder/decoder forecaster and the comparison architectures.

Every architecture shares the same skeleton: an encoder summarises the input
window into a state, a decoder advances that state one horizon step at a time
and a linear map reads a forecast off it. The architectures differ only in
whether per-SIV decoders run next to the main decoder and in how their output
is folded into the shared state.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ContractError, DArray, DimensionError

ARCHITECTURES = (
    "encdec",
    "linked",
    "full_capacity",
    "no_gating",
    "no_restriction",
    "no_siv_input",
    "only_siv_input",
)
ABLATIONS = ("no_gating", "no_restriction", "no_siv_input", "only_siv_input")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SivSpec:
    name: str
    channel: int
    k: int

    def __post_init__(self):
        if self.k not in (1, -1):
            raise ConfigError(f"SIV {self.name!r}: sign must be +1 or -1, got {self.k}")
        if self.channel < 0:
            raise ConfigError(f"SIV {self.name!r}: negative channel {self.channel}")


DEFAULT_SIVS = (SivSpec("carbs", 0, +1), SivSpec("bolus", 1, -1))


@dataclass(frozen=True)
class Mechanisms:
    siv_decoders: bool = False
    gating: bool = False
    restrict: bool = False
    signed: bool = False
    phi_siv_input: bool = False
    theta_siv_input: bool = False


MECHANISMS = {
    "encdec": Mechanisms(),
    "linked": Mechanisms(True, True, True, True, True),
    "full_capacity": Mechanisms(True, False, False, False, False),
    "no_gating": Mechanisms(True, False, True, True, True),
    "no_restriction": Mechanisms(True, True, False, True, True),
    "no_siv_input": Mechanisms(True, True, True, True, False),
    "only_siv_input": Mechanisms(theta_siv_input=True),
}


def mechanisms(arch: str) -> Mechanisms:
    try:
        return MECHANISMS[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}") from None


@dataclass
class LinkedModel:
    arch: str
    siv_specs: tuple[SivSpec, ...]
    T: int
    h: int
    hidden: int
    encoder: nn.StackedLstmParams
    proj: nn.Linear | None
    theta: nn.StackedLstmParams
    phis: list[nn.StackedLstmParams]
    fc: nn.Linear

    def parameters(self) -> dict[str, DArray]:
        out = dict(self.encoder.named("psi"))
        if self.proj is not None:
            out.update(self.proj.named("psi.proj"))
        out.update(self.theta.named("theta"))
        for spec, phi in zip(self.siv_specs, self.phis):
            out.update(phi.named(f"phi.{spec.name}"))
        out.update(self.fc.named("fc"))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            missing = sorted(set(params) - set(values))
            extra = sorted(set(values) - set(params))
            raise ConfigError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            if values[k].shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {values[k].shape} vs {p.shape}")
            p.data[...] = values[k]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()


def build_model(arch: str, T: int, h: int, hidden: int = 32,
                siv_specs: tuple[SivSpec, ...] = DEFAULT_SIVS, num_layers: int = 2,
                bidirectional: bool = True, rng: np.random.Generator | int = 0) -> LinkedModel:
    mech = mechanisms(arch)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    S = len(siv_specs)
    if T < 1 or h < 1 or hidden < 1:
        raise ConfigError(f"T, h and hidden must be positive, got {T}, {h}, {hidden}")
    encoder = nn.init_stacked(1 + S, hidden, num_layers, bidirectional, rng)
    proj = nn.init_linear(2 * hidden, hidden, rng) if bidirectional else None
    theta_in = hidden + (S * (T + h) if mech.theta_siv_input else 0)
    theta = nn.init_stacked(theta_in, hidden, num_layers, False, rng)
    fc = nn.init_linear(hidden, 1, rng)
    # SIV decoders are drawn last so the shared parts match an encdec model built
    # from the same seed
    phis = []
    if mech.siv_decoders:
        phi_in = hidden + (T + h if mech.phi_siv_input else 0)
        phis = [nn.init_stacked(phi_in, hidden, num_layers, False, rng) for _ in siv_specs]
    return LinkedModel(arch, tuple(siv_specs), T, h, hidden, encoder, proj, theta, phis, fc)


# ------------------------------------------------------------- SIV inputs

def shifted_siv_input(siv_window: np.ndarray, step: int, h: int) -> np.ndarray:
    """Pad the last axis to length T+h so step ``step`` (1-based) sees its own offset.

    Front padding is ``h - (step-1)`` zeros and back padding ``step-1`` zeros.
    """
    if not 1 <= step <= h:
        raise ContractError(f"shifted_siv_input: step {step} outside 1..{h}")
    siv_window = np.asarray(siv_window, dtype=np.float64)
    pad = [(0, 0)] * (siv_window.ndim - 1) + [(h - (step - 1), step - 1)]
    return np.pad(siv_window, pad)


def scale_siv_to_state(siv_vec: np.ndarray, h_prev: DArray) -> DArray:
    """Rescale each row of ``siv_vec`` so its mean equals the mean of ``h_prev``'s row.

    Rows whose mean is zero pass through unchanged. The factor stays on the
    tape, so gradients reach ``h_prev`` through it.
    """
    siv_vec = np.atleast_2d(np.asarray(siv_vec, dtype=np.float64))
    if h_prev.data.ndim != 2 or h_prev.shape[0] != siv_vec.shape[0]:
        raise DimensionError(f"scale_siv_to_state: {siv_vec.shape} vs state {h_prev.shape}")
    means = siv_vec.mean(axis=1, keepdims=True)
    live = means != 0
    inv = np.divide(1.0, means, out=np.zeros_like(means), where=live)
    factor = ad.mul(ad.row_mean(h_prev), DArray(inv))
    scaled = ad.rowscale(DArray(np.where(live, siv_vec, 0.0)), factor)
    if live.all():
        return scaled
    return ad.add(scaled, DArray(np.where(live, 0.0, siv_vec)))


# ---------------------------------------------------------------- forward

@dataclass
class ForecastTrace:
    preds: DArray  # (N, h)
    h_theta: list[DArray] = field(default_factory=list)
    contributions: list[list[DArray]] = field(default_factory=list)  # [step][siv]
    gates: np.ndarray | None = None  # (N, S) bool
    phi_hidden: list[list[DArray | None]] = field(default_factory=list)  # before restriction

    def kink_margin(self) -> float:
        """Smallest |h_phi| that went through a ReLU; inf when none did."""
        vals = [np.abs(p.data).min() for step in self.phi_hidden for p in step
                if p is not None and p.data.size]
        return float(min(vals)) if vals else float("inf")


def _encoder_input(x: np.ndarray, sivs: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sivs = np.asarray(sivs, dtype=np.float64)
    if x.ndim == 1:
        x, sivs = x[None], sivs[None]
    if sivs.ndim == 2:
        sivs = sivs[:, :, None]
    if sivs.shape[:2] != x.shape:
        raise DimensionError(f"target window {x.shape} vs SIV windows {sivs.shape}")
    return np.concatenate([x[:, :, None], sivs], axis=2)


def encode(m: LinkedModel, seq: np.ndarray) -> DArray:
    if seq.shape[1] != m.T or seq.shape[2] != 1 + len(m.siv_specs):
        raise DimensionError(f"input windows {seq.shape} do not match T={m.T}, "
                             f"{len(m.siv_specs)} SIVs")
    h_enc = nn.encode_sequence(m.encoder, seq)
    return nn.linear(m.proj, h_enc) if m.proj is not None else h_enc


ALL = slice(None)


def _run(m: LinkedModel, x: np.ndarray, sivs: np.ndarray, mech: Mechanisms,
         signs: tuple[int, ...] | None = None) -> ForecastTrace:
    seq = _encoder_input(x, sivs)
    N = seq.shape[0]
    siv_win = seq[:, :, 1:]
    S = siv_win.shape[2]
    signs = signs or tuple(s.k for s in m.siv_specs)
    gates = np.any(siv_win != 0, axis=1)
    if mech.siv_decoders and len(m.phis) != S:
        raise DimensionError(f"model has {len(m.phis)} SIV decoders for {S} SIV channels")

    state = encode(m, seq)
    theta_state = nn.zero_decoder_state(m.theta, N)
    gate_rows = []
    phi_states = []
    if mech.siv_decoders:
        for s in range(S):
            rows = np.flatnonzero(gates[:, s]) if mech.gating else ALL
            if rows is not ALL and len(rows) == N:
                rows = ALL
            gate_rows.append(rows)
            n_rows = N if rows is ALL else len(rows)
            phi_states.append(nn.zero_decoder_state(m.phis[s], n_rows))
    trace = ForecastTrace(preds=None, gates=gates)
    preds = []
    for step in range(1, m.h + 1):
        theta_in = state
        if mech.theta_siv_input:
            theta_in = ad.concat(
                [state] + [scale_siv_to_state(shifted_siv_input(siv_win[:, :, s], step, m.h), state)
                           for s in range(S)], axis=1)
        h_theta, theta_state = nn.decoder_step(m.theta, theta_in, theta_state)
        combined = h_theta
        contribs = []
        phi_raw = []
        if mech.siv_decoders:
            for s in range(S):
                rows = gate_rows[s]
                if rows is not ALL and len(rows) == 0:
                    contribs.append(DArray(np.zeros((N, m.hidden))))
                    phi_raw.append(None)
                    continue
                phi_in = state if rows is ALL else ad.take_rows(state, rows)
                if mech.phi_siv_input:
                    win = siv_win[:, :, s] if rows is ALL else siv_win[rows, :, s]
                    siv_in = scale_siv_to_state(shifted_siv_input(win, step, m.h), phi_in)
                    phi_in = ad.concat([phi_in, siv_in], axis=1)
                h_phi, phi_states[s] = nn.decoder_step(m.phis[s], phi_in, phi_states[s])
                phi_raw.append(h_phi if mech.restrict else None)
                contrib = ad.relu(h_phi) if mech.restrict else h_phi
                if mech.signed:
                    contrib = ad.scale(contrib, signs[s])
                if rows is not ALL:
                    contrib = ad.put_rows(contrib, rows, N)
                contribs.append(contrib)
                combined = ad.add(combined, contrib)
        trace.h_theta.append(h_theta)
        trace.contributions.append(contribs)
        trace.phi_hidden.append(phi_raw)
        preds.append(nn.linear(m.fc, combined))
        state = combined
    trace.preds = ad.concat(preds, axis=1)
    return trace


def forward_linked(m: LinkedModel, x: np.ndarray, sivs: np.ndarray) -> ForecastTrace:
    """Gated, sign-restricted SIV decoders fed with the shifted SIV window."""
    return _run(m, x, sivs, MECHANISMS["linked"])


def forward_baseline(m: LinkedModel, x: np.ndarray, sivs: np.ndarray) -> DArray:
    """Encoder, main decoder and output map only; SIVs reach the encoder alone."""
    return _run(m, x, sivs, MECHANISMS["encdec"]).preds


def forward_full_capacity(m: LinkedModel, x: np.ndarray, sivs: np.ndarray) -> DArray:
    return _run(m, x, sivs, MECHANISMS["full_capacity"]).preds


def ablated_forward(variant: str, m: LinkedModel, x: np.ndarray, sivs: np.ndarray) -> DArray:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")
    return _run(m, x, sivs, MECHANISMS[variant]).preds


def forward(m: LinkedModel, x: np.ndarray, sivs: np.ndarray) -> ForecastTrace:
    """Dispatch on ``m.arch``."""
    return _run(m, x, sivs, mechanisms(m.arch))


def predict(m: LinkedModel, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Forecasts (N, h) for windowed ``inputs`` (N, T, 1+S), without recording a tape."""
    out = []
    for lo in range(0, len(inputs), batch_size):
        chunk = inputs[lo:lo + batch_size]
        out.append(forward(m, chunk[:, :, 0], chunk[:, :, 1:]).preds.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, m.h))


def flip_restriction_sign(m: LinkedModel) -> LinkedModel:
    """Copy of ``m`` with every SIV sign negated; parameters are shared."""
    return replace(m, siv_specs=tuple(replace(s, k=-s.k) for s in m.siv_specs))


def clone(m: LinkedModel) -> LinkedModel:
    return copy.deepcopy(m)


# ------------------------------------------------------------ checkpoints

def save_model(path, m: LinkedModel, meta: dict | None = None) -> None:
    info = {
        "arch": m.arch, "T": m.T, "h": m.h, "hidden": m.hidden,
        "num_layers": m.encoder.num_layers, "bidirectional": m.encoder.bidirectional,
        "siv_specs": [{"name": s.name, "channel": s.channel, "k": s.k} for s in m.siv_specs],
    }
    info.update(meta or {})
    nn.save_params(path, m.parameters(), info)


def load_model(path) -> tuple[LinkedModel, dict]:
    values, meta = nn.load_params(path)
    specs = tuple(SivSpec(**s) for s in meta["siv_specs"])
    m = build_model(meta["arch"], meta["T"], meta["h"], meta["hidden"], specs,
                    meta["num_layers"], meta["bidirectional"], rng=0)
    m.load(values)
    return m, meta
