"""Fully-connected and time-step decoders, gated fusion and the MSE objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor
from .model import ModelConfig, Params, encode, spectral_stack


class ContractError(ValueError):
    pass


@dataclass
class ForecastPair:
    y_fc: Tensor
    y_ts: Tensor
    y_fused: Tensor


def _per_node_affine(x, w, b) -> Tensor:
    y = E.einsum("bnf,fo->bno", x, w)
    return E.add(y, E.broadcast_to(b, y.shape))


def fc_decode(h, p: Params, horizon: int, channels: int) -> Tensor:
    """(b,N,T,C_h) features -> (b,M,N,C), all steps at once."""
    h = E.as_tensor(h)
    b, n, t, ch = h.shape
    flat = E.reshape(h, (b, n, t * ch))
    hid = E.relu(_per_node_affine(flat, p["fc_w1"], p["fc_b1"]))
    out = _per_node_affine(hid, p["fc_w2"], p["fc_b2"])
    return E.transpose(E.reshape(out, (b, n, horizon, channels)), (0, 2, 1, 3))


def step_head(h, window, p: Params) -> Tensor:
    """Next frame (b,N,C) from encoder features and the raw (b,T,N,C) buffer."""
    h, window = E.as_tensor(h), E.as_tensor(window)
    b, n, t, ch = h.shape
    c = window.shape[-1]
    raw = E.reshape(E.transpose(window, (0, 2, 1, 3)), (b, n, t * c))
    feats = E.concat([E.reshape(h, (b, n, t * ch)), raw], axis=-1)
    return _per_node_affine(feats, p["ts_w"], p["ts_b"])


def ts_decode(x, stack, p: Params, cfg: ModelConfig, steps: int, h0=None,
              scores_override=None) -> Tensor:
    """Iterative forecast: predict one frame, slide it into the buffer, repeat.

    The full model re-encodes the buffer every step.  With ``cfg.ts_light``
    the features of the original window are reused and only the raw buffer
    slides.  ``h0`` optionally supplies the first step's features.
    """
    buf = E.as_tensor(x)
    t = buf.shape[1]
    frames = []
    h = h0
    for step in range(steps):
        if h is None or (step > 0 and not cfg.ts_light):
            h = encode(buf, stack, p, cfg, scores_override)
        frame = E.reshape(step_head(h, buf, p), (buf.shape[0], 1) + buf.shape[2:])
        frames.append(frame)
        buf = E.concat([E.slice_axis(buf, 1, 1, t), frame], axis=1)
    return E.concat(frames, axis=1)


def fuse(y_fc, y_ts, gate_raw) -> Tensor:
    """sigmoid(gate) * y_fc + (1 - sigmoid(gate)) * y_ts; gate is (N, M), broadcast over batch and channels."""
    y_fc, y_ts, gate_raw = E.as_tensor(y_fc), E.as_tensor(y_ts), E.as_tensor(gate_raw)
    if y_fc.shape != y_ts.shape:
        raise ContractError(f"decoder outputs differ: {y_fc.shape} vs {y_ts.shape}")
    b, m, n, c = y_fc.shape
    if gate_raw.shape != (n, m):
        raise ContractError(f"gate shape {gate_raw.shape} does not match (N, M) = {(n, m)}")
    g = E.sigmoid(gate_raw)
    g = E.broadcast_to(E.reshape(E.transpose(g, (1, 0)), (1, m, n, 1)), y_fc.shape)
    return E.add(E.mul(g, y_fc), E.mul(E.sub(np.ones(y_fc.shape), g), y_ts))


def mse_loss(y_hat, y) -> Tensor:
    """Mean over horizon steps of the per-step squared error averaged over nodes and channels."""
    y_hat, y = E.as_tensor(y_hat), E.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ContractError(f"prediction {y_hat.shape} vs target {y.shape}")
    d = E.sub(y_hat, y)
    return E.mean(E.mul(d, d))


def forecast(x, adjacency: np.ndarray, p: Params, cfg: ModelConfig,
             scores_override=None, trace: dict | None = None) -> ForecastPair:
    """Full forward pass for a (b,T,N,C) batch of windows."""
    stack = spectral_stack(p, adjacency, cfg)
    h = encode(x, stack, p, cfg, scores_override, trace)
    y_fc = fc_decode(h, p, cfg.horizon, cfg.in_channels)
    y_ts = ts_decode(x, stack, p, cfg, cfg.horizon, h0=h, scores_override=scores_override)
    return ForecastPair(y_fc, y_ts, fuse(y_fc, y_ts, p["gate_raw"]))
