"""Optimisation loop, metrics and the historical-average baseline."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import engine as E
from .data import Bounds, DatasetSplit, Windows
from .decoders import fc_decode, forecast, mse_loss
from .model import ModelConfig, Params, encode, init_params, spectral_stack

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    two_phase: bool = False
    phase1_epochs: int = 0        # defaults to half of ``epochs`` when two_phase is on
    model: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def model_config(self, n_nodes: int, in_channels: int, t_in: int, horizon: int) -> ModelConfig:
        m = dict(self.model)
        for key, val in (("n_nodes", n_nodes), ("in_channels", in_channels), ("t_in", t_in), ("horizon", horizon)):
            if m.setdefault(key, val) != val:
                raise ValueError(f"config {key}={m[key]} conflicts with data ({val})")
        return ModelConfig(**m)


class Adam:
    def __init__(self, params: Params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros(t.shape) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape) for k, t in params.items()}
        self.t = 0

    def step(self, params: Params, grads: dict[str, np.ndarray]) -> Params:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        new = {}
        for k, t in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            new[k] = t.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return params.replace(new)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}


def trainable(p: Params, cfg: ModelConfig, phase: int) -> list[str]:
    names = p.names()
    if phase == 1:
        return [k for k in names if not k.startswith(("ts_", "gate_"))]
    return names


def batch_loss(p: Params, cfg: ModelConfig, adjacency, x, y, phase: int = 2):
    if phase == 1:
        h = encode(x, spectral_stack(p, adjacency, cfg), p, cfg)
        return mse_loss(fc_decode(h, p, cfg.horizon, cfg.in_channels), y)
    return mse_loss(forecast(x, adjacency, p, cfg).y_fused, y)


@dataclass
class TrainResult:
    params: Params
    model_config: ModelConfig
    history: list[tuple[int, float, float]]     # (epoch, train_mse, val_mse)


def train(tc: TrainConfig, data: DatasetSplit, adjacency: np.ndarray,
          model_cfg: ModelConfig | None = None) -> TrainResult:
    """Mini-batch Adam on the fused-forecast MSE.  Deterministic for a given seed."""
    tr = data.train
    if model_cfg is None:
        model_cfg = tc.model_config(adjacency.shape[0], tr.x.shape[-1], tr.x.shape[1], tr.y.shape[1])
    p = init_params(model_cfg, tc.seed)
    opt = Adam(p, tc.lr, tc.betas, tc.adam_eps)
    rng = np.random.default_rng(tc.seed + 1)
    phase1 = (tc.phase1_epochs or tc.epochs // 2) if tc.two_phase else 0
    history = []
    for epoch in range(1, tc.epochs + 1):
        phase = 1 if epoch <= phase1 else 2
        names = trainable(p, model_cfg, phase)
        order = rng.permutation(len(tr))
        total, count = 0.0, 0
        for bi, lo in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[lo:lo + tc.batch_size]
            try:
                with E.Tape() as tape:
                    loss = batch_loss(p, model_cfg, adjacency, tr.x[idx], tr.y[idx], phase)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise E.NonFiniteError("loss")
                gl = tape.gradient(loss, p.values())
            except E.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi} ({exc})") from exc
            grads = {k: g if k in names else np.zeros_like(g) for k, g in zip(p.names(), gl)}
            grads = clip_by_global_norm(grads, tc.clip_norm)
            if tc.lr > 0:
                p = opt.step(p, grads)
            total += lv * len(idx)
            count += len(idx)
        val = evaluate_mse(p, model_cfg, adjacency, data.val, tc.batch_size) if len(data.val) else float("nan")
        history.append((epoch, total / count, val))
        log.info("epoch %d train_mse %.6g val_mse %.6g", epoch, total / count, val)
    return TrainResult(p, model_cfg, history)


def predict(p: Params, cfg: ModelConfig, adjacency, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = [forecast(x[i:i + batch_size], adjacency, p, cfg).y_fused.data
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, cfg.horizon, cfg.n_nodes, cfg.in_channels))


def evaluate_mse(p, cfg, adjacency, w: Windows, batch_size: int = 64) -> float:
    pred = predict(p, cfg, adjacency, w.x, batch_size)
    return float(np.mean((pred - w.y) ** 2))


# ---------------------------------------------------------------- metrics

@dataclass
class HorizonMetrics:
    mae: np.ndarray       # per horizon step
    rmse: np.ndarray
    mae_mean: float
    rmse_mean: float

    def rows(self, label: str | None = None) -> list[list]:
        head = [label] if label is not None else []
        out = [head + [h + 1, float(a), float(r)] for h, (a, r) in enumerate(zip(self.mae, self.rmse))]
        out.append(head + ["mean", self.mae_mean, self.rmse_mean])
        return out


def horizon_metrics(pred: np.ndarray, target: np.ndarray) -> HorizonMetrics:
    """MAE/RMSE per horizon step of (n, M, N, C) arrays, plus the pooled averages."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape or len(pred) == 0:
        raise ValueError(f"bad prediction/target shapes {pred.shape} / {target.shape}")
    e = pred - target
    axes = (0, 2, 3)
    mae = np.abs(e).mean(axis=axes)
    rmse = np.sqrt((e * e).mean(axis=axes))
    return HorizonMetrics(mae, rmse, float(np.abs(e).mean()), float(np.sqrt((e * e).mean())))


def evaluate(p: Params, cfg: ModelConfig, adjacency, w: Windows, bounds: Bounds) -> HorizonMetrics:
    """Metrics on denormalised predictions and targets."""
    pred = predict(p, cfg, adjacency, w.x)
    return horizon_metrics(bounds.denormalize(pred), bounds.denormalize(w.y))


def ha_forecast(data: DatasetSplit, w: Windows, period: int) -> np.ndarray:
    """Per-slot means of the training history, indexed by each target's absolute time."""
    a, b = data.segments[0]
    hist = data.raw[a:b]
    if period < 1 or len(hist) < period:
        raise ValueError(f"training history of {len(hist)} steps is shorter than period {period}")
    slots = (np.arange(a, b)) % period
    means = np.stack([hist[slots == s].mean(axis=0) for s in range(period)])   # (period, N, C)
    return means[w.target_times() % period]


def ha_baseline(data: DatasetSplit, w: Windows, period: int) -> HorizonMetrics:
    return horizon_metrics(ha_forecast(data, w, period), data.bounds.denormalize(w.y))
