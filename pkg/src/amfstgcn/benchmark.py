"""Synthetic spatial-lag benchmark shared by the experiment scripts and the acceptance gate."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSplit, make_windows, spatial_lag_ring
from .graph import ring_graph
from .model import DEFAULT_KERNELS, ModelConfig
from .training import HorizonMetrics, TrainConfig, evaluate, ha_baseline, horizon_metrics, train


@dataclass(frozen=True)
class BenchSpec:
    n_nodes: int = 8
    steps: int = 600
    period: int = 24
    lag: int = 2
    coupling: float = 0.5
    noise: float = 0.05
    data_seed: int = 0
    t_in: int = 12
    horizon: int = 6
    ratios: tuple = (6, 2, 2)
    epochs: int = 300
    # reduced width and a single block keep one run near two minutes on one core
    model: dict = field(default_factory=lambda: dict(
        kernels=DEFAULT_KERNELS, k_hops=3, c_out=8, n_blocks=1, embed_dim=10, fc_hidden=32, ts_light=True))

    def dataset(self) -> DatasetSplit:
        raw = spatial_lag_ring(self.n_nodes, self.steps, self.period, self.lag, self.coupling,
                               self.noise, self.data_seed)
        return make_windows(raw, self.t_in, self.horizon, self.ratios)

    def model_config(self, **flags) -> ModelConfig:
        return ModelConfig(n_nodes=self.n_nodes, t_in=self.t_in, horizon=self.horizon, **{**self.model, **flags})


@dataclass
class BenchResult:
    seed: int
    flags: dict
    history: list
    test: HorizonMetrics
    seconds: float

    @property
    def train_ratio(self) -> float:
        return self.history[-1][1] / self.history[0][1]


def run(spec: BenchSpec, seed: int, data: DatasetSplit | None = None, **flags) -> BenchResult:
    data = data if data is not None else spec.dataset()
    adj = ring_graph(spec.n_nodes).adjacency
    cfg = spec.model_config(**flags)
    t0 = time.perf_counter()
    res = train(TrainConfig(epochs=spec.epochs, seed=seed), data, adj, cfg)
    m = evaluate(res.params, cfg, adj, data.test, data.bounds)
    return BenchResult(seed, flags, res.history, m, time.perf_counter() - t0)


def ha(spec: BenchSpec, data: DatasetSplit | None = None) -> HorizonMetrics:
    data = data if data is not None else spec.dataset()
    return ha_baseline(data, data.test, spec.period)


def oracle(spec: BenchSpec, data: DatasetSplit | None = None) -> HorizonMetrics:
    """Noise-free recursion rolled forward from each observed window.

    Knows the generating process, so it approximates the best MAE any
    forecaster can reach on the test windows.
    """
    data = data if data is not None else spec.dataset()
    w = data.test
    x = data.bounds.denormalize(w.x)[..., 0]
    y = data.bounds.denormalize(w.y)
    pred = np.zeros_like(y)
    for i in range(len(x)):
        hist = list(x[i])
        t0 = int(w.start[i]) + spec.t_in
        for h in range(spec.horizon):
            t = t0 + h
            val = math.sin(2 * math.pi * t / spec.period) + spec.coupling * np.roll(hist[-spec.lag], 1)
            hist.append(val)
            pred[i, h, :, 0] = val
    return horizon_metrics(pred, y)


def improvement(model_mae: float, base_mae: float) -> float:
    return 1.0 - model_mae / base_mae


def ablation_table(spec: BenchSpec, seeds, runs: dict | None = None) -> dict[str, list[BenchResult]]:
    """Full model and both ablations for every seed; ``runs`` caches finished results."""
    runs = runs if runs is not None else {}
    data = spec.dataset()
    variants = {"full": {}, "w/o mask": {"use_mask": False}, "w/o attention": {"use_attention": False}}
    table = {}
    for name, flags in variants.items():
        table[name] = []
        for s in seeds:
            key = (name, s)
            if key not in runs:
                runs[key] = run(spec, s, data, **flags)
            table[name].append(runs[key])
    return table


def full_ts(spec: BenchSpec) -> BenchSpec:
    """Variant that re-encodes the sliding buffer at every decoder step."""
    return replace(spec, model={**spec.model, "ts_light": False})
