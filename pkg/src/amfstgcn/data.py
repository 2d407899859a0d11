"""Normalisation, sliding windows, chronological splits and dataset ingestion."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    lo: float
    hi: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * (self.hi - self.lo) + self.lo


def normalize(series: np.ndarray, bounds: Bounds | None = None) -> tuple[np.ndarray, Bounds]:
    """Global min-max scaling to [0, 1]; pass ``bounds`` to reuse existing ones."""
    series = np.asarray(series, dtype=np.float64)
    if bounds is None:
        lo, hi = float(series.min()), float(series.max())
        if not hi > lo:
            raise DataError("cannot normalise a constant dataset")
        bounds = Bounds(lo, hi)
    return bounds.normalize(series), bounds


@dataclass
class Windows:
    x: np.ndarray            # (n, T, N, C)
    y: np.ndarray            # (n, M, N, C)
    start: np.ndarray        # absolute index of each window's first input step

    def __len__(self):
        return len(self.x)

    def target_times(self) -> np.ndarray:
        """Absolute time index of every target step, shape (n, M)."""
        t, m = self.x.shape[1], self.y.shape[1]
        return self.start[:, None] + t + np.arange(m)[None, :]


@dataclass
class DatasetSplit:
    train: Windows
    val: Windows
    test: Windows
    bounds: Bounds
    segments: tuple[tuple[int, int], ...]   # (start, stop) of train/val/test in time
    raw: np.ndarray = field(repr=False)      # unnormalised (time, N, C)
    out_of_range: bool = False               # val/test values fall outside [0, 1]


def split_lengths(n: int, ratios) -> list[int]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DataError(f"need three nonnegative split ratios, got {ratios}")
    total = sum(ratios)
    n_train = math.floor(n * ratios[0] / total)
    n_val = math.floor(n * ratios[1] / total)
    return [n_train, n_val, n - n_train - n_val]


def windows(series: np.ndarray, t_in: int, horizon: int, offset: int = 0) -> Windows:
    """All stride-1 (input, target) pairs fully inside ``series`` (time, N, C)."""
    n = len(series) - t_in - horizon + 1
    if n <= 0:
        c = series.shape[1:]
        return Windows(np.zeros((0, t_in) + c), np.zeros((0, horizon) + c), np.zeros(0, dtype=int))
    idx = np.arange(n)
    x = np.stack([series[i:i + t_in] for i in idx])
    y = np.stack([series[i + t_in:i + t_in + horizon] for i in idx])
    return Windows(x, y, idx + offset)


def make_windows(series: np.ndarray, t_in: int, horizon: int, ratios=(6, 2, 2)) -> DatasetSplit:
    """Split chronologically by ratio, normalise with training bounds, then window each part."""
    raw = np.asarray(series, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if len(raw) < t_in + horizon:
        raise DataError(f"series of length {len(raw)} is shorter than T+M = {t_in + horizon}")
    lens = split_lengths(len(raw), ratios)
    cuts = np.cumsum([0] + lens)
    segments = tuple((int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:]))
    tr0, tr1 = segments[0]
    _, bounds = normalize(raw[tr0:tr1])
    norm = bounds.normalize(raw)
    parts = [windows(norm[a:b], t_in, horizon, a) for a, b in segments]
    if len(parts[0]) == 0:
        raise DataError("training segment too short for a single window")
    rest = norm[segments[1][0]:]
    oor = bool(rest.size and (rest.min() < 0 or rest.max() > 1))
    return DatasetSplit(parts[0], parts[1], parts[2], bounds, segments, raw, oor)


# ---------------------------------------------------------------- synthetic data

def spatial_lag_ring(n_nodes: int = 8, steps: int = 600, period: int = 24, lag: int = 2,
                     coupling: float = 0.5, noise: float = 0.05, seed: int = 0) -> np.ndarray:
    """x_i(t) = sin(2 pi t / period) + coupling * x_{i-1}(t - lag) + N(0, noise^2), shape (steps, N)."""
    rng = np.random.default_rng(seed)
    x = np.zeros((steps, n_nodes))
    for t in range(steps):
        base = math.sin(2 * math.pi * t / period)
        prev = x[t - lag] if t >= lag else np.zeros(n_nodes)
        x[t] = base + coupling * np.roll(prev, 1) + rng.normal(0.0, noise, n_nodes)
    return x


# ---------------------------------------------------------------- ingestion

_SLOT = re.compile(r"^\s*(\d+)\s*(min|h|s)\s*$")


@dataclass
class DatasetManifest:
    channels: list[str]
    timeslot: str = "5min"
    node_ids: list[str] | None = None
    input_length: int = 12
    output_length: int = 12
    split: tuple[float, float, float] = (6, 2, 2)
    period: int | None = None
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read manifest ({exc})") from exc
        known = {"channels", "timeslot", "node_ids", "input_length", "output_length", "split", "period"}
        extra = set(doc) - known
        if extra:
            raise DataError(f"{path}: unknown manifest keys {sorted(extra)}")
        if "channels" not in doc:
            raise DataError(f"{path}: manifest needs a 'channels' list")
        m = cls(**doc, base_dir=path.parent)
        m.split = tuple(m.split)
        m.validate()
        return m

    def slot_minutes(self) -> float:
        m = _SLOT.match(self.timeslot)
        if not m:
            raise DataError(f"unrecognised timeslot {self.timeslot!r}")
        value, unit = int(m.group(1)), m.group(2)
        return value * {"min": 1.0, "h": 60.0, "s": 1 / 60}[unit]

    def validate(self, n_nodes: int | None = None) -> None:
        if not self.channels:
            raise DataError("manifest lists no channel files")
        if self.input_length < 1 or self.output_length < 1:
            raise DataError("input/output lengths must be positive")
        if self.slot_minutes() <= 0:
            raise DataError("timeslot must be positive")
        split_lengths(100, self.split)
        if self.node_ids is not None:
            if len(set(self.node_ids)) != len(self.node_ids):
                raise DataError("duplicated node ids in manifest")
            if n_nodes is not None and len(self.node_ids) != n_nodes:
                raise DataError(f"manifest lists {len(self.node_ids)} nodes, data has {n_nodes}")
        if self.period is not None and self.period < 1:
            raise DataError("period must be positive")

    def default_period(self) -> int:
        """Slots per day unless the manifest says otherwise."""
        return self.period or max(1, int(round(24 * 60 / self.slot_minutes())))

    def channel_paths(self) -> list[Path]:
        return [self.base_dir / c for c in self.channels]


def read_values_csv(path) -> tuple[list[str], np.ndarray]:
    """Header row of node ids, then one row of floats per time step."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    seen = set()
    for col, h in enumerate(header):
        if h in seen:
            raise DataError(f"{path}: duplicated node id {h!r} at column {col}")
        seen.add(h)
    values = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: bad value {cell!r} at (row {r}, column {c})") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite value at (row {r}, column {c})")
            values[r - 1, c] = v
    return header, values


def write_values_csv(path, node_ids: list[str], values: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(node_ids)
        for row in values:
            w.writerow([repr(float(v)) for v in row])
    tmp.replace(path)


def load_dataset(manifest: DatasetManifest) -> tuple[list[str], np.ndarray]:
    """Stack every channel file into a (time, N, C) array."""
    ids, chans = None, []
    for path in manifest.channel_paths():
        header, values = read_values_csv(path)
        if ids is None:
            ids = header
        elif header != ids:
            raise DataError(f"{path}: node ids/order differ from {manifest.channels[0]}")
        if chans and values.shape != chans[0].shape:
            raise DataError(f"{path}: shape {values.shape} differs from {chans[0].shape}")
        chans.append(values)
    if manifest.node_ids is not None and list(manifest.node_ids) != ids:
        raise DataError("manifest node_ids do not match the CSV header")
    manifest.validate(len(ids))
    return ids, np.stack(chans, axis=-1)
