"""Traffic city data: on-disk format, synthetic benchmark, splits, windows.

A city directory holds three files:

* ``meta.json``     - name, interval_minutes, n_nodes, n_steps, n_channels,
                      node labels.
* ``adjacency.csv`` - directed ``src,dst,weight`` triples, 0-indexed.
* ``readings.f32``  - little-endian float32, row-major (T, N, C).

In memory readings are kept node-major, (N, T, C). The synthetic generator
produces families of cities that share harmonic amplitude structure but
differ in phase, noise, and congestion, which is exactly the regime the
frequency-domain encoder is meant to exploit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
AR1_COEFF = 0.9              # autocorrelation of the noise process
CONGESTION_MEAN_STEPS = 8    # geometric mean duration of a dip
CONGESTION_DEPTH = (5.0, 15.0)
SPEED_FLOOR = 1.0
EDGE_SIGMA = 0.2             # Gaussian kernel width for geometric edges
EDGE_CUTOFF = 0.1            # kernel values below this are dropped


@dataclass(frozen=True)
class Harmonic:
    period_minutes: float
    amplitude: float
    phase: float = 0.0


DAILY_HARMONICS = (
    Harmonic(period_minutes=1440.0, amplitude=16.0, phase=0.0),
    Harmonic(period_minutes=720.0, amplitude=8.0, phase=1.0),
    Harmonic(period_minutes=10080.0, amplitude=5.0, phase=2.0),
)


@dataclass(frozen=True)
class CitySpec:
    """Generator parameters for one synthetic city."""

    name: str
    n_nodes: int
    days: int
    interval_minutes: int = 5
    shared_harmonics: tuple[Harmonic, ...] = DAILY_HARMONICS
    city_phase_jitter: float = 0.3
    noise_std: float = 0.5
    congestion_rate: float = 0.03
    base_speed_mean: float = 20.0
    base_speed_std: float = 3.0

    def __post_init__(self):
        if self.n_nodes < 1 or self.days < 1:
            raise ConfigError("city spec needs n_nodes >= 1 and days >= 1")
        if MINUTES_PER_DAY % self.interval_minutes != 0:
            raise ConfigError(f"interval {self.interval_minutes} must divide {MINUTES_PER_DAY}")

    @property
    def steps_per_day(self) -> int:
        return MINUTES_PER_DAY // self.interval_minutes

    @property
    def n_steps(self) -> int:
        return self.days * self.steps_per_day

    def to_json(self) -> dict:
        return {
            "name": self.name, "n_nodes": self.n_nodes, "days": self.days,
            "interval_minutes": self.interval_minutes,
            "shared_harmonics": [
                {"period_minutes": h.period_minutes, "amplitude": h.amplitude,
                 "phase": h.phase} for h in self.shared_harmonics],
            "city_phase_jitter": self.city_phase_jitter,
            "noise_std": self.noise_std,
            "congestion_rate": self.congestion_rate,
            "base_speed_mean": self.base_speed_mean,
            "base_speed_std": self.base_speed_std,
        }


def harmonics_from_json(items: Sequence[dict]) -> tuple[Harmonic, ...]:
    return tuple(Harmonic(float(h["period_minutes"]), float(h["amplitude"]),
                          float(h.get("phase", 0.0))) for h in items)


def city_spec_from_json(obj: dict) -> CitySpec:
    kwargs = dict(obj)
    if "shared_harmonics" in kwargs:
        kwargs["shared_harmonics"] = harmonics_from_json(kwargs["shared_harmonics"])
    try:
        return CitySpec(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad city spec: {e}") from None


@dataclass
class TrafficCity:
    name: str
    interval_minutes: int
    nodes: list[str]
    adjacency: np.ndarray      # (N, N), nonnegative weights, zero diagonal
    readings: np.ndarray       # (N, T, C) float32

    def __post_init__(self):
        n = len(self.nodes)
        if self.adjacency.shape != (n, n):
            raise DataError(f"{self.name}: adjacency {self.adjacency.shape} for {n} nodes")
        if self.readings.ndim != 3 or self.readings.shape[0] != n:
            raise DataError(f"{self.name}: readings {self.readings.shape} for {n} nodes")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_steps(self) -> int:
        return self.readings.shape[1]

    @property
    def n_channels(self) -> int:
        return self.readings.shape[2]

    def stats(self, step_range: tuple[int, int] | None = None) -> tuple[float, float]:
        """Scalar mean and std over an inclusive-exclusive step range."""
        a, b = step_range if step_range is not None else (0, self.n_steps)
        chunk = self.readings[:, a:b, :].astype(np.float64)
        return float(chunk.mean()), float(chunk.std())


def save_city(city: TrafficCity, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": city.name,
        "interval_minutes": city.interval_minutes,
        "n_nodes": city.n_nodes,
        "n_steps": city.n_steps,
        "n_channels": city.n_channels,
        "nodes": city.nodes,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    lines = []
    src_idx, dst_idx = np.nonzero(city.adjacency)
    for i, j in zip(src_idx, dst_idx):
        lines.append(f"{i},{j},{city.adjacency[i, j]:.10g}")
    (out / "adjacency.csv").write_text("\n".join(lines) + ("\n" if lines else ""))
    # disk layout is time-major
    blob = np.ascontiguousarray(city.readings.transpose(1, 0, 2), dtype="<f4")
    (out / "readings.f32").write_bytes(blob.tobytes())


def load_city(directory) -> TrafficCity:
    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"no meta.json under {root}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt meta.json: {e}") from None
    for key in ("name", "interval_minutes", "n_nodes", "n_steps", "n_channels", "nodes"):
        if key not in meta:
            raise DataError(f"meta.json missing {key!r}")
    n, t, c = int(meta["n_nodes"]), int(meta["n_steps"]), int(meta["n_channels"])
    if len(meta["nodes"]) != n:
        raise DataError(f"{len(meta['nodes'])} node labels for n_nodes={n}")

    adjacency = np.zeros((n, n), dtype=np.float64)
    adj_path = root / "adjacency.csv"
    if not adj_path.is_file():
        raise DataError(f"no adjacency.csv under {root}")
    for lineno, line in enumerate(adj_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"adjacency.csv:{lineno}: expected src,dst,weight")
        try:
            i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise DataError(f"adjacency.csv:{lineno}: bad triple {line!r}") from None
        if not (0 <= i < n and 0 <= j < n):
            raise DataError(f"adjacency.csv:{lineno}: node index out of range")
        if not np.isfinite(w) or w < 0:
            raise DataError(f"adjacency.csv:{lineno}: bad weight {w}")
        adjacency[i, j] = w

    blob = (root / "readings.f32")
    if not blob.is_file():
        raise DataError(f"no readings.f32 under {root}")
    raw = blob.read_bytes()
    expected = t * n * c * 4
    if len(raw) != expected:
        raise DataError(f"readings.f32 holds {len(raw)} bytes, expected {expected}")
    readings = np.frombuffer(raw, dtype="<f4").reshape(t, n, c).transpose(1, 0, 2).copy()
    if not np.isfinite(readings).all():
        raise DataError("readings.f32 contains non-finite values")

    city = TrafficCity(
        name=str(meta["name"]),
        interval_minutes=int(meta["interval_minutes"]),
        nodes=[str(x) for x in meta["nodes"]],
        adjacency=adjacency,
        readings=readings,
    )
    mean, std = city.stats()
    log.info("loaded city %s: N=%d T=%d C=%d mean=%.4f std=%.4f",
             city.name, n, t, c, mean, std)
    return city


def generate_synthetic_city(spec: CitySpec, seed: int) -> TrafficCity:
    """Deterministic synthetic city: geometric graph + shared harmonics.

    Per-node speed = base + shared harmonics (per-node phase jitter) + AR(1)
    noise + random congestion dips, floored at SPEED_FLOOR. Everything is a
    pure function of (spec, seed).
    """
    rng = np.random.default_rng(seed)
    n, steps = spec.n_nodes, spec.n_steps

    positions = rng.uniform(0.0, 1.0, size=(n, 2))
    diff = positions[:, None, :] - positions[None, :, :]
    dist2 = (diff * diff).sum(axis=2)
    adjacency = np.exp(-dist2 / (2.0 * EDGE_SIGMA ** 2))
    np.fill_diagonal(adjacency, 0.0)
    adjacency[adjacency < EDGE_CUTOFF] = 0.0

    base = rng.normal(spec.base_speed_mean, spec.base_speed_std, size=n)
    minutes = np.arange(steps, dtype=np.float64) * spec.interval_minutes
    speed = np.tile(base[:, None], (1, steps))
    for h in spec.shared_harmonics:
        jitter = spec.city_phase_jitter * rng.uniform(-np.pi, np.pi, size=n)
        angle = 2.0 * np.pi * minutes[None, :] / h.period_minutes + h.phase + jitter[:, None]
        speed += h.amplitude * np.cos(angle)

    if spec.noise_std > 0:
        innovation_std = spec.noise_std * np.sqrt(1.0 - AR1_COEFF ** 2)
        noise = np.empty((n, steps))
        noise[:, 0] = rng.normal(0.0, spec.noise_std, size=n)
        shocks = rng.normal(0.0, innovation_std, size=(n, steps))
        for t in range(1, steps):
            noise[:, t] = AR1_COEFF * noise[:, t - 1] + shocks[:, t]
        speed += noise

    if spec.congestion_rate > 0:
        starts = rng.random((n, steps)) < spec.congestion_rate
        for i, t in np.argwhere(starts):
            depth = rng.uniform(*CONGESTION_DEPTH)
            duration = int(rng.geometric(1.0 / CONGESTION_MEAN_STEPS))
            speed[i, t:t + duration] -= depth

    speed = np.maximum(speed, SPEED_FLOOR)
    return TrafficCity(
        name=spec.name,
        interval_minutes=spec.interval_minutes,
        nodes=[f"n{i:03d}" for i in range(n)],
        adjacency=adjacency,
        readings=speed[:, :, None].astype(np.float32),
    )


def normalize_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalized adjacency with self-loops: D^-1 (A + I).

    Every row sums to 1; an isolated node keeps only its self-loop.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"adjacency must be square, got {a.shape}")
    if not np.isfinite(a).all() or (a < 0).any():
        raise DataError("adjacency weights must be finite and nonnegative")
    a = a + np.eye(a.shape[0])
    return a / a.sum(axis=1, keepdims=True)


@dataclass
class FewShotSplit:
    """Target-city split: a short adaptation range and the held-out rest.

    ``mean``/``std`` are computed from the adaptation range only and are the
    normalization constants for every downstream consumer.
    """

    city: TrafficCity
    finetune_range: tuple[int, int]
    test_range: tuple[int, int]
    mean: float
    std: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        scale = self.std if self.std > 0 else 1.0
        return (x - self.mean) / scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        scale = self.std if self.std > 0 else 1.0
        return x * scale + self.mean


def few_shot_split(city: TrafficCity, days: int = 2) -> FewShotSplit:
    if days < 1:
        raise ConfigError("adaptation range must cover at least one day")
    steps_per_day = MINUTES_PER_DAY // city.interval_minutes
    cut = days * steps_per_day
    if cut >= city.n_steps:
        raise ConfigError(
            f"{city.name} has {city.n_steps} steps, too few for a {days}-day adaptation range")
    mean, std = city.stats((0, cut))
    return FewShotSplit(city=city, finetune_range=(0, cut), test_range=(cut, city.n_steps),
                        mean=mean, std=std)


def full_split(city: TrafficCity) -> FewShotSplit:
    """Whole-city 'split' for source-city pre-training (stats over all steps)."""
    mean, std = city.stats()
    return FewShotSplit(city=city, finetune_range=(0, city.n_steps),
                        test_range=(city.n_steps, city.n_steps), mean=mean, std=std)


@dataclass
class WindowBatch:
    """Sampled windows, single-channel: histories z-scored, futures both ways."""

    history: np.ndarray       # (B, N, T_h) float32, z-scored
    future_norm: np.ndarray   # (B, N, T_f) float32, z-scored
    future_raw: np.ndarray    # (B, N, T_f) float32, original units
    starts: np.ndarray        # (B,) int

    @property
    def batch_size(self) -> int:
        return self.history.shape[0]


def window_starts(city: TrafficCity, history_steps: int, future_steps: int,
                  step_range: tuple[int, int], stride: int = 1) -> np.ndarray:
    """All window start indices that fit inside the step range."""
    lo, hi = step_range
    last = hi - history_steps - future_steps
    if last < lo:
        raise ConfigError(
            f"range {step_range} too short for {history_steps}+{future_steps}-step windows")
    return np.arange(lo, last + 1, stride)


def windows_at(city: TrafficCity, starts: Sequence[int], history_steps: int,
               future_steps: int, stats: tuple[float, float]) -> WindowBatch:
    """Materialize windows at explicit starts, z-scored with the given stats."""
    if city.n_channels != 1:
        raise ConfigError("model pipeline expects single-channel readings")
    mean, std = stats
    scale = std if std > 0 else 1.0
    series = city.readings[:, :, 0]
    hist, fut_n, fut_r = [], [], []
    for s in starts:
        h = series[:, s:s + history_steps]
        f = series[:, s + history_steps:s + history_steps + future_steps]
        hist.append((h - mean) / scale)
        fut_n.append((f - mean) / scale)
        fut_r.append(f)
    b = len(hist)
    return WindowBatch(
        history=np.asarray(hist, dtype=np.float32).reshape(b, city.n_nodes, history_steps),
        future_norm=np.asarray(fut_n, dtype=np.float32).reshape(b, city.n_nodes, future_steps),
        future_raw=np.asarray(fut_r, dtype=np.float32).reshape(b, city.n_nodes, future_steps),
        starts=np.asarray(list(starts), dtype=np.int64),
    )


def sample_windows(city: TrafficCity, history_steps: int, future_steps: int,
                   step_range: tuple[int, int], batch_size: int, seed: int,
                   stats: tuple[float, float] | None = None) -> WindowBatch:
    """Uniformly sample window starts inside the range (with replacement).

    ``stats`` defaults to the step range's own mean/std; pass the adaptation
    split's stats when sampling outside it.
    """
    starts = window_starts(city, history_steps, future_steps, step_range)
    rng = np.random.default_rng(seed)
    chosen = starts[rng.integers(0, len(starts), size=batch_size)]
    if stats is None:
        stats = city.stats(step_range)
    return windows_at(city, chosen, history_steps, future_steps, stats)
