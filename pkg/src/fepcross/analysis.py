"""Cross-city structure analysis: domain similarity and attention export.

The similarity study quantifies the premise behind frequency-enhanced
transfer: node pairs drawn from two cities with shared periodic structure
look far more alike through their amplitude spectra than through their raw
series, because per-city phase offsets, noise, and congestion events
decorrelate the time domain while leaving spectral magnitudes nearly
untouched.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .data import MINUTES_PER_DAY, TrafficCity
from .encoder import EncoderModel, encode
from .errors import ConfigError, DataError
from .spectral import to_tri_domain, window_to_sample

logger = logging.getLogger(__name__)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < 1e-12 or nv < 1e-12:
        raise DataError("cosine similarity of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def similarity_analysis(city_a: TrafficCity, city_b: TrafficCity, days: int = 7,
                        seed: int = 0, max_pairs: int = 10_000) -> dict:
    """Compare node pairs across two cities in time and in frequency.

    Uses the first ``days`` of both cities. Same-sized cities are compared
    along aligned node indices (so a city against itself reports means of
    exactly 1); otherwise the full pair grid is used, subsampled with the
    given seed once it exceeds ``max_pairs``.
    """
    if city_a.interval_minutes != city_b.interval_minutes:
        raise ConfigError("similarity analysis needs matching sampling intervals")
    steps = days * (MINUTES_PER_DAY // city_a.interval_minutes)
    if steps % 2 != 0:
        steps -= 1
    for city in (city_a, city_b):
        if city.n_steps < steps:
            raise ConfigError(f"{city.name} has {city.n_steps} steps, "
                              f"fewer than the {steps} required")

    series_a = city_a.readings[:, :steps, 0].astype(np.float64)
    series_b = city_b.readings[:, :steps, 0].astype(np.float64)
    amp_a, _ = to_tri_domain(series_a)
    amp_b, _ = to_tri_domain(series_b)

    n_a, n_b = series_a.shape[0], series_b.shape[0]
    aligned = n_a == n_b
    if aligned:
        pairs = [(i, i) for i in range(n_a)]
    else:
        pairs = [(i, j) for i in range(n_a) for j in range(n_b)]
        if len(pairs) > max_pairs:
            rng = np.random.default_rng(seed)
            chosen = rng.choice(len(pairs), size=max_pairs, replace=False)
            pairs = [pairs[int(k)] for k in chosen]

    time_cos = np.array([_cosine(series_a[i], series_b[j]) for i, j in pairs])
    freq_cos = np.array([_cosine(amp_a[i], amp_b[j]) for i, j in pairs])
    result = {
        "aligned": aligned,
        "days": days,
        "freq_cosine_mean": float(freq_cos.mean()),
        "freq_cosine_std": float(freq_cos.std()),
        "gap": float(freq_cos.mean() - time_cos.mean()),
        "n_pairs": len(pairs),
        "time_cosine_mean": float(time_cos.mean()),
        "time_cosine_std": float(time_cos.std()),
    }
    logger.info("similarity %s vs %s: time %.4f freq %.4f gap %.4f",
                city_a.name, city_b.name, result["time_cosine_mean"],
                result["freq_cosine_mean"], result["gap"])
    return result


def attention_summary(encoder: EncoderModel, history: np.ndarray, graph: np.ndarray,
                      amp_scale: float) -> tuple[np.ndarray, dict]:
    """Second-aggregator attention averaged over heads and nodes.

    ``history`` is one z-scored (N, T_h) window. Returns the (3P, 3P) map
    over concatenated time/amp/phase patch positions plus axis metadata,
    including how much attention mass time-domain queries place on
    amplitude-domain keys.
    """
    cfg = encoder.config
    if not cfg.use_cross_domain:
        raise ConfigError("attention export needs the cross-domain aggregator enabled")
    if not cfg.use_frequency:
        raise ConfigError("attention export needs the frequency branches enabled")
    sample = window_to_sample(history, cfg.patch_count, amp_scale=amp_scale)
    capture: dict = {}
    encode(encoder, sample, graph=graph, capture=capture)
    attn = capture["cda2_attention"]          # (N, heads, 3P, 3P)
    mean_map = attn.mean(axis=(0, 1)).astype(np.float64)

    p = cfg.patch_count
    blocks = [{"domain": dom, "start": i * p, "end": (i + 1) * p}
              for i, dom in enumerate(cfg.domains)]
    time_rows = mean_map[0:p]
    meta = {
        "blocks": blocks,
        "heads_averaged": int(attn.shape[1]),
        "nodes_averaged": int(attn.shape[0]),
        "patch_count": p,
        "row_normalized": True,
        "time_to_amp_mass": float(time_rows[:, p:2 * p].sum() / time_rows.sum()),
        "time_to_freq_mass": float(time_rows[:, p:].sum() / time_rows.sum()),
    }
    return mean_map, meta


def export_attention(encoder: EncoderModel, history: np.ndarray, graph: np.ndarray,
                     amp_scale: float, csv_path, meta_path) -> dict:
    """Write the averaged attention map as CSV plus a metadata JSON."""
    mean_map, meta = attention_summary(encoder, history, graph, amp_scale)
    csv_path, meta_path = Path(csv_path), Path(meta_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mean_map:
            writer.writerow([repr(float(x)) for x in row])
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
