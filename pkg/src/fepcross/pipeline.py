"""End-to-end experiments: generate cities, pre-train, adapt, evaluate.

One experiment config drives the whole chain so results are reproducible
from a single root seed: city generation, encoder initialization,
pre-training, and adaptation all derive their seeds from it, and the final
report contains no timestamps or wall-clock values, so two runs of the same
config produce byte-identical reports.

The ablation ladder swaps named feature groups off while keeping the rest
of the chain untouched, which is what makes the comparisons honest: every
variant sees the same cities, the same windows, and the same evaluation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (CitySpec, FewShotSplit, TrafficCity, city_spec_from_json,
                   few_shot_split, generate_synthetic_city, save_city,
                   window_starts, windows_at)
from .encoder import EncoderConfig, init_encoder
from .errors import ConfigError
from .finetune import FinetuneConfig, FinetunedModel, finetune_run, predict_batch
from .metrics import MetricReport, evaluate_predictions
from .pretrain import PretrainConfig, pretrain_run

logger = logging.getLogger(__name__)

# feature groups that can be switched off; "pretrain_base" strips the encoder
# down to a plain masked time-series transformer while keeping the momentum
# graph and enrichment active on the adaptation side
ABLATIONS: dict[str, dict] = {
    "full": {},
    "no_frequency": {"encoder": {"use_frequency": False}},
    "no_cross_domain": {"encoder": {"use_cross_domain": False}},
    "no_cross_space": {"encoder": {"use_cross_space": False}},
    "no_contrastive": {"pretrain": {"alpha": 0.0}},
    "no_momentum": {"finetune": {"tau": 0.0}},
    "no_enrich": {"finetune": {"enrich_copies": 0}},
    "no_pretrain": {"skip_pretrain": True},
    "pretrain_base": {
        "encoder": {"use_frequency": False, "use_cross_domain": False,
                    "use_cross_space": False},
        "pretrain": {"alpha": 0.0},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    source_city: CitySpec
    target_city: CitySpec
    encoder: EncoderConfig
    pretrain: PretrainConfig
    finetune: FinetuneConfig
    eval_horizons: tuple[int, ...] = (1, 3, 6)
    eval_stride: int = 6
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; "
                              f"choose from {sorted(ABLATIONS)}")
        if self.eval_stride <= 0:
            raise ConfigError("eval_stride must be positive")

    def to_json(self) -> dict:
        return {
            "source_city": self.source_city.to_json(),
            "target_city": self.target_city.to_json(),
            "encoder": self.encoder.to_json(),
            "pretrain": self.pretrain.to_json(),
            "finetune": self.finetune.to_json(),
            "eval_horizons": list(self.eval_horizons),
            "eval_stride": self.eval_stride,
            "ablation": self.ablation,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "ExperimentConfig":
        try:
            return ExperimentConfig(
                source_city=city_spec_from_json(obj["source_city"]),
                target_city=city_spec_from_json(obj["target_city"]),
                encoder=EncoderConfig.from_json(obj.get("encoder", {})),
                pretrain=PretrainConfig.from_json(obj.get("pretrain", {})),
                finetune=FinetuneConfig.from_json(obj.get("finetune", {})),
                eval_horizons=tuple(obj.get("eval_horizons", (1, 3, 6))),
                eval_stride=int(obj.get("eval_stride", 6)),
                ablation=obj.get("ablation", "full"),
                seed=int(obj.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
        return ExperimentConfig.from_json(obj)


def _derive_seed(root: int, stream: int) -> int:
    # distinct, stable sub-seeds per pipeline stage
    return int(np.random.SeedSequence([root, stream]).generate_state(1)[0])


def apply_ablation(cfg: ExperimentConfig) -> tuple[EncoderConfig, PretrainConfig,
                                                   FinetuneConfig, bool]:
    spec = ABLATIONS[cfg.ablation]
    enc = dataclasses.replace(cfg.encoder, **spec.get("encoder", {}))
    pre = dataclasses.replace(cfg.pretrain, **spec.get("pretrain", {}))
    fin = dataclasses.replace(cfg.finetune, **spec.get("finetune", {}))
    return enc, pre, fin, bool(spec.get("skip_pretrain", False))


def historical_average(city: TrafficCity, split: FewShotSplit, history_steps: int,
                       future_steps: int, starts: np.ndarray) -> np.ndarray:
    """Time-of-day mean profile from the adaptation range, read out at each
    window's future positions; (B, N, T_f) in raw units."""
    spd = (24 * 60) // city.interval_minutes
    lo, hi = split.finetune_range
    if hi - lo < spd:
        raise ConfigError("historical average needs at least one full day of adaptation data")
    series = city.readings[:, lo:hi, 0].astype(np.float64)
    tod = (np.arange(lo, hi)) % spd
    profile = np.zeros((city.n_nodes, spd))
    for t in range(spd):
        profile[:, t] = series[:, tod == t].mean(axis=1)
    preds = np.empty((len(starts), city.n_nodes, future_steps))
    for b, s in enumerate(starts):
        cols = (s + history_steps + np.arange(future_steps)) % spd
        preds[b] = profile[:, cols]
    return preds


def evaluate_on_test(bundle: FinetunedModel, city: TrafficCity, split: FewShotSplit,
                     horizons=(1, 3, 6), stride: int = 6,
                     with_baseline: bool = True) -> dict[str, MetricReport]:
    """Model (and optionally historical-average) errors over the held-out range."""
    cfg = bundle.config
    starts = window_starts(city, cfg.history_steps, cfg.future_steps,
                           split.test_range, stride=stride)
    batch = windows_at(city, starts, cfg.history_steps, cfg.future_steps,
                       (bundle.mean, bundle.std))
    preds = predict_batch(bundle, batch.history)
    target = batch.future_raw.astype(np.float64)
    reports = {"model": evaluate_predictions("model", preds, target, horizons)}
    if with_baseline:
        ha = historical_average(city, split, cfg.history_steps, cfg.future_steps, starts)
        reports["baseline_ha"] = evaluate_predictions("baseline_ha", ha, target, horizons)
    logger.info("evaluation over %d windows: model mae %.4f%s", len(starts),
                reports["model"].mae,
                f", baseline mae {reports['baseline_ha'].mae:.4f}" if with_baseline else "")
    return reports


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Full chain; writes cities, checkpoints, logs, and report.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc_cfg, pre_cfg, fin_cfg, skip_pretrain = apply_ablation(cfg)
    pre_cfg = dataclasses.replace(pre_cfg, seed=_derive_seed(cfg.seed, 3))
    fin_cfg = dataclasses.replace(fin_cfg, seed=_derive_seed(cfg.seed, 4))

    timings = {}
    t0 = time.perf_counter()
    source = generate_synthetic_city(cfg.source_city, seed=_derive_seed(cfg.seed, 1))
    target = generate_synthetic_city(cfg.target_city, seed=_derive_seed(cfg.seed, 2))
    save_city(source, out / "cities" / "source")
    save_city(target, out / "cities" / "target")
    timings["generate_s"] = round(time.perf_counter() - t0, 3)

    encoder = init_encoder(enc_cfg, seed=_derive_seed(cfg.seed, 5))
    t0 = time.perf_counter()
    if skip_pretrain:
        logger.info("ablation %s skips pre-training", cfg.ablation)
    else:
        pretrain_run(encoder, source, pre_cfg, out / "pretrain")
    timings["pretrain_s"] = round(time.perf_counter() - t0, 3)

    t0 = time.perf_counter()
    bundle = finetune_run(encoder, target, fin_cfg, out / "finetune")
    timings["finetune_s"] = round(time.perf_counter() - t0, 3)

    t0 = time.perf_counter()
    split = few_shot_split(target, days=fin_cfg.adapt_days)
    reports = evaluate_on_test(bundle, target, split, horizons=cfg.eval_horizons,
                               stride=cfg.eval_stride)
    timings["evaluate_s"] = round(time.perf_counter() - t0, 3)

    report = {
        "ablation": cfg.ablation,
        "baseline_ha": json.loads(reports["baseline_ha"].to_json()),
        "config": cfg.to_json(),
        "model": json.loads(reports["model"].to_json()),
        "seed": cfg.seed,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "run_info.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return {"report": report, "reports": reports, "bundle": bundle,
            "out_dir": str(out)}
