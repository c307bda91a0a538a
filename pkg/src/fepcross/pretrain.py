"""Source-city pre-training: masked tri-domain reconstruction plus an
instance-level contrastive term.

Each optimizer step draws a batch of history windows, masks a high fraction
of patches independently per domain, and trains the encoder to fill the
masked patches back in. A second pair of masked views, one with its
amplitude patches swapped between nodes, feeds the contrastive loss so node
embeddings stay discriminative rather than collapsing onto shared daily
structure.

Losses backpropagate one window at a time (scaled by 1/batch) so peak
memory stays flat in the batch size; gradients accumulate on the parameters
and a single Adam update closes the step.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import TrafficCity, full_split, normalize_adjacency, sample_windows
from .encoder import (EncoderConfig, EncoderModel, encode, init_encoder,
                      pool_node_embedding, reconstruct)
from .errors import ConfigError, ShapeError
from .spectral import TriDomainSample, amplitude_swap, apply_mask, window_to_sample

logger = logging.getLogger(__name__)

CONTRASTIVE_POOLING = "linear-concat"


@dataclass(frozen=True)
class PretrainConfig:
    history_steps: int = 288
    patch_count: int = 24
    mask_ratio: float = 0.75
    alpha: float = 1.0              # contrastive loss weight; 0 disables it
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 2
    steps_per_epoch: int = 8
    epochs: int = 20
    negative_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.history_steps <= 0 or self.history_steps % (2 * self.patch_count) != 0:
            raise ConfigError(
                f"history_steps {self.history_steps} must be a positive multiple "
                f"of 2*patch_count={2 * self.patch_count}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")

    @property
    def amp_scale(self) -> float:
        # keeps amplitude patches on the same order as z-scored time patches
        return 2.0 / self.history_steps

    def to_json(self) -> dict:
        return {
            "history_steps": self.history_steps, "patch_count": self.patch_count,
            "mask_ratio": self.mask_ratio, "alpha": self.alpha, "lr": self.lr,
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "steps_per_epoch": self.steps_per_epoch, "epochs": self.epochs,
            "negative_fraction": self.negative_fraction, "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "PretrainConfig":
        return PretrainConfig(**obj)


def reconstruction_loss(recon: dict[str, nc.Tensor], sample: TriDomainSample,
                        domains, dtype=np.float32) -> nc.Tensor:
    """Masked squared error, averaged per masked element within each domain,
    then summed over domains so no domain's scale drowns the others."""
    targets = {"time": (sample.time_patches, sample.time_mask),
               "amp": (sample.amp_patches, sample.amp_mask),
               "phase": (sample.phase_patches, sample.phase_mask)}
    total = None
    for dom in domains:
        patches, mask = targets[dom]
        count = int(mask.sum()) * patches.shape[-1]
        if count == 0:
            continue
        m = nc.constant(mask[:, :, None].astype(np.float64), dtype=dtype)
        diff = (recon[dom] - nc.constant(patches, dtype=dtype)) * m
        term = nc.sum_(diff * diff) * (1.0 / count)
        total = term if total is None else total + term
    if total is None:
        logger.warning("reconstruction loss saw no masked patches in any domain")
        return nc.constant(0.0, dtype=dtype)
    return total


def sample_negatives(rng: np.random.Generator, n_nodes: int,
                     fraction: float = 0.10) -> np.ndarray:
    """Per-node negative indices, (N, K) with K = max(1, round(fraction*N)),
    drawn without replacement and never equal to the row's own node."""
    if n_nodes < 2:
        raise ConfigError("contrastive negatives need at least 2 nodes")
    k = min(max(1, round(fraction * n_nodes)), n_nodes - 1)
    out = np.empty((n_nodes, k), dtype=np.int64)
    for i in range(n_nodes):
        draw = rng.choice(n_nodes - 1, size=k, replace=False)
        out[i] = draw + (draw >= i)
    return out


def _normalize_rows(z: nc.Tensor) -> nc.Tensor:
    sq = nc.sum_(z * z, axis=-1, keepdims=True) + 1e-12
    return z * (sq ** -0.5)


def contrastive_loss(z1: nc.Tensor, z2: nc.Tensor, negatives: np.ndarray) -> nc.Tensor:
    """Mean over nodes of log(e^pos + sum_k e^neg_k) - pos on cosine
    similarities; gradients flow through both views."""
    n, k = negatives.shape
    if z1.shape != z2.shape or z1.shape[0] != n:
        raise ShapeError("contrastive_loss", z1.shape, z2.shape, (n, k))
    a = _normalize_rows(z1)
    b = _normalize_rows(z2)
    pos = nc.sum_(a * b, axis=-1)                                  # (N,)
    neg_rows = nc.reshape(nc.take_rows(b, negatives.reshape(-1)), (n, k, -1))
    neg_sim = nc.sum_(nc.reshape(a, (n, 1, -1)) * neg_rows, axis=-1)  # (N, K)
    lse = nc.log(nc.exp(pos) + nc.sum_(nc.exp(neg_sim), axis=1))
    return nc.mean(lse - pos)


def _check_compat(model: EncoderModel, cfg: PretrainConfig) -> None:
    ec = model.config
    if ec.patch_count != cfg.patch_count:
        raise ConfigError(f"encoder patch_count {ec.patch_count} != config {cfg.patch_count}")
    if cfg.history_steps != ec.patch_count * ec.time_patch_len:
        raise ConfigError(
            f"history_steps {cfg.history_steps} incompatible with encoder patches "
            f"{ec.patch_count}x{ec.time_patch_len}")


def pretrain_step(model: EncoderModel, state: nc.AdamState, histories: np.ndarray,
                  graph: np.ndarray, cfg: PretrainConfig,
                  rng: np.random.Generator) -> dict[str, float]:
    """One optimizer step over a (B, N, T_h) batch of z-scored histories."""
    params = model.parameters()
    batch = histories.shape[0]
    tot = re_tot = con_tot = 0.0
    for window in histories:
        sample = window_to_sample(window, cfg.patch_count, amp_scale=cfg.amp_scale)
        masked = apply_mask(sample, cfg.mask_ratio, rng_seed=int(rng.integers(2 ** 31)))
        recon = reconstruct(model, encode(model, masked, graph=graph))
        l_re = reconstruction_loss(recon, masked, model.config.domains, dtype=model.dtype)
        loss = l_re
        if cfg.alpha > 0:
            v1 = apply_mask(sample, cfg.mask_ratio, rng_seed=int(rng.integers(2 ** 31)))
            v2 = apply_mask(sample, cfg.mask_ratio, rng_seed=int(rng.integers(2 ** 31)))
            v2 = amplitude_swap(v2, rng_seed=int(rng.integers(2 ** 31)))
            z1 = pool_node_embedding(model, encode(model, v1, graph=graph), CONTRASTIVE_POOLING)
            z2 = pool_node_embedding(model, encode(model, v2, graph=graph), CONTRASTIVE_POOLING)
            negatives = sample_negatives(rng, sample.n_nodes, cfg.negative_fraction)
            l_con = contrastive_loss(z1, z2, negatives)
            loss = l_re + cfg.alpha * l_con
            con_tot += float(l_con.data)
        scaled = loss * (1.0 / batch)
        if scaled.requires_grad:
            scaled.backward()
        tot += float(loss.data)
        re_tot += float(l_re.data)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    nc.adam_step(params, grads, state)
    model.zero_grad()
    return {"loss_total": tot / batch, "loss_re": re_tot / batch, "loss_con": con_tot / batch}


def pretrain_run(model: EncoderModel, city: TrafficCity, cfg: PretrainConfig,
                 out_dir) -> list[dict]:
    """Full pre-training loop; writes an NDJSON epoch log and the encoder
    checkpoint under ``out_dir``. Returns the per-epoch history."""
    _check_compat(model, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = normalize_adjacency(city.adjacency)
    split = full_split(city)
    stats = (split.mean, split.std)
    state = nc.adam_init(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    keys = ("loss_total", "loss_re", "loss_con")
    with (out / "pretrain_log.ndjson").open("w") as log:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            sums = dict.fromkeys(keys, 0.0)
            for _ in range(cfg.steps_per_epoch):
                batch = sample_windows(city, cfg.history_steps, 0, (0, city.n_steps),
                                       cfg.batch_size, seed=int(rng.integers(2 ** 31)),
                                       stats=stats)
                step_stats = pretrain_step(model, state, batch.history, graph, cfg, rng)
                for k in keys:
                    sums[k] += step_stats[k]
            row = {"epoch": epoch}
            row.update({k: sums[k] / cfg.steps_per_epoch for k in keys})
            row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            log.write(json.dumps(row, sort_keys=True) + "\n")
            log.flush()
            history.append(row)
            logger.info("pretrain epoch %d/%d: total %.5f re %.5f con %.5f",
                        epoch, cfg.epochs, row["loss_total"], row["loss_re"], row["loss_con"])
    save_pretrained(model, out)
    return history


def save_pretrained(model: EncoderModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nc.save_checkpoint(out / "encoder", {f"encoder/{k}": v for k, v in model.params.items()})
    (out / "encoder_config.json").write_text(
        json.dumps(model.config.to_json(), indent=2, sort_keys=True) + "\n")


def load_pretrained(out_dir, dtype=np.float32) -> EncoderModel:
    out = Path(out_dir)
    cfg_path = out / "encoder_config.json"
    if not cfg_path.is_file():
        raise ConfigError(f"no encoder_config.json under {out}")
    config = EncoderConfig.from_json(json.loads(cfg_path.read_text()))
    model = init_encoder(config, seed=0, dtype=dtype)
    arrays = nc.load_checkpoint(out / "encoder")
    model.load_arrays({k.removeprefix("encoder/"): v for k, v in arrays.items()})
    return model
