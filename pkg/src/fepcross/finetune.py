"""Few-shot adaptation on a target city around a frozen pre-trained encoder.

Three pieces working together:

* a momentum graph that starts at the row-normalized road adjacency and
  drifts toward a similarity graph read off the frozen encoder's node
  embeddings (one blended update per epoch, kept in float64),
* data enrichment that masks a small fraction of time patches, splices the
  encoder's reconstructions into the gaps, and adds the spliced series to
  the epoch's training pool with the original future as target,
* a small gated dilated temporal-convolution network with diffusion graph
  mixing whose output, concatenated with the pooled frozen embedding, feeds
  a zero-initialized linear forecast head.

Only the convolution network and the head train; the encoder contributes
features through forward passes that build no autodiff graph at all.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import (TrafficCity, few_shot_split, normalize_adjacency,
                   sample_windows, window_starts, windows_at)
from .encoder import EncoderModel, encode, pool_node_embedding, reconstruct
from .errors import ConfigError, ShapeError
from .pretrain import load_pretrained, save_pretrained
from .spectral import apply_mask, sample_to_series, window_to_sample

logger = logging.getLogger(__name__)

FORECAST_POOLING = "sum"


@dataclass(frozen=True)
class FinetuneConfig:
    history_steps: int = 288
    future_steps: int = 12
    patch_count: int = 24
    adapt_days: int = 2
    lr: float = 1e-3
    weight_decay: float = 0.01
    tau: float = 0.1                # momentum blend toward the meta graph
    enrich_ratio: float = 0.25
    enrich_copies: int = 1
    epochs: int = 30
    windows_per_epoch: int = 8
    batch_size: int = 4
    probe_windows: int = 4
    st_dim: int = 32
    dilations: tuple[int, ...] = (1, 2, 4, 8)   # receptive field 16 steps
    diffusion_order: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.history_steps % (2 * self.patch_count) != 0:
            raise ConfigError(
                f"history_steps {self.history_steps} must be a multiple of "
                f"2*patch_count={2 * self.patch_count}")
        if self.future_steps <= 0:
            raise ConfigError("future_steps must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1]")
        if not 0.0 <= self.enrich_ratio <= 1.0:
            raise ConfigError(f"enrich_ratio {self.enrich_ratio} outside [0, 1]")
        if self.enrich_copies < 0:
            raise ConfigError("enrich_copies must be >= 0")

    @property
    def amp_scale(self) -> float:
        return 2.0 / self.history_steps

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "history_steps", "future_steps", "patch_count", "adapt_days", "lr",
            "weight_decay", "tau", "enrich_ratio", "enrich_copies", "epochs",
            "windows_per_epoch", "batch_size", "probe_windows", "st_dim",
            "diffusion_order", "seed")}
        out["dilations"] = list(self.dilations)
        return out

    @staticmethod
    def from_json(obj: dict) -> "FinetuneConfig":
        obj = dict(obj)
        if "dilations" in obj:
            obj["dilations"] = tuple(obj["dilations"])
        return FinetuneConfig(**obj)


# -- momentum graph ----------------------------------------------------------

def _row_softmax64(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted, dtype=np.float64)
    return e / e.sum(axis=1, keepdims=True)


def build_meta_graph(encoder: EncoderModel, probe_histories: np.ndarray,
                     graph: np.ndarray, patch_count: int, amp_scale: float) -> np.ndarray:
    """Row-softmax of the gram matrix of mean pooled node embeddings over a
    probe batch of unmasked windows; float64, rows sum to one."""
    pooled = []
    for window in probe_histories:
        sample = window_to_sample(window, patch_count, amp_scale=amp_scale)
        enc = encode(encoder, sample, graph=graph)
        pooled.append(pool_node_embedding(encoder, enc, FORECAST_POOLING).data)
    h = np.mean(np.asarray(pooled, dtype=np.float64), axis=0)   # (N, d)
    return _row_softmax64(h @ h.T)


def momentum_update(prev: np.ndarray, meta: np.ndarray, tau: float) -> np.ndarray:
    """Blend one step toward the meta graph; both inputs row-stochastic."""
    if prev.shape != meta.shape:
        raise ShapeError("momentum_update", prev.shape, meta.shape)
    out = tau * meta.astype(np.float64) + (1.0 - tau) * prev.astype(np.float64)
    sums = out.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ConfigError(f"momentum update left non-stochastic rows (sums {sums})")
    return out


# -- data enrichment ---------------------------------------------------------

def enrich_training_data(encoder: EncoderModel, histories: np.ndarray,
                         graph: np.ndarray, cfg: FinetuneConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Replace a masked fraction of each window's time patches with the
    frozen encoder's reconstructions; returns spliced (B, N, T_h) series.

    Frequency patches are left alone here: downstream consumers recompute
    amplitude and phase from the spliced series, keeping all three domains
    consistent with each other.
    """
    out = np.empty_like(histories)
    for i, window in enumerate(histories):
        sample = window_to_sample(window, cfg.patch_count, amp_scale=cfg.amp_scale)
        masked = apply_mask(sample, cfg.enrich_ratio, rng_seed=int(rng.integers(2 ** 31)))
        recon = reconstruct(encoder, encode(encoder, masked, graph=graph))
        spliced = masked.copy()
        spliced.time_patches = np.where(masked.time_mask[:, :, None],
                                        recon["time"].data.astype(histories.dtype),
                                        sample.time_patches)
        out[i] = sample_to_series(spliced)
    return out


# -- spatial-temporal network -------------------------------------------------

class STModel:
    """Gated dilated causal convolutions with diffusion graph mixing."""

    def __init__(self, cfg: FinetuneConfig, params: dict[str, nc.Tensor], dtype=np.float32):
        self.cfg = cfg
        self.params = params
        self.dtype = dtype

    def parameters(self) -> list[nc.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_st_model(cfg: FinetuneConfig, encoder_dim: int, seed: int,
                  dtype=np.float32) -> STModel:
    rng = np.random.default_rng(seed)
    d = cfg.st_dim
    params: dict[str, nc.Tensor] = {}

    def add(name, shape, scale):
        params[name] = nc.tensor(
            rng.normal(0.0, scale, size=shape) if scale else np.zeros(shape),
            requires_grad=True, dtype=dtype)

    add("st/in_w", (1, d), 1.0)
    add("st/in_b", (d,), 0.0)
    s = 1.0 / math.sqrt(d)
    for i in range(len(cfg.dilations)):
        for gate in ("f", "g"):
            add(f"st/b{i}/{gate}_prev", (d, d), s)
            add(f"st/b{i}/{gate}_cur", (d, d), s)
            add(f"st/b{i}/{gate}_b", (d,), 0.0)
        for k in range(cfg.diffusion_order + 1):
            add(f"st/b{i}/gc{k}", (d, d), s)
        add(f"st/b{i}/gc_b", (d,), 0.0)
    add("st/out_w", (d, d), s)
    add("st/out_b", (d,), 0.0)
    add("head/w", (encoder_dim + d, cfg.future_steps), 0.0)
    add("head/b", (cfg.future_steps,), 0.0)
    return STModel(cfg, params, dtype)


def _shift_right(x: nc.Tensor, steps: int) -> nc.Tensor:
    """Causal shift along the time axis: output[t] = x[t - steps], zeros in front."""
    n, t, d = x.shape
    pad = nc.constant(np.zeros((n, steps, d)), dtype=x.dtype)
    padded = nc.concat([pad, x], axis=1)
    return nc.split(padded, [t, steps], axis=1)[0]


def _mix_nodes(mat: nc.Tensor, x: nc.Tensor) -> nc.Tensor:
    # (1, N, N) @ (T, N, d) batches over time
    return nc.transpose(mat @ nc.transpose(x, (1, 0, 2)), (1, 0, 2))


def st_forward(st: STModel, history: np.ndarray, graph: np.ndarray) -> nc.Tensor:
    """Summarize a z-scored (N, T_h) history into one (N, st_dim) vector."""
    cfg = st.cfg
    p = st.params
    n, t = history.shape
    if graph.shape != (n, n):
        raise ShapeError("st_forward", (n, n), tuple(graph.shape), detail="graph matrix")

    mat = nc.constant(graph[None, :, :], dtype=st.dtype)

    x = nc.constant(history[:, :, None], dtype=st.dtype) @ p["st/in_w"] + p["st/in_b"]
    skip = None
    for i, dilation in enumerate(cfg.dilations):
        prev = _shift_right(x, dilation)
        filt = nc.tanh(prev @ p[f"st/b{i}/f_prev"] + x @ p[f"st/b{i}/f_cur"]
                       + p[f"st/b{i}/f_b"])
        gate = nc.sigmoid(prev @ p[f"st/b{i}/g_prev"] + x @ p[f"st/b{i}/g_cur"]
                          + p[f"st/b{i}/g_b"])
        g = filt * gate
        z = g @ p[f"st/b{i}/gc0"]
        spread = g
        for k in range(1, cfg.diffusion_order + 1):
            spread = _mix_nodes(mat, spread)  # k-th hop: graph^k applied to g
            z = z + spread @ p[f"st/b{i}/gc{k}"]
        z = z + p[f"st/b{i}/gc_b"]
        skip = z if skip is None else skip + z
        x = x + z
    summary = nc.relu(skip)
    last = nc.split(summary, [t - 1, 1], axis=1)[1]
    last = nc.reshape(last, (n, cfg.st_dim))
    return last @ p["st/out_w"] + p["st/out_b"]


# -- forecasting bundle --------------------------------------------------------

@dataclass
class FinetunedModel:
    encoder: EncoderModel
    st: STModel
    graph: np.ndarray             # momentum graph, float64 row-stochastic
    mean: float
    std: float
    config: FinetuneConfig
    history: list = field(default_factory=list)

    @property
    def scale(self) -> float:
        return self.std if self.std > 0 else 1.0


def forecast_window(bundle: FinetunedModel, history: np.ndarray) -> nc.Tensor:
    """Normalized (N, T_f) prediction for one z-scored (N, T_h) history."""
    cfg = bundle.config
    sample = window_to_sample(history, cfg.patch_count, amp_scale=cfg.amp_scale)
    enc = encode(bundle.encoder, sample, graph=bundle.graph)
    pooled = pool_node_embedding(bundle.encoder, enc, FORECAST_POOLING)
    st_out = st_forward(bundle.st, history, bundle.graph)
    joined = nc.concat([pooled, st_out], axis=-1)
    return joined @ bundle.st.params["head/w"] + bundle.st.params["head/b"]


def predict_batch(bundle: FinetunedModel, histories: np.ndarray) -> np.ndarray:
    """Raw-unit (B, N, T_f) predictions for z-scored histories."""
    preds = [forecast_window(bundle, h).data for h in histories]
    return np.asarray(preds) * bundle.scale + bundle.mean


# -- training loop -------------------------------------------------------------

def _check_compat(encoder: EncoderModel, cfg: FinetuneConfig) -> None:
    ec = encoder.config
    if ec.patch_count != cfg.patch_count:
        raise ConfigError(f"encoder patch_count {ec.patch_count} != config {cfg.patch_count}")
    if cfg.history_steps != ec.patch_count * ec.time_patch_len:
        raise ConfigError(
            f"history_steps {cfg.history_steps} incompatible with encoder patches "
            f"{ec.patch_count}x{ec.time_patch_len}")


def finetune_run(encoder: EncoderModel, city: TrafficCity, cfg: FinetuneConfig,
                 out_dir) -> FinetunedModel:
    """Adapt to a target city using only its first ``adapt_days`` of data."""
    _check_compat(encoder, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    encoder.freeze()

    split = few_shot_split(city, days=cfg.adapt_days)
    stats = (split.mean, split.std)
    graph = normalize_adjacency(city.adjacency).astype(np.float64)
    st = init_st_model(cfg, encoder.config.embed_dim, seed=cfg.seed)
    state = nc.adam_init(st.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    starts = window_starts(city, cfg.history_steps, cfg.future_steps, split.finetune_range)
    probe_rng = np.random.default_rng(cfg.seed + 104729)
    probe_starts = starts[probe_rng.integers(0, len(starts), size=cfg.probe_windows)]
    probe = windows_at(city, probe_starts, cfg.history_steps, cfg.future_steps, stats)

    bundle = FinetunedModel(encoder=encoder, st=st, graph=graph,
                            mean=split.mean, std=split.std, config=cfg)
    params = st.parameters()
    with (out / "finetune_log.ndjson").open("w") as log:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            meta = build_meta_graph(encoder, probe.history, bundle.graph,
                                    cfg.patch_count, cfg.amp_scale)
            bundle.graph = momentum_update(bundle.graph, meta, cfg.tau)

            batch = sample_windows(city, cfg.history_steps, cfg.future_steps,
                                   split.finetune_range, cfg.windows_per_epoch,
                                   seed=int(rng.integers(2 ** 31)), stats=stats)
            pool_hist = [batch.history]
            pool_fut = [batch.future_norm]
            for _ in range(cfg.enrich_copies):
                pool_hist.append(enrich_training_data(encoder, batch.history,
                                                      bundle.graph, cfg, rng))
                pool_fut.append(batch.future_norm)
            hists = np.concatenate(pool_hist, axis=0)
            futs = np.concatenate(pool_fut, axis=0)
            order = rng.permutation(len(hists))

            epoch_loss = 0.0
            n_chunks = 0
            for lo in range(0, len(order), cfg.batch_size):
                chunk = order[lo:lo + cfg.batch_size]
                for idx in chunk:
                    pred = forecast_window(bundle, hists[idx])
                    loss = nc.mse(pred, nc.constant(futs[idx], dtype=st.dtype))
                    (loss * (1.0 / len(chunk))).backward()
                    epoch_loss += float(loss.data) / len(chunk)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                         for p in params]
                nc.adam_step(params, grads, state)
                st.zero_grad()
                n_chunks += 1

            row = {"epoch": epoch, "loss": epoch_loss / max(1, n_chunks),
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
            log.write(json.dumps(row, sort_keys=True) + "\n")
            log.flush()
            bundle.history.append(row)
            logger.info("finetune epoch %d/%d: loss %.5f", epoch, cfg.epochs, row["loss"])

    save_finetuned(bundle, out)
    return bundle


def save_finetuned(bundle: FinetunedModel, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_pretrained(bundle.encoder, out)
    nc.save_checkpoint(out / "model", bundle.st.params)
    np.save(out / "graph.npy", bundle.graph)
    meta = {"mean": bundle.mean, "std": bundle.std, "config": bundle.config.to_json()}
    (out / "finetune_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_finetuned(out_dir) -> FinetunedModel:
    out = Path(out_dir)
    meta_path = out / "finetune_meta.json"
    if not meta_path.is_file():
        raise ConfigError(f"no finetune_meta.json under {out}")
    meta = json.loads(meta_path.read_text())
    cfg = FinetuneConfig.from_json(meta["config"])
    encoder = load_pretrained(out)
    encoder.freeze()
    st = init_st_model(cfg, encoder.config.embed_dim, seed=cfg.seed)
    arrays = nc.load_checkpoint(out / "model")
    missing = set(st.params) - set(arrays)
    extra = set(arrays) - set(st.params)
    if missing or extra:
        raise ConfigError(f"model checkpoint mismatch: missing {sorted(missing)}, "
                          f"extra {sorted(extra)}")
    for name, p in st.params.items():
        p.data = arrays[name].astype(st.dtype)
    graph = np.load(out / "graph.npy")
    return FinetunedModel(encoder=encoder, st=st, graph=graph,
                          mean=float(meta["mean"]), std=float(meta["std"]), config=cfg)
