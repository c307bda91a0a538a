"""Cross-domain spatial-temporal encoder over tri-domain patch tokens.

Pipeline per window: embed each domain's patches (masked positions get that
domain's learnable token, everything gets positional plus domain-type
embeddings), run a per-domain transformer layer over the patch axis, mix the
three domains per node (aggregator #1 over the concatenated 3P tokens), mix
nodes per patch with a row-stochastic graph convolution, then mix domains
again (aggregator #2, separate weights). Reconstruction heads map final
tokens back to patch values; pooling collapses patches to one vector per
node either by summed means or by a learned projection of concatenated
means.

Ablation flags shrink the model honestly: with ``use_frequency`` off only
the time branch and its parameters exist, and disabled aggregator or graph
stages have no weights at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .spectral import TriDomainSample

DOMAINS = ("time", "amp", "phase")
POOL_MODES = ("sum", "linear-concat")


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 128
    heads: int = 4
    ff_mult: int = 4
    patch_count: int = 24
    time_patch_len: int = 12
    freq_patch_len: int = 6
    use_frequency: bool = True
    use_cross_domain: bool = True
    use_cross_space: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def domains(self) -> tuple[str, ...]:
        return DOMAINS if self.use_frequency else ("time",)

    def patch_len(self, domain: str) -> int:
        return self.time_patch_len if domain == "time" else self.freq_patch_len

    def to_json(self) -> dict:
        return {
            "embed_dim": self.embed_dim, "heads": self.heads, "ff_mult": self.ff_mult,
            "patch_count": self.patch_count, "time_patch_len": self.time_patch_len,
            "freq_patch_len": self.freq_patch_len, "use_frequency": self.use_frequency,
            "use_cross_domain": self.use_cross_domain, "use_cross_space": self.use_cross_space,
            "ln_eps": self.ln_eps,
        }

    @staticmethod
    def from_json(obj: dict) -> "EncoderConfig":
        return EncoderConfig(**obj)


class EncoderModel:
    """Parameter store plus config; forward passes live in module functions."""

    def __init__(self, config: EncoderConfig, params: dict[str, nc.Tensor], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = dtype

    def parameters(self) -> list[nc.Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, nc.Tensor]:
        return dict(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError("load_arrays", p.shape, arr.shape, detail=name)
            p.data = arr.astype(self.dtype)

    def constant(self, x) -> nc.Tensor:
        return nc.constant(np.asarray(x), dtype=self.dtype)


def _init_ts_layer(params: dict, prefix: str, d: int, ff_mult: int, rng, dtype) -> None:
    def add(name, shape, scale):
        params[f"{prefix}/{name}"] = nc.tensor(
            rng.normal(0.0, scale, size=shape) if scale else np.zeros(shape),
            requires_grad=True, dtype=dtype)

    for ln in ("ln1", "ln2"):
        params[f"{prefix}/{ln}_g"] = nc.tensor(np.ones(d), requires_grad=True, dtype=dtype)
        params[f"{prefix}/{ln}_b"] = nc.tensor(np.zeros(d), requires_grad=True, dtype=dtype)
    s = 1.0 / math.sqrt(d)
    for w in ("wq", "wk", "wv", "wo"):
        add(w, (d, d), s)
        add(w.replace("w", "b"), (d,), 0.0)
    add("ff1_w", (d, ff_mult * d), s)
    add("ff1_b", (ff_mult * d,), 0.0)
    add("ff2_w", (ff_mult * d, d), 1.0 / math.sqrt(ff_mult * d))
    add("ff2_b", (d,), 0.0)


def init_encoder(config: EncoderConfig, seed: int, dtype=np.float32) -> EncoderModel:
    """Fresh parameters, all biases zero, matrices scaled by fan-in."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    params: dict[str, nc.Tensor] = {}

    def add(name, shape, scale):
        params[name] = nc.tensor(
            rng.normal(0.0, scale, size=shape) if scale else np.zeros(shape),
            requires_grad=True, dtype=dtype)

    for dom in config.domains:
        length = config.patch_len(dom)
        add(f"embed/{dom}/w", (length, d), 1.0 / math.sqrt(length))
        add(f"embed/{dom}/b", (d,), 0.0)
        add(f"mask_token/{dom}", (d,), 0.02)
    add("pos", (config.patch_count, d), 0.02)
    for dom in config.domains:
        add(f"domain_embed/{dom}", (d,), 0.02)
    for dom in config.domains:
        _init_ts_layer(params, f"ts/{dom}", d, config.ff_mult, rng, dtype)
    if config.use_cross_domain:
        _init_ts_layer(params, "cda1", d, config.ff_mult, rng, dtype)
        _init_ts_layer(params, "cda2", d, config.ff_mult, rng, dtype)
    if config.use_cross_space:
        for dom in config.domains:
            add(f"gc/{dom}/w", (d, d), 1.0 / math.sqrt(d))
    for dom in config.domains:
        add(f"head/{dom}/w", (d, config.patch_len(dom)), 1.0 / math.sqrt(d))
        add(f"head/{dom}/b", (config.patch_len(dom),), 0.0)
    n_dom = len(config.domains)
    add("pool/w", (n_dom * d, d), 1.0 / math.sqrt(n_dom * d))
    add("pool/b", (d,), 0.0)
    return EncoderModel(config, params, dtype)


def ts_layer(model: EncoderModel, prefix: str, x: nc.Tensor,
             capture: dict | None = None, capture_key: str | None = None) -> nc.Tensor:
    """Pre-norm transformer encoder layer over (B, T, d) token sequences."""
    cfg = model.config
    p = model.params
    d = cfg.embed_dim
    heads = cfg.heads
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    h = nc.layer_norm(x, eps=cfg.ln_eps) * p[f"{prefix}/ln1_g"] + p[f"{prefix}/ln1_b"]
    q = h @ p[f"{prefix}/wq"] + p[f"{prefix}/bq"]
    k = h @ p[f"{prefix}/wk"] + p[f"{prefix}/bk"]
    v = h @ p[f"{prefix}/wv"] + p[f"{prefix}/bv"]

    sizes = [dh] * heads
    q_heads = nc.split(q, sizes, axis=-1)
    k_heads = nc.split(k, sizes, axis=-1)
    v_heads = nc.split(v, sizes, axis=-1)
    outs = []
    attn_maps = []
    for qh, kh, vh in zip(q_heads, k_heads, v_heads):
        scores = (qh @ nc.transpose(kh, (0, 2, 1))) * scale
        attn = nc.softmax(scores, axis=-1)
        if capture is not None:
            attn_maps.append(attn.data.copy())
        outs.append(attn @ vh)
    if capture is not None and capture_key is not None:
        capture[capture_key] = np.stack(attn_maps, axis=1)  # (B, heads, T, T)

    o = nc.concat(outs, axis=-1) @ p[f"{prefix}/wo"] + p[f"{prefix}/bo"]
    x = x + o
    h2 = nc.layer_norm(x, eps=cfg.ln_eps) * p[f"{prefix}/ln2_g"] + p[f"{prefix}/ln2_b"]
    ff = nc.relu(h2 @ p[f"{prefix}/ff1_w"] + p[f"{prefix}/ff1_b"])
    ff = ff @ p[f"{prefix}/ff2_w"] + p[f"{prefix}/ff2_b"]
    return x + ff


def _sample_arrays(cfg: EncoderConfig, sample: TriDomainSample):
    arrays = {"time": (sample.time_patches, sample.time_mask)}
    if cfg.use_frequency:
        arrays["amp"] = (sample.amp_patches, sample.amp_mask)
        arrays["phase"] = (sample.phase_patches, sample.phase_mask)
    return arrays


def embed_patches(model: EncoderModel, sample: TriDomainSample) -> dict[str, nc.Tensor]:
    """Per-domain (N, P, d) tokens with mask substitution before any mixing."""
    cfg = model.config
    if sample.patch_count != cfg.patch_count:
        raise ShapeError("embed_patches", (cfg.patch_count,), (sample.patch_count,),
                         detail="patch count mismatch")
    tokens: dict[str, nc.Tensor] = {}
    for dom, (patches, mask) in _sample_arrays(cfg, sample).items():
        if patches.shape[-1] != cfg.patch_len(dom):
            raise ShapeError("embed_patches", (cfg.patch_len(dom),), (patches.shape[-1],),
                             detail=f"{dom} patch length")
        x = model.constant(patches)
        t = x @ model.params[f"embed/{dom}/w"] + model.params[f"embed/{dom}/b"]
        m = model.constant(mask.astype(np.float64)[:, :, None])
        t = t * (1.0 - m) + model.params[f"mask_token/{dom}"] * m
        t = t + model.params["pos"] + model.params[f"domain_embed/{dom}"]
        tokens[dom] = t
    return tokens


def _cross_domain(model: EncoderModel, prefix: str, tokens: dict[str, nc.Tensor],
                  capture: dict | None = None) -> dict[str, nc.Tensor]:
    doms = model.config.domains
    joined = nc.concat([tokens[d] for d in doms], axis=1)
    mixed = ts_layer(model, prefix, joined, capture=capture,
                     capture_key=f"{prefix}_attention" if capture is not None else None)
    pieces = nc.split(mixed, [model.config.patch_count] * len(doms), axis=1)
    return dict(zip(doms, pieces))


def _cross_space(model: EncoderModel, tokens: dict[str, nc.Tensor],
                 graph: np.ndarray) -> dict[str, nc.Tensor]:
    n = next(iter(tokens.values())).shape[0]
    if graph.shape != (n, n):
        raise ShapeError("cross_space", (n, n), tuple(graph.shape), detail="graph matrix")
    a = model.constant(graph[None, :, :])  # (1, N, N), broadcasts over patches
    out = {}
    for dom, t in tokens.items():
        hw = t @ model.params[f"gc/{dom}/w"]
        mixed = a @ nc.transpose(hw, (1, 0, 2))        # (P, N, d)
        out[dom] = nc.relu(nc.transpose(mixed, (1, 0, 2)))
    return out


def encode(model: EncoderModel, sample: TriDomainSample, graph: np.ndarray | None = None,
           capture: dict | None = None) -> dict[str, nc.Tensor]:
    """Full encoder stack; returns per-domain (N, P, d) embeddings.

    ``graph`` is the row-normalized (N, N) mixing matrix, required whenever
    the cross-space stage is enabled. Pass a dict as ``capture`` to receive
    aggregator attention maps as numpy arrays.
    """
    cfg = model.config
    tokens = embed_patches(model, sample)
    tokens = {dom: ts_layer(model, f"ts/{dom}", t) for dom, t in tokens.items()}
    if cfg.use_cross_domain:
        tokens = _cross_domain(model, "cda1", tokens)
    if cfg.use_cross_space:
        if graph is None:
            raise ConfigError("encode: cross-space stage needs a graph matrix")
        tokens = _cross_space(model, tokens, graph)
    if cfg.use_cross_domain:
        tokens = _cross_domain(model, "cda2", tokens, capture=capture)
    return tokens


def reconstruct(model: EncoderModel, encoded: dict[str, nc.Tensor]) -> dict[str, nc.Tensor]:
    """Map per-domain embeddings back to patch values, (N, P, L_dom)."""
    out = {}
    for dom in model.config.domains:
        out[dom] = encoded[dom] @ model.params[f"head/{dom}/w"] + model.params[f"head/{dom}/b"]
    return out


def pool_node_embedding(model: EncoderModel, encoded: dict[str, nc.Tensor],
                        mode: str) -> nc.Tensor:
    """Collapse patches to one (N, d) vector per node.

    "sum" adds the per-domain patch means; "linear-concat" projects their
    concatenation through a learned layer.
    """
    if mode not in POOL_MODES:
        raise ConfigError(f"unknown pooling mode {mode!r}, expected one of {POOL_MODES}")
    means = [nc.mean(encoded[dom], axis=1) for dom in model.config.domains]
    if mode == "sum":
        total = means[0]
        for m in means[1:]:
            total = total + m
        return total
    joined = nc.concat(means, axis=-1) if len(means) > 1 else means[0]
    return joined @ model.params["pool/w"] + model.params["pool/b"]
