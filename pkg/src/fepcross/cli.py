"""Command-line interface over the library pipeline.

Every subcommand is a thin wrapper: parse arguments, load inputs, call one
library function, write its artifacts. Anything scriptable here is equally
available through the package API.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .analysis import export_attention, similarity_analysis
from .data import (city_spec_from_json, few_shot_split, full_split,
                   generate_synthetic_city, load_city, normalize_adjacency,
                   save_city, windows_at)
from .encoder import EncoderConfig, init_encoder
from .errors import ConfigError, FepcrossError
from .finetune import FinetuneConfig, finetune_run, load_finetuned
from .pipeline import ExperimentConfig, evaluate_on_test, run_experiment
from .pretrain import PretrainConfig, load_pretrained, pretrain_run

logger = logging.getLogger(__name__)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read JSON config {path}: {exc}") from exc


def _parse_horizons(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(h) for h in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad horizons {text!r}, expected e.g. '1,3,6'") from exc


def cmd_gen_city(args) -> int:
    spec = city_spec_from_json(_read_json(args.spec))
    city = generate_synthetic_city(spec, seed=args.seed)
    save_city(city, args.out)
    print(f"{city.name}: {city.n_nodes} nodes x {city.readings.shape[1]} steps "
          f"-> {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    city = load_city(args.city)
    enc_cfg = (EncoderConfig.from_json(_read_json(args.encoder_config))
               if args.encoder_config else EncoderConfig())
    cfg = (PretrainConfig.from_json(_read_json(args.config))
           if args.config else PretrainConfig())
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    model = init_encoder(enc_cfg, seed=args.encoder_seed)
    history = pretrain_run(model, city, cfg, args.out)
    last = history[-1] if history else {}
    print(f"pre-trained {cfg.epochs} epochs on {city.name}; "
          f"final loss {last.get('loss_total', float('nan')):.5f} -> {args.out}")
    return 0


def cmd_finetune(args) -> int:
    city = load_city(args.city)
    encoder = load_pretrained(args.pretrained)
    cfg = (FinetuneConfig.from_json(_read_json(args.config))
           if args.config else FinetuneConfig())
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    bundle = finetune_run(encoder, city, cfg, args.out)
    last = bundle.history[-1] if bundle.history else {}
    print(f"adapted to {city.name} for {cfg.epochs} epochs; "
          f"final loss {last.get('loss', float('nan')):.5f} -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    result = run_experiment(cfg, args.out)
    model = result["report"]["model"]
    base = result["report"]["baseline_ha"]
    print(f"ablation={cfg.ablation} seed={cfg.seed}: "
          f"model mae {model['mae']:.4f} mape {model['mape']:.2f}% | "
          f"baseline mae {base['mae']:.4f} -> {args.out}/report.json")
    return 0


def cmd_eval(args) -> int:
    city = load_city(args.city)
    bundle = load_finetuned(args.model)
    split = few_shot_split(city, days=bundle.config.adapt_days)
    reports = evaluate_on_test(bundle, city, split,
                               horizons=_parse_horizons(args.horizons),
                               stride=args.stride)
    payload = {name: json.loads(rep.to_json()) for name, rep in reports.items()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"model mae {reports['model'].mae:.4f} | "
          f"baseline mae {reports['baseline_ha'].mae:.4f} -> {out}")
    return 0


def cmd_similarity(args) -> int:
    a = load_city(args.city_a)
    b = load_city(args.city_b)
    res = similarity_analysis(a, b, days=args.days, seed=args.seed,
                              max_pairs=args.max_pairs)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    print(f"time cosine {res['time_cosine_mean']:.4f} | "
          f"freq cosine {res['freq_cosine_mean']:.4f} | gap {res['gap']:.4f}")
    return 0


def cmd_attention(args) -> int:
    city = load_city(args.city)
    try:
        bundle = load_finetuned(args.model)
        encoder = bundle.encoder
        graph = bundle.graph
        stats = (bundle.mean, bundle.std)
        history_steps = bundle.config.history_steps
        amp_scale = bundle.config.amp_scale
    except ConfigError:
        encoder = load_pretrained(args.model)
        graph = normalize_adjacency(city.adjacency)
        split = full_split(city)
        stats = (split.mean, split.std)
        history_steps = encoder.config.patch_count * encoder.config.time_patch_len
        amp_scale = 2.0 / history_steps
    window = windows_at(city, [args.window_start], history_steps, 0, stats).history[0]
    meta = export_attention(encoder, window, graph, amp_scale,
                            args.out_csv, args.out_meta)
    print(f"attention map {3 * meta['patch_count']}x{3 * meta['patch_count']}; "
          f"time->freq mass {meta['time_to_freq_mass']:.4f} -> {args.out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fepcross",
        description="Cross-city few-shot traffic forecasting with a "
                    "frequency-enhanced masked encoder.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-city", help="generate a synthetic city from a spec JSON")
    p.add_argument("--spec", required=True, help="city spec JSON file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output city directory")
    p.set_defaults(fn=cmd_gen_city)

    p = sub.add_parser("pretrain", help="pre-train an encoder on a source city")
    p.add_argument("--city", required=True, help="source city directory")
    p.add_argument("--config", help="pretrain config JSON (defaults apply)")
    p.add_argument("--encoder-config", help="encoder config JSON (defaults apply)")
    p.add_argument("--encoder-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pre-trained encoder to a target city")
    p.add_argument("--city", required=True, help="target city directory")
    p.add_argument("--pretrained", required=True, help="pretrain output directory")
    p.add_argument("--config", help="finetune config JSON (defaults apply)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("run", help="full experiment from one config file")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model on a city")
    p.add_argument("--model", required=True, help="finetune output directory")
    p.add_argument("--city", required=True)
    p.add_argument("--horizons", default="1,3,6")
    p.add_argument("--stride", type=int, default=6)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("similarity", help="cross-city time vs frequency similarity")
    p.add_argument("--city-a", required=True)
    p.add_argument("--city-b", required=True)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-pairs", type=int, default=10_000)
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(fn=cmd_similarity)

    p = sub.add_parser("attention", help="export aggregator attention as CSV")
    p.add_argument("--model", required=True,
                   help="finetune output directory (or pretrain directory)")
    p.add_argument("--city", required=True)
    p.add_argument("--window-start", type=int, default=0)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-meta", required=True)
    p.set_defaults(fn=cmd_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FepcrossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
