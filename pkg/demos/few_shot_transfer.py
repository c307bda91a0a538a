"""End-to-end few-shot transfer at demo scale, compared against the
historical-average baseline.

Drives the same path as `fepcross run`: generate a city pair, pre-train on
the source, adapt on two days of the target, then score both the model and
the time-of-day baseline on the held-out remainder.
"""

from fepcross.data import CitySpec, few_shot_split, generate_synthetic_city
from fepcross.encoder import EncoderConfig, init_encoder
from fepcross.finetune import FinetuneConfig, finetune_run
from fepcross.pipeline import evaluate_on_test, historical_average
from fepcross.pretrain import PretrainConfig, pretrain_run

OUT_PRE = "demo_out/transfer_pretrained"
OUT_FT = "demo_out/transfer_finetuned"

SOURCE = CitySpec(name="src", n_nodes=8, days=5, interval_minutes=5)
TARGET = CitySpec(name="tgt", n_nodes=6, days=4, interval_minutes=5)
ENCODER = EncoderConfig(embed_dim=16, heads=2, ff_mult=2, patch_count=6,
                        time_patch_len=8, freq_patch_len=4)
PRETRAIN = PretrainConfig(history_steps=48, patch_count=6, lr=1e-3,
                          batch_size=2, steps_per_epoch=4, epochs=8, seed=1)
FINETUNE = FinetuneConfig(history_steps=48, future_steps=6, patch_count=6,
                          adapt_days=2, epochs=10, windows_per_epoch=6,
                          batch_size=3, probe_windows=3, st_dim=12,
                          dilations=(1, 2), seed=2)


def main():
    source = generate_synthetic_city(SOURCE, seed=31)
    target = generate_synthetic_city(TARGET, seed=32)

    encoder = init_encoder(ENCODER, seed=0)
    pretrain_run(encoder, source, PRETRAIN, OUT_PRE)
    print("pre-training done")

    bundle = finetune_run(encoder, target, FINETUNE, OUT_FT)
    print(f"fine-tuning done, final loss {bundle.history[-1]['loss']:.4f}")

    split = few_shot_split(target, days=FINETUNE.adapt_days)
    reports = evaluate_on_test(bundle, target, split, horizons=(1, 3, 6),
                               stride=24)
    model, ha = reports["model"], reports["baseline_ha"]
    print(f"{'':14} {'mae':>8} {'mape %':>8}")
    print(f"{'model':14} {model.mae:>8.3f} {model.mape:>8.2f}")
    print(f"{'hist. avg.':14} {ha.mae:>8.3f} {ha.mape:>8.2f}")
    for h in ("1", "3", "6"):
        print(f"  horizon {h}: model mae {model.horizons[h]['mae']:.3f} "
              f"vs baseline {ha.horizons[h]['mae']:.3f}")


if __name__ == "__main__":
    main()
