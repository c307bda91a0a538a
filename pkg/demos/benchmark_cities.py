"""Generate a source/target city pair and compare their two similarity views.

Two cities built from the same harmonic family but different seeds look
quite different sample-by-sample (phase jitter, noise, congestion) while
their amplitude spectra stay close. The gap between the two mean cosine
similarities is what motivates feeding frequency views to the encoder.
"""

import json

from fepcross.analysis import similarity_analysis
from fepcross.data import CitySpec, generate_synthetic_city, save_city

OUT_SOURCE = "demo_out/source_city"
OUT_TARGET = "demo_out/target_city"

SOURCE = CitySpec(name="source", n_nodes=32, days=14, interval_minutes=5,
                  congestion_rate=0.05)
TARGET = CitySpec(name="target", n_nodes=24, days=7, interval_minutes=5,
                  congestion_rate=0.05)


def main():
    src = generate_synthetic_city(SOURCE, seed=101)
    tgt = generate_synthetic_city(TARGET, seed=202)
    save_city(src, OUT_SOURCE)
    save_city(tgt, OUT_TARGET)

    for c in (src, tgt):
        speeds = c.readings[:, :, 0]
        print(f"{c.name}: {c.n_nodes} nodes, {speeds.shape[1]} steps, "
              f"speed range [{speeds.min():.1f}, {speeds.max():.1f}], "
              f"{int((c.adjacency > 0).sum())} directed edges")

    res = similarity_analysis(src, tgt, days=7, seed=0)
    print(json.dumps(res, indent=2, sort_keys=True))
    print(f"frequency view is {res['gap']:.3f} cosine points more aligned "
          f"than the raw series view")


if __name__ == "__main__":
    main()
