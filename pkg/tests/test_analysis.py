"""Similarity study and attention export."""

import csv
import json

import numpy as np
import pytest

from fepcross.analysis import attention_summary, export_attention, similarity_analysis
from fepcross.data import CitySpec, TrafficCity, generate_synthetic_city
from fepcross.encoder import EncoderConfig, init_encoder
from fepcross.errors import ConfigError, DataError

TINY_ENC = EncoderConfig(embed_dim=8, heads=2, ff_mult=2, patch_count=4,
                         time_patch_len=6, freq_patch_len=3)


def make_city(n, days=7, seed=0, name="c", **overrides):
    spec = CitySpec(name=name, n_nodes=n, days=days, interval_minutes=5, **overrides)
    return generate_synthetic_city(spec, seed=seed)


def test_city_against_itself_is_exactly_one():
    city = make_city(4, seed=3)
    res = similarity_analysis(city, city, days=7)
    assert res["aligned"] is True
    assert res["n_pairs"] == 4
    assert res["time_cosine_mean"] == 1.0
    assert res["freq_cosine_mean"] == 1.0
    assert res["gap"] == 0.0


def test_unaligned_cities_use_pair_grid_with_cap():
    a = make_city(3, seed=1, name="a")
    b = make_city(2, seed=2, name="b")
    res = similarity_analysis(a, b, days=7)
    assert res["aligned"] is False and res["n_pairs"] == 6

    capped = similarity_analysis(a, b, days=7, seed=5, max_pairs=4)
    again = similarity_analysis(a, b, days=7, seed=5, max_pairs=4)
    assert capped["n_pairs"] == 4
    assert capped == again


def test_shared_spectra_give_positive_gap():
    a = make_city(6, seed=11, name="a", city_phase_jitter=0.3, noise_std=0.5,
                  congestion_rate=0.05)
    b = make_city(5, seed=12, name="b", city_phase_jitter=0.3, noise_std=0.5,
                  congestion_rate=0.05)
    res = similarity_analysis(a, b, days=7)
    assert res["freq_cosine_mean"] > res["time_cosine_mean"]
    assert res["gap"] > 0.05


def test_similarity_input_validation():
    a = make_city(2, days=7, seed=1)
    short = make_city(2, days=1, seed=1)
    other_interval = generate_synthetic_city(
        CitySpec(name="x", n_nodes=2, days=7, interval_minutes=10), seed=1)
    with pytest.raises(ConfigError):
        similarity_analysis(a, short)
    with pytest.raises(ConfigError):
        similarity_analysis(a, other_interval)


def test_similarity_rejects_zero_series():
    city = make_city(2, days=7, seed=1)
    dead = TrafficCity(name="dead", interval_minutes=5,
                       nodes=[f"n{i}" for i in range(2)],
                       adjacency=np.zeros((2, 2)),
                       readings=np.zeros_like(city.readings))
    with pytest.raises(DataError):
        similarity_analysis(city, dead, days=7)


def test_attention_summary_shape_and_mass():
    model = init_encoder(TINY_ENC, seed=2)
    rng = np.random.default_rng(0)
    history = rng.normal(size=(3, 24)).astype(np.float32)
    graph = np.full((3, 3), 1.0 / 3.0)
    mean_map, meta = attention_summary(model, history, graph, amp_scale=2.0 / 24)
    span = 3 * TINY_ENC.patch_count
    assert mean_map.shape == (span, span)
    assert np.allclose(mean_map.sum(axis=1), 1.0, atol=1e-6)
    assert meta["blocks"] == [
        {"domain": "time", "start": 0, "end": 4},
        {"domain": "amp", "start": 4, "end": 8},
        {"domain": "phase", "start": 8, "end": 12},
    ]
    assert 0.0 <= meta["time_to_amp_mass"] <= 1.0
    assert meta["time_to_amp_mass"] <= meta["time_to_freq_mass"]


def test_attention_summary_requires_cross_domain_and_frequency():
    rng = np.random.default_rng(0)
    history = rng.normal(size=(2, 24)).astype(np.float32)
    graph = np.full((2, 2), 0.5)
    no_cda = init_encoder(EncoderConfig(**{**TINY_ENC.to_json(),
                                           "use_cross_domain": False}), seed=0)
    with pytest.raises(ConfigError):
        attention_summary(no_cda, history, graph, amp_scale=1.0)
    no_freq = init_encoder(EncoderConfig(**{**TINY_ENC.to_json(),
                                            "use_frequency": False}), seed=0)
    with pytest.raises(ConfigError):
        attention_summary(no_freq, history, graph, amp_scale=1.0)


def test_export_attention_round_trips_through_csv(tmp_path):
    model = init_encoder(TINY_ENC, seed=2)
    rng = np.random.default_rng(0)
    history = rng.normal(size=(2, 24)).astype(np.float32)
    graph = np.full((2, 2), 0.5)
    csv_path = tmp_path / "attn.csv"
    meta_path = tmp_path / "attn.json"
    meta = export_attention(model, history, graph, 2.0 / 24, csv_path, meta_path)

    expected, _ = attention_summary(model, history, graph, 2.0 / 24)
    with csv_path.open() as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh)]
    assert np.array_equal(np.array(rows), expected)

    on_disk = json.loads(meta_path.read_text())
    assert on_disk == meta
