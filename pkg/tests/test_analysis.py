import numpy as np
import pytest

from cdplan.analysis import (References, consistency_matrix, histogram_svg, line_svg, load_or_measure_references,
                             read_records, reward_histogram, score, state_return_scatter, welch_one_sided,
                             write_consistency_csv, write_histogram_csv, write_records, write_scatter_csv)
from cdplan.envs import BehaviorPolicy, EpisodeRecord, generate_dataset


def record(rewards, states=None, plans=None, seed=0):
    T = len(rewards)
    states = np.zeros((T + 1, 2)) if states is None else np.asarray(states, float)
    return EpisodeRecord(seed, states, np.zeros((T, 2)), np.asarray(rewards, float), bool(T and rewards[-1] > 0),
                         plans)


def test_normalize_anchors():
    refs = References(0.2, 0.8)
    assert refs.normalize(0.2) == 0.0
    assert refs.normalize(0.8) == 100.0
    assert refs.normalize(0.5) == pytest.approx(50.0, abs=1e-12)


def test_score_report():
    refs = References(0.0, 1.0, gamma=1.0)
    rep = score([record([0, 1]), record([0, 0])], refs)
    assert rep.mean == 0.5 and rep.normalized == 50.0
    np.testing.assert_array_equal(rep.normalized_per_seed, [100.0, 0.0])


def test_reference_cache(env, tmp_path):
    p = tmp_path / "refs.json"
    a = load_or_measure_references(env, p)
    assert p.exists()
    b = load_or_measure_references(env, p)
    assert a == b
    assert a.random_ref == 0.0 and a.expert_ref > 0.5


def test_policy_anchors_on_fresh_seeds(env):
    refs = load_or_measure_references(env)
    seeds = range(500, 560)
    for kind, lo, hi in (("random", -5, 5), ("expert", 95, 105)):
        rep = score(BehaviorPolicy(kind, env).rollouts(env, seeds), refs)
        assert lo <= rep.normalized <= hi


def test_welch_direction(rng):
    a, b = rng.normal(1, 1, 40), rng.normal(0, 1, 40)
    t, p = welch_one_sided(a, b)
    assert t > 0 and p < 0.01
    _, p_rev = welch_one_sided(b, a)
    assert p_rev > 0.99
    assert welch_one_sided(np.zeros(5), np.zeros(5)) == (0.0, 0.5)


def test_reward_histogram_counts():
    counts, edges = reward_histogram([record([0, 0, 1]), record([0.25, 0.5])], bins=4)
    np.testing.assert_array_equal(counts, [2, 1, 1, 1])
    assert edges[0] == 0 and edges[-1] == 1


def test_histogram_sampling_within_3_sigma(rng):
    n, p = 20_000, np.full(10, 0.1)
    recs = [record(rng.random(100)) for _ in range(n // 100)]
    counts, _ = reward_histogram(recs)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_consistency_hand_example():
    # planned states equal realised ones -> 1; orthogonal -> 0
    states = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    plans = np.zeros((2, 2, 4))
    plans[0, 1, :2] = [0.0, 2.0]    # planned s1 parallel to realised s1
    plans[1, 1, :2] = [1.0, -1.0]   # planned s2 orthogonal to realised s2
    cm = consistency_matrix([record([0, 0], states, plans)], 1)
    assert cm.values.shape == (1, 1)
    assert cm.column_mean(1) == pytest.approx(0.5, abs=1e-15)


def test_consistency_short_episode_flagged():
    plans = np.ones((1, 4, 4))
    cm = consistency_matrix([record([1], np.ones((2, 2)), plans)], 3)
    assert cm.truncated[0]
    assert np.isfinite(cm.values[0, 0]) and np.all(np.isnan(cm.values[0, 1:]))


def test_consistency_requires_plans():
    with pytest.raises(ValueError):
        consistency_matrix([record([0])], 1)
    with pytest.raises(ValueError):
        consistency_matrix([record([0], plans=np.ones((1, 2, 4)))], 2)


def test_scatter_expert_near_goal(env):
    exp = state_return_scatter(generate_dataset("expert", 10, 0, env))
    rnd = state_return_scatter(generate_dataset("random", 10, 0, env))
    assert exp.shape[1] == 3
    goal = np.asarray(env.goal)
    assert np.linalg.norm(exp[:, :2] - goal, axis=1).mean() < np.linalg.norm(rnd[:, :2] - goal, axis=1).mean()
    assert state_return_scatter([]).shape == (0, 3)


def test_csv_writers(tmp_path):
    write_scatter_csv(tmp_path / "s.csv", np.zeros((0, 3)))
    assert (tmp_path / "s.csv").read_text().strip() == "x,y,value"
    write_scatter_csv(tmp_path / "s.csv", np.ones((4, 3)))
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 5
    counts, edges = reward_histogram([record([0, 1])], bins=2)
    write_histogram_csv(tmp_path / "h.csv", counts, edges)
    assert (tmp_path / "h.csv").read_text().splitlines()[1:] == ["0.0,0.5,1", "0.5,1.0,1"]
    plans = np.ones((1, 3, 4))
    write_consistency_csv(tmp_path / "c.csv", consistency_matrix([record([1], np.ones((2, 2)), plans)], 2))
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "episode,lookahead_1,lookahead_2,truncated"


def test_svg_render():
    assert histogram_svg([1, 2], [0, 0.5, 1]).startswith("<svg")
    assert "polyline" in line_svg([0, 1, 2], [1.0, 0.5, 0.2])


def test_records_roundtrip(tmp_path):
    recs = [record([0, 1], np.arange(6.0).reshape(3, 2), np.ones((2, 2, 4)), seed=9)]
    write_records(tmp_path / "r.jsonl", recs, {"fingerprint": "abc"})
    back, header = read_records(tmp_path / "r.jsonl")
    assert header["fingerprint"] == "abc"
    assert np.array_equal(back[0].states, recs[0].states) and np.array_equal(back[0].plans, recs[0].plans)
