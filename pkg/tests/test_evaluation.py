import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_logits
from sidtree.core import EmptyBucket, enumerate_all_sids
from sidtree.env import terminal_reward
from sidtree.evaluation import (
    alignment_study, hr_at_k, lcp_diversity, max_reward, ndcg_at_k, prefix_reward, ranking_metrics,
    spearman,
)
from sidtree.policy import CandidateSet, PolicyTable
from sidtree.value import OracleValue

RANKED = [(0, 0, 1), (0, 1, 0), (2, 2, 2), (3, 1, 0), (1, 1, 1)]


def test_hr_examples():
    assert hr_at_k(RANKED, (0, 0, 1), 3) == 1
    assert hr_at_k(RANKED, (3, 3, 3), 3) == 0
    assert hr_at_k(RANKED, (1, 1, 1), 3) == 0
    with pytest.raises(ValueError):
        hr_at_k(RANKED, (0, 0, 1), 6)


def test_ndcg_examples():
    assert ndcg_at_k(RANKED, (0, 0, 1), 3) == 1.0
    assert ndcg_at_k(RANKED, (2, 2, 2), 3) == 0.5
    assert ndcg_at_k(RANKED, (2, 2, 2), 5) == 0.5
    assert ndcg_at_k(RANKED, (3, 3, 3), 5) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(RANKED[:2], (0, 0, 1), 3)


def test_ndcg_non_increasing_in_rank():
    sids = enumerate_all_sids(3, 2)
    scores = [ndcg_at_k(sids, sids[r], 9) for r in range(9)]
    assert all(b <= a for a, b in zip(scores, scores[1:]))


def test_diversity_examples():
    assert lcp_diversity([(1, 2, 3), (1, 2, 3)]) == 0.0
    assert lcp_diversity([(1, 2, 3), (0, 2, 3)]) == 1.0
    assert lcp_diversity([(0, 1, 2), (0, 1, 3), (4, 5, 6)]) == pytest.approx(7 / 9, abs=0)
    with pytest.raises(ValueError):
        lcp_diversity([(0, 1, 2)])


@given(st.lists(st.tuples(*[st.integers(0, 3)] * 3), min_size=2, max_size=12), st.randoms())
def test_diversity_relabeling_invariance(sids, rnd):
    perms = [rnd.sample(range(4), 4) for _ in range(3)]
    relabeled = [tuple(perms[i][t] for i, t in enumerate(y)) for y in sids]
    assert lcp_diversity(relabeled) == lcp_diversity(sids)


def test_spearman_examples():
    assert spearman([1, 2, 3], [1, 3, 2]) == (0.5, False)
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40])[0] == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1])[0] == pytest.approx(-1.0)
    assert spearman([1, 1, 1], [1, 2, 3]) == (0.0, True)
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


@given(st.lists(st.integers(-50, 50), min_size=3, max_size=20, unique=True),
       st.lists(st.integers(-50, 50), min_size=20, max_size=20))
def test_spearman_monotone_invariance(xs, ys):
    ys = ys[: len(xs)]
    rho, flat = spearman(xs, ys)
    rho2, flat2 = spearman(np.exp(np.array(xs) / 5), np.array(ys) ** 3 + np.array(ys))
    assert flat == flat2
    assert rho == pytest.approx(rho2, abs=1e-9)


def test_spearman_against_rank_formula():
    rng = np.random.default_rng(0)
    x, y = rng.permutation(12), rng.permutation(12)
    d2 = float(np.sum((x - y) ** 2))
    assert spearman(x, y)[0] == pytest.approx(1 - 6 * d2 / (12 * (144 - 1)), abs=1e-12)


def test_prefix_reward_examples():
    pol = PolicyTable.uniform(4, 3)
    c = CandidateSet.from_sids(pol, 0, [(0, 1, 2), (0, 1, 3), (2, 0, 0)])
    c.rewards = np.array([1.0, 0.0, 0.3])
    assert prefix_reward(c, (0, 1, 3)) == 0.0
    assert prefix_reward(c, (0, 1)) == 0.5
    assert prefix_reward(c, ()) == pytest.approx(np.mean([1.0, 0.0, 0.3]))
    with pytest.raises(EmptyBucket):
        prefix_reward(c, (3,))


def test_max_reward_matches_brute_force(small_env):
    env, pol = small_env
    x = 4
    star = env.truth_sid(x)
    others = [(1, 2, 3), (7, 7, 7), (0, 0, 5)]
    c = CandidateSet.from_sids(pol, x, others)
    assert max_reward(c, env) == max(terminal_reward(env, x, y) for y in others)
    assert max_reward(CandidateSet.from_sids(pol, x, others + [star]), env) == 1.0
    assert max_reward(CandidateSet.from_sids(pol, x, [others[0]]), env) == terminal_reward(env, x, others[0])


def test_ranking_metrics_averages():
    m = ranking_metrics([RANKED, RANKED], [(0, 0, 1), (2, 2, 2)], ks=(3,))
    assert m.flat() == {"hr@3": 1.0, "ndcg@3": 0.75}


class NoiseValue:
    """Independent standard-normal value per (context, prefix)."""

    def estimate(self, x, p):
        return float(np.random.default_rng([x, len(p), *p]).normal())


def test_alignment_random_value_is_uncorrelated(desk_env):
    env, _ = desk_env
    rng = np.random.default_rng(7)
    pol = PolicyTable(random_logits(rng, 1, env.V, env.L, 1.0), env.V, env.L,
                      context_row=np.zeros(env.n_contexts, dtype=int))
    rows = alignment_study({"random": pol}, {"random": NoiseValue()}, env, env.test_contexts[:500], seed=1)
    for r in rows:
        if r["signal"] == "value":
            assert abs(r["rho"]) < 0.1
            assert r["queries"] + r["skipped"] == 500


def test_alignment_oracle_value_tracks_reward(small_env):
    env, pol = small_env
    rows = alignment_study(
        {"sft": pol, "plain": pol}, {"sft": OracleValue(env, pol, 1.5)}, env, env.test_contexts[:60], seed=0
    )
    by = {(r["variant"], r["level"], r["signal"]): r for r in rows}
    assert by[("sft", 3, "value")]["rho"] > 0.99
    assert all(by[("sft", ell, "value")]["rho"] > 0.9 for ell in (1, 2))
    assert {k[2] for k in by if k[0] == "plain"} == {"logprob"}
    with pytest.raises(ValueError):
        alignment_study({"sft": pol}, {"other": OracleValue(env, pol)}, env, [0])
