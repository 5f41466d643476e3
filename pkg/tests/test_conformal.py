import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uragc.conformal import (
    APS,
    INF,
    LAC,
    CalibrationModel,
    ScoredInstance,
    aps_score,
    calibrate,
    conformal_quantile,
    lac_score,
    load_models,
    predict_set,
    save_models,
)
from uragc.core import OptionDistribution
from uragc.errors import ArgumentError


def D(*p):
    return OptionDistribution(tuple(p))


def test_lac_examples():
    assert lac_score(D(0.6, 0.3, 0.1), 0) == pytest.approx(0.4)
    assert lac_score(D(0.0, 1.0), 1) == 0.0
    assert all(lac_score(D(0.25, 0.25, 0.25, 0.25), c) == 0.75 for c in range(4))
    with pytest.raises(ArgumentError):
        lac_score(D(0.5, 0.5), 2)


def test_aps_examples():
    p = D(0.5, 0.3, 0.2)
    assert [aps_score(p, c) for c in range(3)] == pytest.approx([0.5, 0.8, 1.0])
    assert aps_score(D(0.4, 0.4, 0.2), 0) == pytest.approx(0.8)
    assert aps_score(D(0.1, 0.7, 0.2), 1) == pytest.approx(0.7)
    with pytest.raises(ArgumentError):
        aps_score(p, -1)


def _scored(scores):
    # LAC score s for a two-option distribution with gold at 0 is 1 - p_0 = s
    return [ScoredInstance(f"i{j}", D(1 - s, s), 0) for j, s in enumerate(scores)]


def test_calibrate_n9():
    scores = [0.05 * (j + 1) for j in range(9)]
    m = calibrate(_scored(scores), LAC, 0.1)
    assert m.q_hat == pytest.approx(max(scores))


def test_calibrate_n19():
    scores = [round(0.01 * (j + 1), 10) for j in range(19)]
    random.Random(0).shuffle(scores)
    m = calibrate(_scored(scores), LAC, 0.1)
    assert m.q_hat == pytest.approx(0.18, abs=1e-12)


def test_calibrate_overflow_n4():
    m = calibrate(_scored([0.1, 0.2, 0.3, 0.4]), LAC, 0.1)
    assert m.q_hat == INF and m.overflow


def test_calibrate_empty():
    with pytest.raises(ArgumentError):
        calibrate([], LAC, 0.1)


def test_quantile_matches_sort_oracle():
    rng = random.Random(3)
    for n in range(1, 201):
        for _ in range(5):
            alpha = Fraction(rng.randint(1, 99), 100)
            scores = [rng.random() for _ in range(n)]
            rank = math.ceil((n + 1) * (1 - alpha))
            expected = INF if rank > n else sorted(scores)[rank - 1]
            assert conformal_quantile(scores, float(alpha)) == expected


def test_predict_set_examples():
    lac = CalibrationModel(LAC, 0.1, 10, 0.5)
    assert predict_set(lac, D(0.6, 0.3, 0.1)).members == (0,)
    aps = CalibrationModel(APS, 0.1, 10, 0.8)
    assert predict_set(aps, D(0.5, 0.3, 0.2)).members == (0, 1)
    full = CalibrationModel(LAC, 0.1, 3, INF)
    assert predict_set(full, D(0.7, 0.1, 0.1, 0.1)).members == (0, 1, 2, 3)


def test_empty_set_kept_unless_forced():
    m = CalibrationModel(APS, 0.1, 10, 0.3)
    assert predict_set(m, D(0.5, 0.3, 0.2)).members == ()
    forced = predict_set(m, D(0.5, 0.3, 0.2), force_nonempty=True)
    assert forced.members == (0,) and forced.forced


def test_model_record_round_trip(tmp_path):
    models = [CalibrationModel(LAC, 0.1, 5, 0.25), CalibrationModel(APS, 0.1, 4, INF)]
    save_models(models, tmp_path / "m.json")
    assert load_models(tmp_path / "m.json") == models
    assert models[1].to_record()["q_hat"] == "inf"


def test_model_invariants():
    with pytest.raises(ArgumentError):
        CalibrationModel(LAC, 1.0, 5, 0.2)
    with pytest.raises(ArgumentError):
        CalibrationModel(LAC, 0.1, 0, 0.2)
    with pytest.raises(ArgumentError):
        CalibrationModel(LAC, 0.1, 5, 1.5)


dist_st = st.lists(st.floats(0.001, 1.0), min_size=2, max_size=8).map(
    lambda w: OptionDistribution.from_weights(w)
)


@settings(max_examples=500, deadline=None)
@given(dist_st, st.floats(0.0, 1.0))
def test_lac_membership_identity(dist, q):
    members = predict_set(CalibrationModel(LAC, 0.1, 10, q), dist).members
    assert set(members) == {c for c, p in enumerate(dist.probs) if 1 - p <= q}
    # algebraic form, away from the rounding boundary
    for c, p in enumerate(dist.probs):
        if abs(p - (1 - q)) > 1e-12:
            assert (c in members) == (p >= 1 - q)


@settings(max_examples=500, deadline=None)
@given(dist_st, st.floats(0.0, 1.0))
def test_aps_top_down(dist, q):
    p = dist.probs
    if len(set(p)) != len(p):
        return
    members = set(predict_set(CalibrationModel(APS, 0.1, 10, q), dist).members)
    for c in members:
        for c2 in range(len(p)):
            if p[c2] > p[c]:
                assert c2 in members


def test_resubstitution_coverage():
    rng = random.Random(8)
    for _ in range(200):
        n = rng.randint(10, 150)
        alpha = rng.choice([0.05, 0.1, 0.2, 0.3])
        data = []
        for j in range(n):
            w = [rng.random() for _ in range(4)]
            data.append(ScoredInstance(f"i{j}", OptionDistribution.from_weights(w), rng.randrange(4)))
        m = calibrate(data, LAC, alpha)
        if m.overflow:
            continue
        cov = sum(s.gold_index in predict_set(m, s.distribution).members for s in data) / n
        assert cov >= 1 - alpha
