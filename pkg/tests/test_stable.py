from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coordc.core import MalformedMessage, Message, run_protocol
from coordc.stable import (
    UNMATCHED,
    StableInstance,
    StudentSlice,
    decode_enrollment,
    decode_scores,
    encode_scores,
    random_stable_instance,
    stab,
    stable_protocol,
    verify_stability,
)


def blocking_pairs(mu, inst):
    """Plain-loop restatement of the three stability conditions."""
    found = set()
    for j in range(inst.k):
        if sum(1 for i in range(inst.n) if mu[i] == j) > inst.capacities[j]:
            found.add(("capacity", None, j))
    for i in range(inst.n):
        prefs = list(inst.preferences[i])
        for j in prefs:
            if mu[i] != UNMATCHED and prefs.index(j) >= prefs.index(mu[i]):
                break
            enrolled = [a for a in range(inst.n) if mu[a] == j]
            if len(enrolled) < inst.capacities[j]:
                found.add(("empty-seat", i, j))
            elif any(inst.scores[j][i] > inst.scores[j][a] for a in enrolled):
                found.add(("filled-seat", i, j))
    return found


def literal_stab(inst):
    """Threshold loop with explicit per-student re-derivation."""
    admit = [inst.n] * inst.k

    def enroll():
        mu = []
        for i in range(inst.n):
            ok = [j for j in inst.preferences[i] if inst.scores[j][i] >= admit[j]]
            mu.append(int(ok[0]) if ok else UNMATCHED)
        return mu

    mu = enroll()
    while True:
        open_ = [j for j in range(inst.k) if mu.count(j) < inst.capacities[j] and admit[j] > 1]
        if not open_:
            return admit, mu
        admit[open_[0]] -= 1
        mu = enroll()


instances = st.builds(
    lambda n, k, cap, seed: random_stable_instance(n, k, cap, seed),
    st.integers(1, 12),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(0, 10_000),
)


def test_two_students_one_seat():
    inst = StableInstance([1], [[0], [0]], [[2, 1]])
    admit = stab(inst)
    assert admit.tolist() == [2]
    assert decode_enrollment(inst.student_slice(0), admit) == 0
    assert decode_enrollment(inst.student_slice(1), admit) == UNMATCHED


def test_single_student():
    inst = StableInstance([1], [[0]], [[1]])
    assert stab(inst).tolist() == [1]
    assert decode_enrollment(inst.student_slice(0), stab(inst)) == 0


def test_small_random_instance_is_stable():
    inst = random_stable_instance(4, 2, 2, seed=0)
    admit = stab(inst)
    mu = [decode_enrollment(inst.student_slice(i), admit) for i in range(4)]
    assert verify_stability(mu, inst) == (True, [])


def test_decode_qualifies_nowhere_or_everywhere():
    s = StudentSlice(preferences=(2, 0, 1), scores=(3, 3, 3))
    assert decode_enrollment(s, [4, 4, 4]) == UNMATCHED
    assert decode_enrollment(s, [1, 1, 1]) == 2
    assert decode_enrollment(s, [1, 1, 4]) == 0


def test_instance_validation():
    with pytest.raises(ValueError):
        StableInstance([1], [[0], [0]], [[1, 1]])  # scores not a permutation
    with pytest.raises(ValueError):
        StableInstance([1, 1], [[0, 0]], [[1], [1]])  # preferences not a permutation
    with pytest.raises(ValueError):
        StableInstance([0], [[0]], [[1]])


def test_json_round_trip():
    inst = random_stable_instance(9, 3, 2, seed=4)
    back = StableInstance.from_json(inst.to_json())
    assert np.array_equal(back.scores, inst.scores)
    assert np.array_equal(back.preferences, inst.preferences)
    assert np.array_equal(back.capacities, inst.capacities)


def test_verifier_reports_overfull_school():
    inst = StableInstance([1], [[0], [0]], [[2, 1]])
    ok, violations = verify_stability([0, 0], inst)
    assert not ok and [(v.kind, v.school) for v in violations] == [("capacity", 0)]


def test_verifier_reports_empty_seat():
    inst = StableInstance([2], [[0], [0]], [[2, 1]])
    ok, violations = verify_stability([0, UNMATCHED], inst)
    assert not ok
    assert [(v.kind, v.student, v.school) for v in violations] == [("empty-seat", 1, 0)]


def test_verifier_reports_filled_seat():
    inst = StableInstance([1], [[0], [0]], [[2, 1]])
    ok, violations = verify_stability([UNMATCHED, 0], inst)
    assert [(v.kind, v.student, v.school) for v in violations] == [("filled-seat", 0, 0)]


@settings(max_examples=80, deadline=None)
@given(instances)
def test_stab_matches_literal_loop(inst):
    admit, mu = literal_stab(inst)
    assert stab(inst).tolist() == admit
    assert [decode_enrollment(inst.student_slice(i), admit) for i in range(inst.n)] == mu
    assert blocking_pairs(mu, inst) == set()


@settings(max_examples=80, deadline=None)
@given(instances, st.integers(0, 2**32 - 1))
def test_verifier_agrees_with_plain_check(inst, seed):
    rng = np.random.default_rng(seed)
    mu = rng.integers(-1, inst.k, size=inst.n).tolist()
    ok, violations = verify_stability(mu, inst)
    assert {(v.kind, v.student, v.school) for v in violations} == blocking_pairs(mu, inst)
    assert ok == (not violations)


@settings(max_examples=40, deadline=None)
@given(instances)
def test_message_round_trip_and_length(inst):
    admit = stab(inst)
    msg = encode_scores(admit, inst.n)
    assert len(msg) == inst.k * math.ceil(math.log2(inst.n + 2))
    assert list(decode_scores(msg, inst.n, inst.k)) == admit.tolist()


def test_sentinel_fits_and_out_of_range_rejected():
    msg = encode_scores([4], 3)
    assert decode_scores(msg, 3, 1) == (4,)
    with pytest.raises(ValueError):
        encode_scores([0], 3)
    with pytest.raises(MalformedMessage):
        decode_scores(Message((0, 0, 0)), 3, 1)


def test_student_decode_uses_only_own_slice():
    inst = random_stable_instance(30, 4, 3, seed=2)
    msg, actions, rep = run_protocol(stable_protocol(), inst, seed=0)
    other = StableInstance(inst.capacities, inst.preferences.copy(), inst.scores)
    other.preferences[5] = other.preferences[5][::-1]
    other.rank = np.argsort(other.preferences, axis=1)
    protocol = stable_protocol()
    for i in range(inst.n):
        if i != 5:
            assert protocol.decode((other.student_slice(i), other.n, other.k), msg, None) == actions[i]
    assert rep.objective_value == 1.0
