from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coordc.convex import (
    MatchingInstance,
    full_broadcast_protocol,
    matching_encoding,
    random_matching_instance,
    rec_coordination_protocol,
)
from coordc.core import (
    BitReader,
    BitWriter,
    DecodeError,
    MalformedMessage,
    Message,
    ParameterError,
    Protocol,
    ProtocolReport,
    agent_rng,
    ceil_log2,
    coordinator_rng,
    field_width,
    message_bits,
    reports_to_csv,
    reports_to_json,
    run_protocol,
)

bit_lists = st.lists(st.integers(0, 1), max_size=200)


def test_empty_message_has_zero_bits():
    assert message_bits(Message()) == 0


def test_seven_bit_payload():
    m = BitWriter().write(0b1011001, 7).message()
    assert message_bits(m) == 7 == len(m) == m.length


def test_field_order_is_little_endian():
    m = BitWriter().write(6, 3).message()
    assert m.bits == (0, 1, 1)
    assert BitReader(m).read(3) == 6


def test_write_rejects_overflow():
    with pytest.raises(ValueError):
        BitWriter().write(8, 3)
    with pytest.raises(ValueError):
        BitWriter().write(-1, 3)


def test_reader_overrun_and_trailing_bits():
    r = BitReader(Message((1, 0)))
    with pytest.raises(MalformedMessage):
        r.read(3)
    r = BitReader(Message((1, 0, 1)))
    r.read(2)
    with pytest.raises(MalformedMessage):
        r.expect_end()


def test_message_rejects_non_bits():
    with pytest.raises(ValueError):
        Message((0, 2))


@given(bit_lists)
def test_bytes_round_trip(bits):
    m = Message(tuple(bits))
    data = m.to_bytes()
    assert len(data) == (len(bits) + 7) // 8
    assert Message.from_bytes(data, len(bits)) == m
    assert Message.from_hex(m.to_hex()) == m


@given(st.lists(st.tuples(st.integers(0, 2**20), st.integers(0, 6)), max_size=30))
def test_structured_round_trip(fields):
    w = BitWriter()
    widths = []
    for value, extra in fields:
        width = field_width(value) + extra
        w.write(value, width)
        widths.append(width)
    msg = w.message()
    assert len(msg) == sum(widths)
    r = BitReader(msg)
    assert [r.read(width) for width in widths] == [v for v, _ in fields]
    r.expect_end()


def test_bad_hex_is_malformed():
    with pytest.raises(MalformedMessage):
        Message.from_hex("zz")
    with pytest.raises(MalformedMessage):
        Message.from_hex("17:00")


@pytest.mark.parametrize("value,width", [(0, 0), (1, 1), (2, 2), (3, 2), (4, 3), (255, 8), (256, 9)])
def test_field_width(value, width):
    assert field_width(value) == width


@pytest.mark.parametrize("x,expected", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (1024, 10), (1025, 11), (2.5, 2)])
def test_ceil_log2(x, expected):
    assert ceil_log2(x) == expected


def test_agent_streams_are_independent_of_order():
    a = [agent_rng(99, i).random() for i in range(5)]
    b = [agent_rng(99, i).random() for i in reversed(range(5))][::-1]
    assert a == b
    assert len(set(a)) == 5
    assert coordinator_rng(99).random() not in a


def test_seed_range_is_checked():
    with pytest.raises(ParameterError):
        coordinator_rng(-1)
    with pytest.raises(ParameterError):
        agent_rng(2**64, 0)
    coordinator_rng(2**64 - 1)


def test_report_ratio_and_columns():
    rep = ProtocolReport("p", 3, 2, 1, 10, objective_value=4.0, opt_value=5.0)
    assert rep.approximation_ratio == pytest.approx(1.25)
    assert ProtocolReport("p", 3, 2, 1, 10, objective_value=0.0, opt_value=5.0).approximation_ratio is None
    csv_text = reports_to_csv([rep])
    assert csv_text.splitlines()[0] == "protocol,n,k_or_m,seed,message_bits,objective,opt,ratio,wall_time_ms"
    assert json.loads(reports_to_json([rep]))[0]["message_bits"] == 10
    with pytest.raises(ValueError):
        ProtocolReport("p", 1, 1, 0, -1, 0.0)


def _constant_protocol():
    return Protocol(
        name="silent",
        encode=lambda inst, rng: Message(),
        decode=lambda private, msg, rng: private,
        private_slices=lambda inst: list(inst),
        objective=lambda inst, actions: float(sum(actions)),
    )


def test_empty_message_protocol():
    msg, actions, rep = run_protocol(_constant_protocol(), [1, 2, 3], seed=5)
    assert rep.message_bits == 0 and len(msg) == 0
    assert actions == [1, 2, 3]
    assert rep.objective_value == 6.0


def test_decoder_failure_names_the_agent():
    def decode(private, msg, rng):
        if private == 2:
            raise ZeroDivisionError("boom")
        return private

    proto = Protocol("fragile", lambda inst, rng: Message(), decode, lambda inst: list(inst))
    with pytest.raises(DecodeError) as info:
        run_protocol(proto, [0, 1, 2, 3], seed=0)
    assert info.value.agent == 2


def test_full_broadcast_of_2x2_optimum():
    inst = MatchingInstance(np.ones((2, 2)), [1, 1])
    msg, actions, rep = run_protocol(full_broadcast_protocol(), inst, seed=0)
    # n fields of ceil(log2(k + 1)) bits
    assert rep.message_bits == 2 * 2
    assert rep.objective_value == rep.opt_value == 2.0
    assert msg == matching_encoding(np.array(actions), 2)


def test_rec_replay_is_deterministic():
    inst = random_matching_instance(20, 4, 0.5, 3, seed=11)
    proto = rec_coordination_protocol(eta=0.01, eps=0.01)
    first = run_protocol(proto, inst, seed=123, timing=False)
    second = run_protocol(proto, inst, seed=123, timing=False)
    assert first[0] == second[0]
    assert first[1] == second[1]
    assert first[2] == second[2]


@given(st.lists(st.integers(0, 2**20 - 1), max_size=30), st.integers(20, 40))
def test_array_fields_match_scalar_fields(values, width):
    one, many = BitWriter(), BitWriter()
    for v in values:
        one.write(v, width)
    many.write_array(values, width)
    assert one.message() == many.message()
    assert BitReader(many.message()).read_array(len(values), width).tolist() == values


def test_array_field_overflow():
    with pytest.raises(ValueError):
        BitWriter().write_array([8], 3)
    with pytest.raises(MalformedMessage):
        BitReader(Message((1, 0))).read_array(1, 3)
