"""Coordinator/agent protocol framework.

A protocol is a pair (encode, decode): the coordinator sees the whole
instance and emits a :class:`Message`; every agent then computes its own
action from the message and its private slice of the instance only.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

REPORT_COLUMNS = (
    "protocol",
    "n",
    "k_or_m",
    "seed",
    "message_bits",
    "objective",
    "opt",
    "ratio",
    "wall_time_ms",
)


class CoordinationError(Exception):
    """Base class for errors raised by the protocols."""


class ParameterError(CoordinationError, ValueError):
    """A parameter lies outside the allowed range."""


class PreconditionError(CoordinationError):
    """An instance/parameter combination violates a protocol precondition."""


class DecodeError(CoordinationError):
    """An agent's decoder failed; ``agent`` is the failing index."""

    def __init__(self, agent: int, cause: BaseException):
        super().__init__(f"decoder failed for agent {agent}: {cause}")
        self.agent = agent
        self.cause = cause


class MalformedMessage(CoordinationError):
    pass


@dataclass(frozen=True)
class Message:
    """An exact bit string. ``len(message)`` is its coordination cost."""

    bits: tuple[int, ...] = ()

    def __post_init__(self):
        if not set(self.bits) <= {0, 1}:
            raise ValueError("message bits must be 0 or 1")

    @property
    def length(self) -> int:
        return len(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __add__(self, other: Message) -> Message:
        return Message(self.bits + other.bits)

    def to_bytes(self) -> bytes:
        """Pack LSB-first into bytes; trailing pad bits are zero."""
        out = bytearray((len(self.bits) + 7) // 8)
        for i, b in enumerate(self.bits):
            if b:
                out[i >> 3] |= 1 << (i & 7)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes, nbits: int) -> Message:
        if nbits > 8 * len(data):
            raise MalformedMessage(f"{nbits} bits requested from {len(data)} bytes")
        return cls(tuple((data[i >> 3] >> (i & 7)) & 1 for i in range(nbits)))

    def to_hex(self) -> str:
        # Bit length travels with the payload since padding is not part of it.
        return f"{len(self.bits)}:{self.to_bytes().hex()}"

    @classmethod
    def from_hex(cls, text: str) -> Message:
        try:
            nbits, payload = text.split(":", 1)
            return cls.from_bytes(bytes.fromhex(payload), int(nbits))
        except ValueError as exc:
            raise MalformedMessage(f"bad hex message {text!r}") from exc

    def __str__(self) -> str:
        return "".join(map(str, self.bits))


def message_bits(m: Message) -> int:
    return len(m.bits)


def field_width(max_value: int) -> int:
    """Bits needed to hold any integer in ``0..max_value``."""
    if max_value < 0:
        raise ValueError("max_value must be non-negative")
    return max(int(max_value).bit_length(), 0)


def ceil_log2(x: float) -> int:
    """``ceil(log2(x))`` for x >= 1, exact on integers."""
    if x <= 1:
        return 0
    if float(x).is_integer():
        return (int(x) - 1).bit_length()
    return math.ceil(math.log2(x))


class BitWriter:
    """Append fixed-width unsigned fields, little-endian bit order per field."""

    def __init__(self):
        self._bits: list[int] = []

    def write(self, value: int, width: int) -> BitWriter:
        value = int(value)
        if width < 0:
            raise ValueError("negative width")
        if value < 0 or (width < value.bit_length()):
            raise ValueError(f"value {value} does not fit in {width} bits")
        self._bits.extend((value >> j) & 1 for j in range(width))
        return self

    def write_array(self, values, width: int) -> BitWriter:
        """Write many fields of the same width at once."""
        arr = np.asarray(values, dtype=np.int64).ravel()
        if width < 0 or width > 62:
            raise ValueError(f"array fields must be 0..62 bits wide, got {width}")
        if arr.size and (arr.min() < 0 or int(arr.max()).bit_length() > width):
            raise ValueError(f"values do not fit in {width} bits")
        bits = (arr[:, None] >> np.arange(width, dtype=np.int64)) & 1
        self._bits.extend(bits.ravel().tolist())
        return self

    def write_bit(self, bit: int | bool) -> BitWriter:
        self._bits.append(1 if bit else 0)
        return self

    def extend(self, m: Message) -> BitWriter:
        self._bits.extend(m.bits)
        return self

    def message(self) -> Message:
        return Message(tuple(self._bits))


class BitReader:
    def __init__(self, m: Message):
        self._bits = m.bits
        self.pos = 0

    def read(self, width: int) -> int:
        if self.pos + width > len(self._bits):
            raise MalformedMessage(
                f"read of {width} bits at offset {self.pos} overruns {len(self._bits)}-bit message"
            )
        value = 0
        for j in range(width):
            value |= self._bits[self.pos + j] << j
        self.pos += width
        return value

    def read_array(self, count: int, width: int) -> np.ndarray:
        if width < 0 or width > 62:
            raise ValueError(f"array fields must be 0..62 bits wide, got {width}")
        need = count * width
        if self.pos + need > len(self._bits):
            raise MalformedMessage(
                f"read of {count} x {width} bits at offset {self.pos} overruns {len(self._bits)}-bit message"
            )
        flat = np.fromiter(self._bits[self.pos : self.pos + need], dtype=np.int64, count=need)
        chunk = flat.reshape(count, width)
        self.pos += need
        return chunk @ (np.int64(1) << np.arange(width, dtype=np.int64))

    def read_bit(self) -> int:
        return self.read(1)

    @property
    def remaining(self) -> int:
        return len(self._bits) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise MalformedMessage(f"{self.remaining} trailing bits")


# ---------------------------------------------------------------------------
# seeding


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def coordinator_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(_check_seed(seed)))


def agent_rng(seed: int, agent: int) -> np.random.Generator:
    """Independent stream for ``agent``; does not depend on evaluation order."""
    return np.random.default_rng(np.random.SeedSequence(_check_seed(seed), spawn_key=(int(agent),)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class ProtocolReport:
    protocol: str
    n: int
    k_or_m: int
    seed: int
    message_bits: int
    objective_value: float
    opt_value: float | None = None
    approximation_ratio: float | None = None
    wall_time_ms: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.message_bits < 0:
            raise ValueError("message_bits must be non-negative")
        if self.approximation_ratio is None:
            self.approximation_ratio = approximation_ratio(self.opt_value, self.objective_value)

    def row(self) -> dict[str, Any]:
        return {
            "protocol": self.protocol,
            "n": self.n,
            "k_or_m": self.k_or_m,
            "seed": self.seed,
            "message_bits": self.message_bits,
            "objective": self.objective_value,
            "opt": self.opt_value,
            "ratio": self.approximation_ratio,
            "wall_time_ms": self.wall_time_ms,
        }

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if not d["extra"]:
            d.pop("extra")
        return d


def approximation_ratio(opt: float | None, objective: float | None) -> float | None:
    if opt is None or objective is None or objective <= 0:
        return None
    return opt / objective


def reports_to_csv(reports: Iterable[ProtocolReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow({k: "" if v is None else v for k, v in rep.row().items()})
    return buf.getvalue()


def reports_to_json(reports: Iterable[ProtocolReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# the two-stage protocol


@dataclass
class Protocol:
    """Encoder/decoder pair plus the accessors the runner needs.

    ``encode(instance, rng)`` runs on the coordinator.  ``decode(private,
    message, rng)`` runs once per agent and never sees anything but its own
    private slice, which ``private_slices(instance)`` extracts.
    """

    name: str
    encode: Callable[[Any, np.random.Generator], Message]
    decode: Callable[[Any, Message, np.random.Generator], Any]
    private_slices: Callable[[Any], Sequence[Any]]
    objective: Callable[[Any, Sequence[Any]], float] | None = None
    opt: Callable[[Any], float] | None = None
    size: Callable[[Any], tuple[int, int]] | None = None


def decode_all(protocol: Protocol, instance: Any, message: Message, seed: int) -> list[Any]:
    actions = []
    for i, private in enumerate(protocol.private_slices(instance)):
        try:
            actions.append(protocol.decode(private, message, agent_rng(seed, i)))
        except Exception as exc:  # noqa: BLE001 - re-raised with the agent index
            raise DecodeError(i, exc) from exc
    return actions


def run_protocol(
    protocol: Protocol, instance: Any, seed: int, *, timing: bool = True
) -> tuple[Message, list[Any], ProtocolReport]:
    start = time.perf_counter()
    message = protocol.encode(instance, coordinator_rng(seed))
    actions = decode_all(protocol, instance, message, seed)
    elapsed = (time.perf_counter() - start) * 1000.0 if timing else 0.0
    objective = float(protocol.objective(instance, actions)) if protocol.objective else 0.0
    opt = float(protocol.opt(instance)) if protocol.opt else None
    n, k = protocol.size(instance) if protocol.size else (len(actions), 0)
    report = ProtocolReport(
        protocol=protocol.name,
        n=n,
        k_or_m=k,
        seed=int(seed),
        message_bits=message_bits(message),
        objective_value=objective,
        opt_value=opt,
        wall_time_ms=elapsed,
    )
    return message, actions, report
