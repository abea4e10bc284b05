"""Coordination protocols: a coordinator broadcasts a short message and every
agent decodes its own action from the message and its private data."""
from __future__ import annotations

from .core import (
    CoordinationError,
    DecodeError,
    MalformedMessage,
    Message,
    ParameterError,
    PreconditionError,
    Protocol,
    ProtocolReport,
    agent_rng,
    coordinator_rng,
    message_bits,
    run_protocol,
)

__all__ = [
    "CoordinationError",
    "DecodeError",
    "MalformedMessage",
    "Message",
    "ParameterError",
    "PreconditionError",
    "Protocol",
    "ProtocolReport",
    "agent_rng",
    "coordinator_rng",
    "message_bits",
    "run_protocol",
]
