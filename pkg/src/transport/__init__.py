from .config import DEFAULT_TRANSPORT, TransportConfig
from .packet import (
    AETH,
    DATA_OPCODES,
    ENDS_MESSAGE,
    FLAG_ACK_REQ,
    Opcode,
    Packet,
    RETH,
    ResumeInfo,
    STARTS_MESSAGE,
    Syndrome,
    WIRE_VERSION,
    make_ack,
)
from .psn import PSN_MOD, psn_add, psn_diff, psn_le, psn_lt
from .requester import (
    has_work,
    next_deadline,
    plan_segment,
    on_timer,
    requester_step,
    retransmit_on_timeout,
    send_resume,
)
from .responder import handle_resume, responder_handle
from .completer import completer_handle

__all__ = [
    "DEFAULT_TRANSPORT",
    "TransportConfig",
    "AETH",
    "DATA_OPCODES",
    "ENDS_MESSAGE",
    "FLAG_ACK_REQ",
    "Opcode",
    "Packet",
    "RETH",
    "ResumeInfo",
    "STARTS_MESSAGE",
    "Syndrome",
    "WIRE_VERSION",
    "make_ack",
    "PSN_MOD",
    "psn_add",
    "psn_diff",
    "psn_le",
    "psn_lt",
    "has_work",
    "next_deadline",
    "plan_segment",
    "on_timer",
    "requester_step",
    "retransmit_on_timeout",
    "send_resume",
    "handle_resume",
    "responder_handle",
    "completer_handle",
]
