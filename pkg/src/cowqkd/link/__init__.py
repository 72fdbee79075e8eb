"""Two-party key-distribution sessions over a framed byte stream."""

from .session import (IdealChannel, Phase, PhysicalChannel, Role, SessionConfig, SessionResult,
                      run_alice, run_bob, run_loopback)
from .transport import StreamChannel, accept_one, connect, loopback_pair
from .wire import MsgType, WireMessage, decode_message, encode_message

__all__ = [
    "IdealChannel", "Phase", "PhysicalChannel", "Role", "SessionConfig", "SessionResult",
    "run_alice", "run_bob", "run_loopback", "StreamChannel", "accept_one", "connect", "loopback_pair",
    "MsgType", "WireMessage", "decode_message", "encode_message",
]
