from .config import ServiceConfig
from .core import Service
from .persistence import decode_snapshot, encode_snapshot, restore_state, snapshot_state
from .wire import WireMessage, decode_message, encode_message

__all__ = ["Service", "ServiceConfig", "WireMessage", "decode_message", "decode_snapshot",
           "encode_message", "encode_snapshot", "restore_state", "snapshot_state"]
