"""Client SDK for hub endpoints: catalog, subscribe, publish over TCP.

The SDK speaks only the newline-delimited JSON wire protocol. It embeds no
hub code and does no signal processing; pipelines are declared at subscribe
time and run on the hub, so every consumer sees the same transformed
stream.

Quick tour::

    import thalamus_client as tc

    session = tc.connect("127.0.0.1:7331", "console")
    for sig in session.catalog:
        print(sig.device_id, sig.signal, sig.rate_hz)

    session.subscribe([("eye1", "pupil")], on_sample=print)

Missing channel values arrive as :data:`MISSING`; test with
:func:`is_missing` rather than equality.
"""

from .ndjson import NdjsonRecorder
from .session import (
    ClientSession,
    ConnectError,
    NotConnected,
    ProtocolError,
    PublishRejected,
    ReconnectPolicy,
    SessionError,
    SubscribeRejected,
    connect,
)
from .wire import (
    MISSING,
    Ack,
    Catalog,
    ErrorFrame,
    Sample,
    SignalDescriptor,
    WireError,
    is_missing,
)

__all__ = [
    "Ack",
    "Catalog",
    "ClientSession",
    "ConnectError",
    "ErrorFrame",
    "MISSING",
    "NdjsonRecorder",
    "NotConnected",
    "ProtocolError",
    "PublishRejected",
    "ReconnectPolicy",
    "Sample",
    "SessionError",
    "SignalDescriptor",
    "SubscribeRejected",
    "WireError",
    "connect",
    "is_missing",
]

__version__ = "0.1.0"
