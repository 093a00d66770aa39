"""Length-prefixed JSON wire protocol for the three-node session.

Every message is one frame: a 4-byte big-endian body length followed by
a UTF-8 JSON object with a "type" tag and protocol version "v": 1.
JSON bodies are canonical (sorted keys, no whitespace) so that a given
message always maps to the same bytes; the networked and in-process
transports therefore produce identical frame streams for identical
message sequences.

The announcement types mirror what the measurement node and the users
tell each other: per-slot measurement results and sifting reveals, the
per-window misalignment estimates, plus the session-plumbing frames
(compensator state, window summaries) that stand in for the physical
light path in a simulation.

A decoder consumes a byte stream incrementally: truncated frames wait
for more bytes, and a frame whose body fails to parse raises but leaves
the stream positioned at the next frame (resynchronization).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 16 * 1024 * 1024


class WireError(ValueError):
    """Raised for malformed frames or unknown/invalid message payloads."""


@dataclass(frozen=True)
class BsmResult:
    """Measurement node announces one slot's projection result."""

    slot: int
    basis: str
    outcome: str

    type_tag = "bsm_result"


@dataclass(frozen=True)
class BasisIntensityReveal:
    """A user reveals basis and intensity class for an announced slot."""

    user: str
    slot: int
    basis: str
    intensity: str

    type_tag = "basis_intensity_reveal"


@dataclass(frozen=True)
class PolarizationBitReveal:
    """A user reveals the transmitted bit of a recycled (failed-BSM) slot."""

    user: str
    slot: int
    bit: int

    type_tag = "polarization_bit_reveal"


@dataclass(frozen=True)
class MisalignmentAnnouncement:
    """Measurement node announces one user's estimated misalignment."""

    user: str
    window: int
    theta_z: float | None
    theta_x: float | None

    type_tag = "misalignment"


@dataclass(frozen=True)
class CompensatorState:
    """User reports its squeezer retardances for the coming window.

    Simulation plumbing: stands in for the physical effect the user's
    polarization controller has on the light it sends.
    """

    user: str
    window: int
    retardances: tuple
    triggered: bool = False

    type_tag = "compensator_state"


@dataclass(frozen=True)
class WindowSummary:
    """Measurement node's per-window bookkeeping broadcast."""

    window: int
    meas_basis: str
    counts: dict = field(default_factory=dict)

    type_tag = "window_summary"


@dataclass(frozen=True)
class SessionEnd:
    """Terminates the message stream for a session."""

    reason: str = "complete"

    type_tag = "session_end"


MESSAGE_TYPES = {cls.type_tag: cls for cls in (
    BsmResult, BasisIntensityReveal, PolarizationBitReveal,
    MisalignmentAnnouncement, CompensatorState, WindowSummary, SessionEnd)}

ANNOUNCEMENT_TYPES = (BsmResult, BasisIntensityReveal, PolarizationBitReveal,
                      MisalignmentAnnouncement)


def encode_message(message) -> bytes:
    """Serialize a message dataclass into one self-delimiting frame."""
    tag = getattr(type(message), "type_tag", None)
    if tag not in MESSAGE_TYPES or not isinstance(message, MESSAGE_TYPES[tag]):
        raise WireError(f"cannot encode object of type {type(message).__name__}")
    payload = asdict(message)
    payload["type"] = tag
    payload["v"] = PROTOCOL_VERSION
    if isinstance(payload.get("retardances"), tuple):
        payload["retardances"] = list(payload["retardances"])
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise WireError(f"frame body too large: {len(body)} bytes")
    return HEADER.pack(len(body)) + body


def decode_payload(payload: dict):
    """Rebuild the message dataclass from a parsed JSON object."""
    if not isinstance(payload, dict):
        raise WireError("frame body must be a JSON object")
    version = payload.pop("v", None)
    if version != PROTOCOL_VERSION:
        raise WireError(f"unsupported protocol version {version!r}")
    tag = payload.pop("type", None)
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise WireError(f"unknown message type {tag!r}")
    if "retardances" in payload:
        payload["retardances"] = tuple(payload["retardances"])
    try:
        return cls(**payload)
    except TypeError as exc:
        raise WireError(f"bad fields for {tag}: {exc}") from exc


class FrameDecoder:
    """Incremental frame parser with resynchronization.

    feed() buffers bytes and returns every complete, well-formed message
    parsed so far.  A complete frame whose body is invalid raises
    WireError *after* that frame has been consumed and with any earlier
    messages retained, so calling feed(b"") again resumes cleanly at the
    next frame; a truncated frame simply waits for more bytes.
    """

    def __init__(self):
        self._buffer = bytearray()
        self._ready: list = []

    def feed(self, data: bytes = b"") -> list:
        self._buffer.extend(data)
        while True:
            if len(self._buffer) < HEADER.size:
                break
            (length,) = HEADER.unpack_from(self._buffer)
            if length > MAX_FRAME_BYTES:
                del self._buffer[:]
                raise WireError(f"frame length {length} exceeds limit")
            if len(self._buffer) < HEADER.size + length:
                break
            body = bytes(self._buffer[HEADER.size:HEADER.size + length])
            del self._buffer[:HEADER.size + length]
            try:
                payload = json.loads(body.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise WireError(f"malformed frame body: {exc}") from exc
            self._ready.append(decode_payload(payload))
        ready, self._ready = self._ready, []
        return ready

    def pending_bytes(self) -> int:
        return len(self._buffer)
