"""Media packet header codec and frame fragmentation.

Header layout (big-endian, 16 bytes)::

    0-3   timestamp  ms, source time (first-mile latency included)
    4-7   flow id    source surrogate
    8-9   rate       kbps
    10    fr         frames per second
    11    seq        per-flow packet counter, wraps at 256
    12    codec      codec tag
    13-15 reserved   zero on encode, ignored on decode
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

HEADER = struct.Struct(">IIHBBB3x")
HEADER_LEN = HEADER.size  # 16
P_MAX = 512  # payload bytes per packet


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class MediaPacketHeader:
    timestamp: int
    flow_id: int
    rate: int
    fr: int
    seq: int
    codec: int = 0

    def __post_init__(self):
        for name, hi in (("timestamp", 2**32 - 1), ("flow_id", 2**32 - 1), ("rate", 0xFFFF),
                         ("fr", 0xFF), ("seq", 0xFF), ("codec", 0xFF)):
            v = getattr(self, name)
            if not 0 <= v <= hi:
                raise WireError(f"{name}={v} does not fit its field")


def encode(header: MediaPacketHeader, payload: bytes = b"") -> bytes:
    if len(payload) > P_MAX:
        raise WireError(f"payload of {len(payload)} bytes exceeds {P_MAX}")
    h = header
    return HEADER.pack(h.timestamp, h.flow_id, h.rate, h.fr, h.seq, h.codec) + bytes(payload)


def decode(data: bytes) -> Tuple[MediaPacketHeader, bytes]:
    if len(data) < HEADER_LEN:
        raise WireError(f"{len(data)} bytes is shorter than the {HEADER_LEN}-byte header")
    ts, flow, rate, fr, seq, codec = HEADER.unpack_from(data)
    payload = bytes(data[HEADER_LEN:])
    if len(payload) > P_MAX:
        raise WireError(f"payload of {len(payload)} bytes exceeds {P_MAX}")
    return MediaPacketHeader(ts, flow, rate, fr, seq, codec), payload


def packets_per_frame(rate_kbps: int, fr_fps: int) -> int:
    """Frame size in bits over packet size in bits, rounded up."""
    if rate_kbps <= 0 or fr_fps <= 0:
        raise WireError("rate and frame rate must be positive")
    return -(-(rate_kbps * 1000) // (fr_fps * P_MAX * 8))


def frame_bytes(rate_kbps: int, fr_fps: int) -> int:
    return math.ceil(rate_kbps * 1000 / (8 * fr_fps))


class SeqCounter:
    """Per-flow packet counter owned by the sender."""

    def __init__(self, start: int = 0):
        self.next = start % 256

    def take(self) -> int:
        v = self.next
        self.next = (v + 1) % 256
        return v


def fragment_frame(rate_kbps: int, fr_fps: int, frame: bytes, *, timestamp: int = 0, flow_id: int = 0,
                   codec: int = 0, seq: Optional[SeqCounter] = None) -> List[bytes]:
    """Split one frame into encoded packets sharing a timestamp."""
    count = packets_per_frame(rate_kbps, fr_fps)
    if len(frame) > count * P_MAX:
        raise WireError(f"{len(frame)}-byte frame does not fit {count} packets at {rate_kbps} kbps")
    seq = seq or SeqCounter()
    out = []
    for k in range(count):
        chunk = frame[k * P_MAX:(k + 1) * P_MAX]
        h = MediaPacketHeader(timestamp & 0xFFFFFFFF, flow_id, rate_kbps, fr_fps, seq.take(), codec)
        out.append(encode(h, chunk))
    return out


def reassemble(packets: Sequence[bytes]) -> Optional[bytes]:
    """Rebuild a frame; None when a fragment is missing.

    Fragment order is recovered from seq relative to the smallest seq in the
    group (mod 256), since the header carries no fragment index.
    """
    if not packets:
        return None
    decoded = [decode(p) for p in packets]
    h0 = decoded[0][0]
    if any(h.timestamp != h0.timestamp or h.flow_id != h0.flow_id for h, _ in decoded):
        raise WireError("packets from different frames")
    count = packets_per_frame(h0.rate, h0.fr)
    parts = {}
    for h, p in decoded:
        parts.setdefault(h.seq, p)
    if len(parts) != count:
        return None
    seqs = sorted(parts)
    # the group may straddle the 255 -> 0 wrap: start after the largest gap
    gaps = [(seqs[(i + 1) % len(seqs)] - s) % 256 for i, s in enumerate(seqs)]
    start = seqs[(max(range(len(seqs)), key=lambda i: gaps[i]) + 1) % len(seqs)] if len(seqs) > 1 else seqs[0]
    order = [(start + k) % 256 for k in range(count)]
    if any(s not in parts for s in order):
        return None
    return b"".join(parts[s] for s in order)


def unwrap_timestamp(ts32: int, reference_ms: float) -> int:
    """Pick the 64-bit time nearest the receiver clock for a 32-bit stamp."""
    base = int(reference_ms) - (int(reference_ms) & 0xFFFFFFFF)
    best = None
    for cand in (base - 2**32 + ts32, base + ts32, base + 2**32 + ts32):
        if best is None or abs(cand - reference_ms) < abs(best - reference_ms):
            best = cand
    return best
