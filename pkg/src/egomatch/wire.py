"""Bit-exact binary packet format for transmitting one scene graph.

Layout (all little-endian), format version 1:

    offset  size  field
    0       4     magic "NOPE"
    4       1     format version (u8)
    5       2     node count n (u16)
    7       2     feature width d_f (u16)
    9       4     feature quantization scale (f32)
    13      4     feature quantization offset (f32)
    17      n * (12 + d_f) payload, per node:
                    3 x f32  position x, y, z
                    d_f x u8 quantized feature bytes

Total size is exactly 17 + n * (12 + d_f) bytes. Features are affinely
quantized to 8 bits with one global scale/offset pair (scale =
(max - min) / 255 over every transmitted coordinate, stored as f32 and used
as stored, so a decoded feature sits within half a step of the original).
Edges are not transmitted: the receiver recomputes the Delaunay edge set
and distance adjacency from the decoded positions, which reproduces the
sender's graph exactly whenever positions survive the f32 round trip.

See docs/wire_format.md for an annotated hex dump.
"""

import struct

import numpy as np

from .errors import EncodingError, PacketParseError
from .scene import ObjectNode, SceneGraph, build_graph

MAGIC = b"NOPE"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sBHHff")
HEADER_SIZE = HEADER.size  # 17
NODE_FIXED_SIZE = 12       # three f32 position components


def packet_size(graph) -> int:
    """Exact byte length of encode(graph) without building it."""
    d_f = graph.feature_dim if graph.n else 0
    return HEADER_SIZE + graph.n * (NODE_FIXED_SIZE + d_f)


def encode(graph) -> bytes:
    """Serialize a scene graph to its wire packet."""
    n = graph.n
    if n > 0xFFFF:
        raise EncodingError(f"node count {n} exceeds the u16 limit")
    d_f = graph.feature_dim if n else 0
    feats = graph.features
    if n and d_f and not np.isfinite(feats).all():
        raise EncodingError("non-finite feature values cannot be quantized")
    if not np.isfinite(graph.positions).all():
        raise EncodingError("non-finite positions cannot be encoded")
    if n and d_f:
        lo = float(feats.min())
        hi = float(feats.max())
        scale32 = np.float32((hi - lo) / 255.0)
        offset32 = np.float32(lo)
    else:
        scale32 = np.float32(0.0)
        offset32 = np.float32(0.0)
    out = bytearray(HEADER.pack(MAGIC, FORMAT_VERSION, n, d_f,
                                float(scale32), float(offset32)))
    scale = float(scale32)
    offset = float(offset32)
    pos32 = graph.positions.astype(np.float32)
    if scale > 0.0:
        q = np.clip(np.rint((feats - offset) / scale), 0, 255).astype(np.uint8)
    else:
        q = np.zeros((n, d_f), dtype=np.uint8)
    for i in range(n):
        out += struct.pack("<fff", *pos32[i])
        out += q[i].tobytes()
    return bytes(out)


def decode(data: bytes) -> SceneGraph:
    """Parse a packet and rebuild the graph (edges recomputed from positions)."""
    if len(data) < HEADER_SIZE:
        raise PacketParseError(
            f"truncated header: need {HEADER_SIZE} bytes, got {len(data)}",
            offset=len(data))
    magic, version, n, d_f, scale, offset = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise PacketParseError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise PacketParseError(f"unsupported format version {version}", offset=4)
    expected = HEADER_SIZE + n * (NODE_FIXED_SIZE + d_f)
    if len(data) != expected:
        fault = min(len(data), expected)
        raise PacketParseError(
            f"payload length mismatch: expected {expected} bytes, got {len(data)}",
            offset=fault)
    nodes = []
    pos_sz = NODE_FIXED_SIZE
    stride = pos_sz + d_f
    scale = float(np.float64(np.float32(scale)))
    offset = float(np.float64(np.float32(offset)))
    for i in range(n):
        base = HEADER_SIZE + i * stride
        x, y, z = struct.unpack_from("<fff", data, base)
        qbytes = np.frombuffer(data, dtype=np.uint8,
                               count=d_f, offset=base + pos_sz)
        feat = offset + qbytes.astype(np.float64) * scale
        nodes.append(ObjectNode(id=i,
                                position=np.array([x, y, z], dtype=np.float64),
                                feature=feat))
    return build_graph(nodes)
