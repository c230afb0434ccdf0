#!/usr/bin/env python3
"""Reference external detector speaking the cootest detector protocol.

Line-delimited JSON over stdin/stdout, one document per line:

  handshake   {"cootest_protocol": 1}
              -> {"ok": true, "detector_id": "..."}
  per scene   {"scene": {...}, "forwarded_spec": {...} | null}
              -> {"boxes": [{"center": [x,y,z], "dims": [l,w,h],
                             "yaw": r, "score": s}, ...]}

Scene encoding: agents carry frames with a 16-number row-major pose
(agent to world) and the point cloud as base64 of packed little-endian
float32 (x, y, z, intensity) quadruplets.

Modes: `echo` answers every scene with a fixed box list (loopback
fixture); `centroid` projects all agents' evaluation-frame points into
the ego frame and returns one car-sized box per chunk of points, centered
at the chunk centroid.  A forwarded GL/CL spec is applied to the internal
(x, y, z, intensity) payload before chunking, with the same semantics as
the harness: GL replaces each scalar with probability p_g by a uniform
draw within the payload's global [min, max]; CL overwrites exactly
floor(p_c * C) whole channels within their own ranges.

Standard library only, so the conformance suite runs anywhere.  Malformed
requests get an {"error": ...} line and the process keeps serving.
"""

from __future__ import annotations

import argparse
import base64
import json
import math
import struct
import sys

PROTOCOL_VERSION = 1
CHUNK_SIZE = 10_000
BOX_DIMS = (4.0, 2.0, 1.6)
BOX_SCORE = 0.9

DEFAULT_ECHO_BOXES = [
    {"center": [0.0, 0.0, 0.0], "dims": [4.0, 2.0, 1.5], "yaw": 0.0, "score": 0.9}
]

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """Same state transition as the harness RNG; stream layout is ours."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()


# ---------------------------------------------------------------------------
# geometry helpers (4x4 row-major poses, lists of [x, y, z, i] rows)


def decode_cloud(cloud_b64: str) -> list[list[float]]:
    raw = base64.b64decode(cloud_b64)
    if len(raw) % 16:
        raise ValueError(f"cloud payload of {len(raw)} bytes is not 16-aligned")
    flat = struct.unpack(f"<{len(raw) // 4}f", raw)
    return [list(flat[i : i + 4]) for i in range(0, len(flat), 4)]


def mat_vec(m: list[float], v: tuple[float, float, float]) -> tuple[float, float, float]:
    x, y, z = v
    return (
        m[0] * x + m[1] * y + m[2] * z + m[3],
        m[4] * x + m[5] * y + m[6] * z + m[7],
        m[8] * x + m[9] * y + m[10] * z + m[11],
    )


def invert_pose(m: list[float]) -> list[float]:
    # rigid transform: inverse rotation is the transpose
    r = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    t = (m[3], m[7], m[11])
    out = [0.0] * 16
    for i in range(3):
        for j in range(3):
            out[i * 4 + j] = r[j][i]
        out[i * 4 + 3] = -(r[0][i] * t[0] + r[1][i] * t[1] + r[2][i] * t[2])
    out[15] = 1.0
    return out


def compose_pose(a: list[float], b: list[float]) -> list[float]:
    out = [0.0] * 16
    for i in range(4):
        for j in range(4):
            out[i * 4 + j] = sum(a[i * 4 + k] * b[k * 4 + j] for k in range(4))
    return out


def evaluation_frame(agent: dict, eval_timestamp: int) -> dict:
    chosen = None
    for frame in agent["frames"]:
        if frame["timestamp"] <= eval_timestamp:
            chosen = frame
    if chosen is None:
        raise ValueError(f"agent {agent.get('agent_id')} has no usable frame")
    return chosen


# ---------------------------------------------------------------------------
# forwarded lossy specs


def apply_forwarded_spec(rows: list[list[float]], spec: dict) -> list[list[float]]:
    """GL / CL corruption of the (x, y, z, intensity) payload."""
    if not rows:
        return rows
    kind = spec.get("kind")
    rng = SplitMix64(int(spec.get("seed", 0)))
    channels = list(zip(*rows))  # 4 tuples of length N
    if kind == "GL":
        p_g = float(spec["params"]["p_g"])
        if p_g <= 0.0:
            return rows
        lo = min(min(ch) for ch in channels)
        hi = max(max(ch) for ch in channels)
        out_channels = []
        for ch in channels:
            out_channels.append(
                [rng.uniform(lo, hi) if rng.random() < p_g else v for v in ch]
            )
        return [list(col) for col in zip(*out_channels)]
    if kind == "CL":
        p_c = float(spec["params"]["p_c"])
        n_corrupt = math.floor(p_c * len(channels))
        if n_corrupt <= 0:
            return rows
        keys = [(rng.random(), i) for i in range(len(channels))]
        chosen = sorted(i for _, i in sorted(keys)[:n_corrupt])
        out_channels = [list(ch) for ch in channels]
        for idx in chosen:
            lo, hi = min(channels[idx]), max(channels[idx])
            out_channels[idx] = [rng.uniform(lo, hi) for _ in channels[idx]]
        return [list(col) for col in zip(*out_channels)]
    # unknown kinds are ignored: this adapter only models lossy transport
    return rows


# ---------------------------------------------------------------------------
# detection modes


def detect_centroids(scene: dict, forwarded_spec) -> list[dict]:
    eval_ts = scene["eval_timestamp"]
    ego = next(a for a in scene["agents"] if a["role"] == "ego")
    ego_frame = evaluation_frame(ego, eval_ts)
    world_to_ego = invert_pose([float(v) for v in ego_frame["pose"]])
    rows: list[list[float]] = []
    for agent in scene["agents"]:
        frame = evaluation_frame(agent, eval_ts)
        points = decode_cloud(frame["cloud_b64"])
        to_ego = compose_pose(world_to_ego, [float(v) for v in frame["pose"]])
        for x, y, z, intensity in points:
            px, py, pz = mat_vec(to_ego, (x, y, z))
            rows.append([px, py, pz, intensity])
    if forwarded_spec:
        rows = apply_forwarded_spec(rows, forwarded_spec)
    boxes = []
    for start in range(0, len(rows), CHUNK_SIZE):
        chunk = rows[start : start + CHUNK_SIZE]
        n = len(chunk)
        cx = sum(r[0] for r in chunk) / n
        cy = sum(r[1] for r in chunk) / n
        cz = sum(r[2] for r in chunk) / n
        boxes.append(
            {
                "center": [cx, cy, cz],
                "dims": list(BOX_DIMS),
                "yaw": 0.0,
                "score": BOX_SCORE,
            }
        )
    return boxes


# ---------------------------------------------------------------------------
# server loop


def serve(args, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout

    def reply(obj) -> None:
        stdout.write(json.dumps(obj) + "\n")
        stdout.flush()

    echo_boxes = DEFAULT_ECHO_BOXES
    if args.boxes:
        with open(args.boxes, encoding="utf-8") as fh:
            echo_boxes = json.load(fh)

    handshaken = False
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request is not an object")
        except ValueError as exc:
            reply({"error": f"malformed request: {exc}"})
            continue
        if "cootest_protocol" in request:
            if request["cootest_protocol"] != PROTOCOL_VERSION:
                reply({"ok": False, "error": "unsupported protocol version"})
            else:
                handshaken = True
                reply({"ok": True, "detector_id": args.detector_id})
            continue
        if not handshaken:
            reply({"error": "handshake required before scene requests"})
            continue
        if "scene" not in request:
            reply({"error": "request has no scene"})
            continue
        try:
            if args.mode == "echo":
                boxes = echo_boxes
            else:
                boxes = detect_centroids(request["scene"], request.get("forwarded_spec"))
            reply({"boxes": boxes})
        except (KeyError, TypeError, ValueError, StopIteration) as exc:
            reply({"error": f"bad scene request: {exc}"})
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--mode", choices=("echo", "centroid"), default="centroid")
    parser.add_argument("--detector-id", default=None)
    parser.add_argument("--boxes", default=None, help="JSON box list for echo mode")
    args = parser.parse_args(argv)
    if args.detector_id is None:
        args.detector_id = f"reference-adapter-{args.mode}"
    return serve(args)


if __name__ == "__main__":
    sys.exit(main())
