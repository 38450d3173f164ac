"""Episode container and binary dataset storage.

A dataset file holds many episodes behind an offset table, so single
episodes load without reading the whole file.  All values are little
endian; depth images are float32 and color images are 8-bit, everything
else is float64.  Writing is fully deterministic: identical episodes
produce identical bytes.

Fall episodes have no pusher; their pusher track and actions are stored
as NaN and zeros and `has_pusher` is False.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from voxsim.errors import DataError

MAGIC = b"OESEP1\x00\x00"
PROTOCOLS = {"push": 0, "fall": 1}
PROTOCOL_NAMES = {v: k for k, v in PROTOCOLS.items()}


class Episode:
    """One simulated episode with everything needed for training.

    Fields
    ------
    protocol:   "push" or "fall"
    kinds:      list of body kind names, length N
    sizes:      [N] float64
    colors:     [N, 3] float64
    poses:      [T+1, N, 7] float64, position + wxyz quaternion
    pusher:     [T+1, 3] float64 rod center (z is the rod mid height);
                NaN rows when the episode has no pusher
    actions:    [T, 3] float64 commanded displacement per step (z zero)
    cam_origin: [T+1, V, 3] float64
    cam_rot:    [T+1, V, 3, 3] float64, columns right/down/forward
    depth:      [T+1, V, H, W] float32 camera-frame z, 0 at sky
    rgb:        [T+1, V, H, W, 3] uint8
    """

    __slots__ = ("protocol", "kinds", "sizes", "colors", "poses", "pusher",
                 "actions", "cam_origin", "cam_rot", "depth", "rgb")

    def __init__(self, protocol, kinds, sizes, colors, poses, pusher,
                 actions, cam_origin, cam_rot, depth, rgb):
        if protocol not in PROTOCOLS:
            raise DataError(f"unknown protocol: {protocol!r}")
        self.protocol = protocol
        self.kinds = list(kinds)
        self.sizes = np.asarray(sizes, dtype=np.float64)
        self.colors = np.asarray(colors, dtype=np.float64)
        self.poses = np.asarray(poses, dtype=np.float64)
        self.pusher = np.asarray(pusher, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.float64)
        self.cam_origin = np.asarray(cam_origin, dtype=np.float64)
        self.cam_rot = np.asarray(cam_rot, dtype=np.float64)
        self.depth = np.asarray(depth, dtype=np.float32)
        self.rgb = np.asarray(rgb, dtype=np.uint8)
        n, t1, v = len(self.kinds), self.poses.shape[0], self.depth.shape[1]
        if self.poses.shape != (t1, n, 7):
            raise DataError(f"poses shape {self.poses.shape} inconsistent")
        if self.pusher.shape != (t1, 3):
            raise DataError("pusher track must be [T+1, 3]")
        if self.actions.shape != (t1 - 1, 3):
            raise DataError("actions must be [T, 3]")
        if self.cam_origin.shape != (t1, v, 3) or self.cam_rot.shape != (t1, v, 3, 3):
            raise DataError("camera track shapes inconsistent")
        if self.rgb.shape != self.depth.shape + (3,):
            raise DataError("rgb and depth shapes inconsistent")

    @property
    def n_bodies(self):
        return len(self.kinds)

    @property
    def n_steps(self):
        return self.actions.shape[0]

    @property
    def n_views(self):
        return self.depth.shape[1]

    @property
    def has_pusher(self):
        return bool(np.all(np.isfinite(self.pusher)))


def _pack_episode(ep):
    from voxsim.sim.bodies import KIND_CODES
    parts = [struct.pack("<BBBB", PROTOCOLS[ep.protocol], ep.n_bodies,
                         ep.n_steps, ep.n_views)]
    parts.append(struct.pack("<HH", ep.depth.shape[2], ep.depth.shape[3]))
    parts.append(bytes(KIND_CODES[k] for k in ep.kinds))
    for arr, dt in ((ep.sizes, "<f8"), (ep.colors, "<f8"), (ep.poses, "<f8"),
                    (ep.pusher, "<f8"), (ep.actions, "<f8"),
                    (ep.cam_origin, "<f8"), (ep.cam_rot, "<f8"),
                    (ep.depth, "<f4"), (ep.rgb, "u1")):
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def _unpack_episode(buf):
    from voxsim.sim.bodies import KIND_NAMES
    off = 0
    proto, n, t, v = struct.unpack_from("<BBBB", buf, off)
    off += 4
    h, w = struct.unpack_from("<HH", buf, off)
    off += 4
    kinds = [KIND_NAMES[c] for c in buf[off:off + n]]
    off += n

    def take(shape, dt):
        nonlocal off
        dt = np.dtype(dt)
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
        off += count * dt.itemsize
        return arr.copy()

    sizes = take((n,), "<f8")
    colors = take((n, 3), "<f8")
    poses = take((t + 1, n, 7), "<f8")
    pusher = take((t + 1, 3), "<f8")
    actions = take((t, 3), "<f8")
    cam_origin = take((t + 1, v, 3), "<f8")
    cam_rot = take((t + 1, v, 3, 3), "<f8")
    depth = take((t + 1, v, h, w), "<f4")
    rgb = take((t + 1, v, h, w, 3), "u1")
    if off != len(buf):
        raise DataError("episode record has trailing bytes")
    return Episode(PROTOCOL_NAMES[proto], kinds, sizes, colors, poses,
                   pusher, actions, cam_origin, cam_rot, depth, rgb)


def save_episodes(path, episodes):
    """Write episodes to one file with an offset index."""
    episodes = list(episodes)
    blobs = [_pack_episode(ep) for ep in episodes]
    header = len(MAGIC) + 4 + 8 * len(blobs)
    offsets = []
    pos = header
    for b in blobs:
        offsets.append(pos)
        pos += len(b) + 8  # each record is length prefixed
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blobs)))
        for off in offsets:
            fh.write(struct.pack("<Q", off))
        for b in blobs:
            fh.write(struct.pack("<Q", len(b)))
            fh.write(b)


class EpisodeFile:
    """Random access reader over a saved dataset."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise DataError(f"{path}: not an episode file")
            (count,) = struct.unpack("<I", fh.read(4))
            self.offsets = list(struct.unpack(f"<{count}Q", fh.read(8 * count)))

    def __len__(self):
        return len(self.offsets)

    def load(self, index):
        if not 0 <= index < len(self.offsets):
            raise DataError(f"episode index {index} out of range")
        with open(self.path, "rb") as fh:
            fh.seek(self.offsets[index])
            (size,) = struct.unpack("<Q", fh.read(8))
            buf = fh.read(size)
        if len(buf) != size:
            raise DataError(f"{self.path}: truncated episode {index}")
        return _unpack_episode(buf)

    def load_all(self):
        return [self.load(i) for i in range(len(self))]


def load_episodes(path, indices=None):
    """Load some or all episodes from a dataset file."""
    f = EpisodeFile(path)
    if indices is None:
        return f.load_all()
    return [f.load(i) for i in indices]


def write_manifest(path, info):
    """Sorted-key JSON sidecar describing a dataset, no volatile fields."""
    with open(path, "w") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    if not os.path.exists(path):
        raise DataError(f"missing manifest: {path}")
    with open(path) as fh:
        return json.load(fh)
