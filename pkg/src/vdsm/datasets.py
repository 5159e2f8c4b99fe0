"""Procedural sequence datasets, IDX ingestion and the on-disk dataset format.

Ground-truth labels ride along with every sequence for evaluation; the
trainer only ever sees ``SequenceDataset.frames``.

Dataset file layout (all integers little-endian)::

    b"VDSD"            magic
    u32                format version (1)
    u32 x 5            count, seq_len, channels, height, width
    i32 x count        identity labels
    i32 x count        action labels
    u8  x (count*T*C*H*W)  pixels, quantized as round(255 * value)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

DATASET_MAGIC = b"VDSD"
DATASET_VERSION = 1

PENDULUM_PALETTE = [
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
    ("magenta", (1.0, 0.0, 1.0)),
    ("cyan", (0.0, 1.0, 1.0)),
    ("white", (1.0, 1.0, 1.0)),
]
SLOW = 2 * math.pi / 16
FAST = 2 * math.pi / 8
AMPLITUDE = math.radians(45.0)
MOTIONS = ("horizontal", "vertical", "diagonal", "circular")


class DatasetFormatError(ValueError):
    pass


class IdxFormatError(DatasetFormatError):
    pass


@dataclass
class LabeledSequence:
    frames: np.ndarray  # (T, C, H, W) in [0, 1]
    identity: int
    action: int
    state: Optional[np.ndarray] = None  # ground-truth pose per frame


@dataclass
class SequenceDataset:
    frames: np.ndarray  # (N, T, C, H, W) float32
    identity: np.ndarray  # (N,)
    action: np.ndarray  # (N,)
    identity_names: List[str] = field(default_factory=list)
    action_names: List[str] = field(default_factory=list)
    name: str = "custom"

    def __len__(self):
        return len(self.frames)

    @classmethod
    def from_sequences(cls, seqs: Sequence[LabeledSequence], **kw) -> "SequenceDataset":
        return cls(
            np.stack([s.frames for s in seqs]).astype(np.float32),
            np.array([s.identity for s in seqs], dtype=np.int64),
            np.array([s.action for s in seqs], dtype=np.int64),
            **kw,
        )

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx)
        return SequenceDataset(
            self.frames[idx], self.identity[idx], self.action[idx],
            self.identity_names, self.action_names, self.name,
        )

    def manifest(self) -> dict:
        return {
            "set": self.name,
            "count": len(self),
            "seq_len": int(self.frames.shape[1]),
            "frame_shape": list(self.frames.shape[2:]),
            "identities": self.identity_names,
            "actions": self.action_names,
        }


# -- rasterization ------------------------------------------------------------


def _pixel_grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="xy")  # x, y of pixel centres


def _coverage(dist: np.ndarray, radius: float) -> np.ndarray:
    # one-pixel linear falloff across the edge
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def pendulum_geometry(size: int):
    pivot = (size / 2.0, size * 0.2)
    return pivot, size * 0.55, size * 0.1


def render_pendulum(angle: float, color: Sequence[float], size: int = 32) -> np.ndarray:
    """Rod and bob hanging from a fixed pivot at ``angle`` radians from vertical -> (3, H, W)."""
    (px, py), length, bob_r = pendulum_geometry(size)
    bx, by = px + length * math.sin(angle), py + length * math.cos(angle)
    x, y = _pixel_grid(size)

    # distance to the rod segment
    dx, dy = bx - px, by - py
    t = np.clip(((x - px) * dx + (y - py) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    rod = _coverage(np.hypot(x - (px + t * dx), y - (py + t * dy)), 0.6)
    bob = _coverage(np.hypot(x - bx, y - by), bob_r)
    mask = np.maximum(rod, bob)
    return (np.asarray(color, dtype=np.float64)[:, None, None] * mask[None]).astype(np.float32)


def pendulum_colors(n_colors: int) -> List[Tuple[str, Tuple[float, float, float]]]:
    if n_colors <= len(PENDULUM_PALETTE):
        return PENDULUM_PALETTE[:n_colors]
    import colorsys

    return [(f"hue{k}", colorsys.hsv_to_rgb(k / n_colors, 1.0, 1.0)) for k in range(n_colors)]


def _balanced_labels(count: int, n_id: int, n_act: int, rng: np.random.Generator):
    k = np.arange(count)
    ident, act = k % n_id, (k // n_id) % n_act
    order = rng.permutation(count)
    return ident[order], act[order]


def gen_pendulum(
    n_colors: int = 7,
    speeds: Sequence[float] = (SLOW, FAST),
    T: int = 16,
    count: int = 200,
    seed: int = 0,
    size: int = 32,
    amplitude: float = AMPLITUDE,
) -> List[LabeledSequence]:
    """Colored pendula swinging as theta(t) = amplitude * sin(omega * t + phase).

    Identity is the color index, action the index into ``speeds`` (angular
    frequencies in radians per frame). Labels are balanced; phases are uniform.
    """
    if n_colors < 2 or len(speeds) < 1 or T < 2 or count < 1:
        raise ValueError("need n_colors >= 2, at least one speed, T >= 2 and count >= 1")
    rng = np.random.default_rng(seed)
    colors = pendulum_colors(n_colors)
    ident, act = _balanced_labels(count, n_colors, len(speeds), rng)
    phases = rng.uniform(0.0, 2 * math.pi, size=count)
    out = []
    for i in range(count):
        omega = speeds[act[i]]
        angles = amplitude * np.sin(omega * np.arange(T) + phases[i])
        frames = np.stack([render_pendulum(a, colors[ident[i]][1], size) for a in angles])
        out.append(LabeledSequence(frames, int(ident[i]), int(act[i]), angles))
    return out


def _disk(g, r):
    x, y = _pixel_grid(g)
    return _coverage(np.hypot(x - g / 2, y - g / 2), r)


def make_glyphs(n_shapes: int, g: int = 10) -> np.ndarray:
    """Procedural grayscale glyphs (n, g, g) in [0, 1]."""
    x, y = _pixel_grid(g)
    cx = cy = g / 2
    m = g * 0.4
    bar = g * 0.15
    adx, ady = np.abs(x - cx), np.abs(y - cy)
    shapes = [
        np.clip(m + 0.5 - np.maximum(adx, ady), 0, 1),  # square
        _disk(g, m),  # disc
        np.maximum(_coverage(adx, bar), _coverage(ady, bar)) * (np.maximum(adx, ady) <= m + 0.5),  # plus
        np.clip(m + 0.5 - (adx + ady), 0, 1),  # diamond
        np.clip(_disk(g, m) - _disk(g, m * 0.5), 0, 1),  # ring
        np.clip(m + 0.5 - np.maximum(adx, ady), 0, 1) - np.clip(m * 0.45 + 0.5 - np.maximum(adx, ady), 0, 1),  # frame
        np.maximum(_coverage(np.abs((x - cx) - (y - cy)) / math.sqrt(2), bar),
                   _coverage(np.abs((x - cx) + (y - cy)) / math.sqrt(2), bar)) * (np.maximum(adx, ady) <= m + 0.5),  # x
        np.clip(np.minimum(m + 0.5 - ady, (y - (cy - m)) * 0.5 + 0.5 - adx), 0, 1),  # triangle
    ]
    if n_shapes > len(shapes):
        raise ValueError(f"at most {len(shapes)} procedural glyphs are available")
    return np.stack(shapes[:n_shapes]).astype(np.float32)


def reflect(u, limit: float):
    """Fold an unbounded coordinate into [0, limit] by mirror reflection."""
    if limit <= 0:
        return np.zeros_like(np.asarray(u, dtype=float))
    r = np.mod(u, 2 * limit)
    return limit - np.abs(r - limit)


def shape_positions(motion: int, start, velocity: float, T: int, limit: float, phase: float = 0.0) -> np.ndarray:
    """Top-left glyph positions (T, 2) as (x, y) for one of the four motion patterns."""
    t = np.arange(T, dtype=float)
    x0, y0 = start
    name = MOTIONS[motion]
    if name == "horizontal":
        return np.stack([reflect(x0 + velocity * t, limit), np.full(T, float(y0))], 1)
    if name == "vertical":
        return np.stack([np.full(T, float(x0)), reflect(y0 + velocity * t, limit)], 1)
    if name == "diagonal":
        return np.stack([reflect(x0 + velocity * t, limit), reflect(y0 + velocity * t, limit)], 1)
    # circle around the frame centre, radius fixed by the free space
    r = limit / 2.0 * 0.8
    omega = velocity / max(r, 1e-9)
    return np.stack([limit / 2 + r * np.cos(omega * t + phase), limit / 2 + r * np.sin(omega * t + phase)], 1)


def place_glyph(glyph: np.ndarray, pos, size: int) -> np.ndarray:
    frame = np.zeros((size, size), dtype=np.float32)
    g = glyph.shape[0]
    x, y = (int(round(v)) for v in pos)
    frame[y : y + g, x : x + g] = glyph[: size - y, : size - x]
    return frame


def gen_moving_shapes(
    n_shapes: int = 4,
    n_motions: int = 4,
    T: int = 16,
    count: int = 200,
    seed: int = 0,
    size: int = 32,
    glyphs: Optional[np.ndarray] = None,
) -> List[LabeledSequence]:
    """A glyph (identity) translating along a motion pattern (action), grayscale.

    ``glyphs`` may supply real images (e.g. digits from an IDX file); by
    default procedural glyphs are drawn.
    """
    if n_shapes < 2 or not 1 <= n_motions <= len(MOTIONS) or T < 2 or count < 1:
        raise ValueError("need n_shapes >= 2, 1 <= n_motions <= 4, T >= 2 and count >= 1")
    if glyphs is None:
        glyphs = make_glyphs(n_shapes, max(4, size * 10 // 32))
    elif len(glyphs) < n_shapes:
        raise ValueError(f"{len(glyphs)} glyphs supplied for {n_shapes} shapes")
    g = glyphs.shape[1]
    limit = float(size - g)
    rng = np.random.default_rng(seed)
    ident, act = _balanced_labels(count, n_shapes, n_motions, rng)
    out = []
    for i in range(count):
        start = rng.uniform(0, limit, size=2)
        speed = rng.uniform(1.5, 3.0) * rng.choice([-1.0, 1.0])
        phase = rng.uniform(0, 2 * math.pi)
        pos = shape_positions(int(act[i]), start, speed, T, limit, phase)
        frames = np.stack([place_glyph(glyphs[ident[i]], p, size) for p in pos])[:, None]
        out.append(LabeledSequence(frames, int(ident[i]), int(act[i]), pos))
    return out


def make_dataset(name: str, count: int, seed: int, T: int = 16, size: int = 32) -> SequenceDataset:
    if name == "pendulum":
        seqs = gen_pendulum(T=T, count=count, seed=seed, size=size)
        return SequenceDataset.from_sequences(
            seqs, identity_names=[c for c, _ in pendulum_colors(7)], action_names=["slow", "fast"], name=name
        )
    if name == "shapes":
        seqs = gen_moving_shapes(T=T, count=count, seed=seed, size=size)
        names = ["square", "disc", "plus", "diamond"]
        return SequenceDataset.from_sequences(seqs, identity_names=names, action_names=list(MOTIONS), name=name)
    raise ValueError(f"unknown dataset {name!r} (choose pendulum or shapes)")


# -- identity grouping ----------------------------------------------------------


@dataclass
class IdentityBatch:
    group: int
    frames: np.ndarray  # (n, C, H, W)


def identity_batches(frames: np.ndarray, batch_size: int, seed: int, epoch: int = 0) -> Iterator[IdentityBatch]:
    """Frame batches drawn from a single identity group each.

    Groups are sequences (membership only, no labels). Group order and the
    frame order inside each group are shuffled per (seed, epoch); across one
    call every frame is yielded exactly once.
    """
    if len(frames) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng([seed, epoch])
    for g in rng.permutation(len(frames)):
        order = rng.permutation(frames.shape[1])
        for k in range(0, len(order), batch_size):
            yield IdentityBatch(int(g), frames[g, np.sort(order[k : k + batch_size])])


# -- persistence ------------------------------------------------------------------


def save_dataset(ds: SequenceDataset, path) -> None:
    path = Path(path)
    n, t, c, h, w = ds.frames.shape
    pixels = np.rint(np.clip(ds.frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<6I", DATASET_VERSION, n, t, c, h, w))
        f.write(ds.identity.astype("<i4").tobytes())
        f.write(ds.action.astype("<i4").tobytes())
        f.write(pixels.tobytes())
    manifest = path.with_suffix(".json")
    manifest.write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file")
    if len(raw) < 28:
        raise DatasetFormatError(f"{path}: truncated header")
    version, n, t, c, h, w = struct.unpack_from("<6I", raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    off = 28
    need = off + 8 * n + n * t * c * h * w
    if len(raw) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    ident = np.frombuffer(raw, "<i4", n, off).astype(np.int64)
    act = np.frombuffer(raw, "<i4", n, off + 4 * n).astype(np.int64)
    pixels = np.frombuffer(raw, np.uint8, n * t * c * h * w, off + 8 * n)
    frames = (pixels.astype(np.float32) / 255.0).reshape(n, t, c, h, w)
    meta = {}
    manifest = path.with_suffix(".json")
    if manifest.exists():
        meta = json.loads(manifest.read_text())
    return SequenceDataset(
        frames, ident, act, meta.get("identities", []), meta.get("actions", []), meta.get("set", "custom")
    )


def load_idx(path) -> np.ndarray:
    """Read an IDX file: images (magic 0x803) scaled to [0, 1], labels (0x801) as ints."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in (0x00000803, 0x00000801):
        raise IdxFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    off = 4 + 4 * ndim
    n = int(np.prod(dims))
    if len(raw) - off < n:
        raise IdxFormatError(f"{path}: truncated IDX payload ({len(raw) - off} of {n} bytes)")
    data = np.frombuffer(raw, np.uint8, n, off).reshape(dims)
    if ndim == 1:
        return data.astype(np.int64)
    return data.astype(np.float32) / 255.0
