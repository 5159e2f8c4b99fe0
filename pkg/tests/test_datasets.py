import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdsm.datasets import (
    FAST,
    MOTIONS,
    PENDULUM_PALETTE,
    SLOW,
    DatasetFormatError,
    IdxFormatError,
    gen_moving_shapes,
    gen_pendulum,
    identity_batches,
    load_dataset,
    load_idx,
    make_dataset,
    make_glyphs,
    pendulum_geometry,
    place_glyph,
    reflect,
    render_pendulum,
    save_dataset,
    shape_positions,
)

# -- pendulum ----------------------------------------------------------------


def test_frames_match_direct_rasterization():
    seqs = gen_pendulum(T=6, count=5, seed=3, size=16)
    for s in seqs:
        color = PENDULUM_PALETTE[s.identity][1]
        for t in range(6):
            assert np.array_equal(s.frames[t], render_pendulum(s.state[t], color, 16))


def test_pendulum_deterministic_and_labels_constant():
    a = gen_pendulum(T=4, count=10, seed=1, size=16)
    b = gen_pendulum(T=4, count=10, seed=1, size=16)
    for x, y in zip(a, b):
        assert np.array_equal(x.frames, y.frames) and (x.identity, x.action) == (y.identity, y.action)
    c = gen_pendulum(T=4, count=10, seed=2, size=16)
    assert any(not np.array_equal(x.frames, y.frames) for x, y in zip(a, c))


def _zero_crossings(signal):
    """Upward zero crossings, linearly interpolated between frames."""
    out = []
    for t in range(len(signal) - 1):
        a, b = signal[t], signal[t + 1]
        if a < 0 <= b:
            out.append(t + a / (a - b))
    return np.array(out)


@pytest.mark.parametrize("omega, period", [(SLOW, 16), (FAST, 8)])
def test_centroid_period_tracks_angular_frequency(omega, period):
    size = 32
    (px, _), _, _ = pendulum_geometry(size)
    angles = math.radians(45) * np.sin(omega * np.arange(80) + 0.3)
    xs = np.arange(size) + 0.5
    cx = []
    for a in angles:
        mass = render_pendulum(a, (1, 1, 1), size)[0]
        cx.append((mass.sum(0) * xs).sum() / mass.sum() - px)
    crossings = _zero_crossings(np.array(cx))
    assert len(crossings) >= 3
    assert abs(np.diff(crossings).mean() - period) < 1.0


def test_color_recoverable_from_single_frame_histogram():
    ds = make_dataset("pendulum", 28, seed=0, T=3, size=16)
    palette = np.array([c for _, c in PENDULUM_PALETTE])
    for frames, ident in zip(ds.frames, ds.identity):
        f = frames[np.random.default_rng(int(ident)).integers(3)]
        hist = f.reshape(3, -1).sum(1)
        guess = np.argmin(np.abs(palette - hist / hist.max()).sum(1))
        assert guess == ident


def test_pendulum_balanced_and_in_range():
    ds = make_dataset("pendulum", 28, seed=4, T=3, size=16)
    assert ds.frames.min() >= 0 and ds.frames.max() <= 1
    assert sorted(np.bincount(ds.identity)) == [4] * 7
    assert sorted(np.bincount(ds.action)) == [14, 14]
    assert ds.manifest()["identities"][0] == "red" and ds.manifest()["actions"] == ["slow", "fast"]


@pytest.mark.parametrize("kw", [{"n_colors": 1}, {"T": 1}, {"count": 0}, {"speeds": ()}])
def test_pendulum_invalid_counts(kw):
    with pytest.raises(ValueError):
        gen_pendulum(**kw)


# -- moving shapes -------------------------------------------------------------------


def _simulate_bounce(p0, v, T, limit):
    """Step-by-step mirror bounce, the reference for the closed-form fold."""
    p, out = p0, []
    for _ in range(T):
        out.append(p)
        p += v
        while p < 0 or p > limit:
            p = -p if p < 0 else 2 * limit - p
            v = -v
    return np.array(out)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 22), st.floats(-3, 3), st.integers(0, 2))
def test_linear_motions_match_stepwise_reflection(p0, v, motion):
    limit, T = 22.0, 40
    pos = shape_positions(motion, (p0, p0), v, T, limit)
    ref = _simulate_bounce(p0, v, T, limit)
    if MOTIONS[motion] in ("horizontal", "diagonal"):
        assert np.abs(pos[:, 0] - ref).max() < 1e-9
    if MOTIONS[motion] in ("vertical", "diagonal"):
        assert np.abs(pos[:, 1] - ref).max() < 1e-9


def test_circular_motion_closed_form():
    limit, v, phase = 20.0, 2.0, 0.7
    pos = shape_positions(3, (0, 0), v, 12, limit, phase)
    r = 0.4 * limit
    for t, (x, y) in enumerate(pos):
        assert x == pytest.approx(limit / 2 + r * math.cos(v / r * t + phase), abs=1e-12)
        assert y == pytest.approx(limit / 2 + r * math.sin(v / r * t + phase), abs=1e-12)


def test_positions_stay_inside_frame():
    seqs = gen_moving_shapes(T=30, count=40, seed=5, size=32)
    g = make_glyphs(4, 10).shape[1]
    for s in seqs:
        assert s.state.min() >= 0 and s.state.max() <= 32 - g


def test_glyph_mass_conserved_when_inside():
    glyphs = make_glyphs(8, 10)
    for glyph in glyphs:
        for pos in [(0, 0), (3.4, 7.6), (22, 22)]:
            frame = place_glyph(glyph, pos, 32)
            assert abs(frame.sum() - glyph.sum()) <= 0.02 * glyph.sum()


def test_shapes_contract():
    seqs = gen_moving_shapes(T=5, count=16, seed=0, size=32)
    assert seqs[0].frames.shape == (5, 1, 32, 32)
    assert all(0 <= s.frames.min() and s.frames.max() <= 1 for s in seqs)
    assert sorted(np.bincount([s.identity for s in seqs])) == [4] * 4
    again = gen_moving_shapes(T=5, count=16, seed=0, size=32)
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(seqs, again))
    with pytest.raises(ValueError):
        gen_moving_shapes(n_motions=5)
    with pytest.raises(ValueError):
        make_glyphs(9)


def test_reflect_degenerate_limit():
    assert np.all(reflect(np.array([3.0, -2.0]), 0.0) == 0.0)


def test_make_dataset_unknown():
    with pytest.raises(ValueError):
        make_dataset("sprites", 4, 0)


# -- grouping -----------------------------------------------------------------


def test_identity_batches_partition_and_determinism():
    frames = np.arange(5 * 6).reshape(5, 6, 1, 1, 1).astype(np.float32)
    batches = list(identity_batches(frames, 4, seed=3, epoch=1))
    seen = []
    for b in batches:
        # every frame value encodes its own group: value // 6
        assert np.all(b.frames.ravel() // 6 == b.group)
        seen.extend(b.frames.ravel().tolist())
    assert sorted(seen) == list(range(30))
    again = list(identity_batches(frames, 4, seed=3, epoch=1))
    assert [b.group for b in again] == [b.group for b in batches]
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(batches, again))
    other = list(identity_batches(frames, 4, seed=3, epoch=2))
    assert [b.group for b in other] != [b.group for b in batches] or any(
        not np.array_equal(a.frames, b.frames) for a, b in zip(batches, other)
    )
    with pytest.raises(ValueError):
        list(identity_batches(frames[:0], 4, 0))


# -- files --------------------------------------------------------------------


def test_dataset_file_round_trip_and_determinism(tmp_path):
    ds = make_dataset("pendulum", 14, seed=7, T=3, size=8)
    save_dataset(ds, tmp_path / "a.vdsd")
    save_dataset(make_dataset("pendulum", 14, seed=7, T=3, size=8), tmp_path / "b.vdsd")
    assert (tmp_path / "a.vdsd").read_bytes() == (tmp_path / "b.vdsd").read_bytes()
    back = load_dataset(tmp_path / "a.vdsd")
    assert np.abs(back.frames - ds.frames).max() <= 0.5 / 255 + 1e-7
    assert np.array_equal(back.identity, ds.identity) and back.identity_names == ds.identity_names
    raw = (tmp_path / "a.vdsd").read_bytes()
    (tmp_path / "c.vdsd").write_bytes(raw[:-1])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "c.vdsd")
    (tmp_path / "d.vdsd").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "d.vdsd")


def test_idx_hand_built_fixture(tmp_path):
    pixels = np.arange(32, dtype=np.uint8).reshape(2, 4, 4) * 8
    raw = struct.pack(">I", 0x803) + struct.pack(">3I", 2, 4, 4) + pixels.tobytes()
    (tmp_path / "img.idx").write_bytes(raw)
    imgs = load_idx(tmp_path / "img.idx")
    assert imgs.shape == (2, 4, 4)
    assert np.array_equal(imgs, pixels.astype(np.float32) / 255.0)
    (tmp_path / "lab.idx").write_bytes(struct.pack(">I", 0x801) + struct.pack(">I", 3) + bytes([7, 0, 9]))
    assert load_idx(tmp_path / "lab.idx").tolist() == [7, 0, 9]


@pytest.mark.parametrize(
    "raw",
    [b"", struct.pack(">I", 0x803), struct.pack(">I", 0x0803) + struct.pack(">3I", 2, 4, 4) + bytes(31)],
)
def test_idx_truncation(tmp_path, raw):
    (tmp_path / "t.idx").write_bytes(raw)
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(tmp_path / "t.idx")


def test_idx_bad_magic(tmp_path):
    (tmp_path / "m.idx").write_bytes(struct.pack(">I", 0x804) + bytes(8))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(tmp_path / "m.idx")


def test_idx_glyphs_feed_shapes(tmp_path):
    digits = (np.random.default_rng(0).random((4, 8, 8)) * 255).astype(np.uint8)
    (tmp_path / "d.idx").write_bytes(struct.pack(">I", 0x803) + struct.pack(">3I", 4, 8, 8) + digits.tobytes())
    seqs = gen_moving_shapes(T=3, count=8, seed=0, size=16, glyphs=load_idx(tmp_path / "d.idx"))
    assert seqs[0].frames.shape == (3, 1, 16, 16)
