"""Synthetic segmentation videos: textured shapes drifting over a textured background.

Frames are float32 in [0, 1] with shape (T, H, W, 3); masks are float32 in
{0, 1} with shape (T, K, H, W) for K objects. Later objects are painted over
earlier ones, and each object's mask only keeps its visible pixels, so masks
are disjoint.

Pixel intensity is ``level + texture + tint`` where the background sits at
0.5 - polarity*0.25*contrast, objects at 0.5 + polarity*0.25*contrast, and the
value-noise texture spans +-0.2. At contrast 1 the foreground and background
ranges are separated by a 0.1 gap; at low contrast they overlap, which is what
produces ambiguous (hard) regions.
"""

from __future__ import annotations

import io
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serial

SHAPES = ("disc", "square", "triangle")
TRAJECTORIES = ("linear", "sinusoidal")
TEXTURE_AMPLITUDE = 0.2
TINT_AMPLITUDE = 0.03
DATASET_VERSION = 1
MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class ObjectSpec:
    shape: str = "disc"
    size: float = 8.0  # disc radius, half side of square, circumradius of triangle
    trajectory: str = "linear"
    velocity: tuple[float, float] = (1.0, 0.5)  # pixels/frame (dy, dx)
    start: tuple[float, float] | None = None  # centre at t=0; None = frame centre
    amplitude: float = 6.0  # sinusoidal only, pixels

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectSpec, ...] = (ObjectSpec(),)
    contrast: float = 1.0
    noise: float = 0.0
    polarity: int = 1  # +1: objects brighter than background, -1: darker
    texture_cells: int = 8

    def __post_init__(self):
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        if not 0.0 <= self.contrast <= 1.0:
            raise ValueError("contrast must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        if self.polarity not in (-1, 1):
            raise ValueError("polarity must be +1 or -1")


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, H, W, 3) float32
    masks: np.ndarray  # (T, K, H, W) float32 in {0, 1}
    seed: int = 0
    vid: str = "video"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.masks.ndim != 4 or self.masks.shape[0] != self.frames.shape[0]:
            raise ValueError(f"masks must be (T, K, H, W) matching frames, got {self.masks.shape}")
        if self.masks.shape[2:] != self.frames.shape[1:3]:
            raise ValueError("mask and frame resolutions differ")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    @property
    def object_count(self) -> int:
        return self.masks.shape[1]

    def with_first_frame(self, frame: np.ndarray) -> VideoSequence:
        frames = self.frames.copy()
        frames[0] = frame
        return VideoSequence(frames, self.masks, self.seed, self.vid, dict(self.meta))


# -- rendering ---------------------------------------------------------------
def value_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Uniform noise on a coarse lattice, bilinearly smoothed to (h, w), values in [0, 1]."""
    lattice = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    rows = np.stack([np.interp(xs, np.arange(cells + 1), lattice[i]) for i in range(cells + 1)])
    return np.stack([np.interp(ys, np.arange(cells + 1), rows[:, j]) for j in range(w)], axis=1)


def shape_mask(kind: str, cy: float, cx: float, size: float, h: int, w: int, offset: int = 0) -> np.ndarray:
    """Binary footprint evaluated at pixel centres; ``offset`` extends the canvas on every side."""
    yy, xx = np.mgrid[-offset : h + offset, -offset : w + offset].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= size * size
    if kind == "square":
        return (np.abs(dy) <= size) & (np.abs(dx) <= size)
    # upward equilateral triangle with circumradius ``size``
    inside = dy <= size / 2
    inside &= np.sqrt(3) * dx + dy >= -size
    inside &= -np.sqrt(3) * dx + dy >= -size
    return inside


def centre(obj: ObjectSpec, t: int, h: int, w: int) -> tuple[float, float]:
    sy, sx = obj.start if obj.start is not None else ((h - 1) / 2, (w - 1) / 2)
    vy, vx = obj.velocity
    if obj.trajectory == "linear":
        return sy + vy * t, sx + vx * t
    phase = 2 * np.pi * t / 8.0
    return sy + vy * t + obj.amplitude * np.sin(phase), sx + vx * t + obj.amplitude * np.cos(phase)


def _check_inside(obj: ObjectSpec, h: int, w: int, T: int) -> None:
    pad = int(np.ceil(obj.size)) + 2
    for t in range(T):
        cy, cx = centre(obj, t, h, w)
        reach = pad + int(max(abs(cy), abs(cx), abs(cy - h), abs(cx - w)))
        full = shape_mask(obj.shape, cy, cx, obj.size, h, w, offset=reach)
        inner = shape_mask(obj.shape, cy, cx, obj.size, h, w).sum()
        if full.sum() == 0 or inner < 0.5 * full.sum():
            raise ValueError(f"object leaves the frame at t={t} (visible {inner} of {int(full.sum())} pixels)")


def generate(spec: SceneSpec, H: int = 64, W: int = 64, T: int = 8, seed: int = 0) -> VideoSequence:
    """Render one video; the output is a pure function of (spec, H, W, T, seed)."""
    if H < 32 or W < 32:
        raise ValueError(f"frames must be at least 32x32, got {H}x{W}")
    if T < 3:
        raise ValueError(f"need T >= 3 frames, got {T}")
    for obj in spec.objects:
        _check_inside(obj, H, W, T)

    rng = np.random.default_rng(seed)
    tint = rng.uniform(-TINT_AMPLITUDE, TINT_AMPLITUDE, size=3)
    bg_tex = value_noise(rng, H, W, spec.texture_cells) - 0.5
    pad = max(H, W)
    obj_tex = [value_noise(rng, H + 2 * pad, W + 2 * pad, spec.texture_cells * 3) - 0.5 for _ in spec.objects]

    bg_level = 0.5 - spec.polarity * 0.25 * spec.contrast
    fg_level = 0.5 + spec.polarity * 0.25 * spec.contrast
    frames = np.empty((T, H, W, 3), dtype=np.float32)
    masks = np.zeros((T, len(spec.objects), H, W), dtype=np.float32)
    for t in range(T):
        img = bg_level + 2 * TEXTURE_AMPLITUDE * bg_tex
        covered = np.zeros((H, W), dtype=bool)
        footprints = []
        for k, obj in enumerate(spec.objects):
            cy, cx = centre(obj, t, H, W)
            m = shape_mask(obj.shape, cy, cx, obj.size, H, W)
            # texture is attached to the object and travels with it
            oy, ox = int(round(cy - (H - 1) / 2)), int(round(cx - (W - 1) / 2))
            tex = obj_tex[k][pad - oy : pad - oy + H, pad - ox : pad - ox + W]
            img = np.where(m, fg_level + 2 * TEXTURE_AMPLITUDE * tex, img)
            footprints.append(m)
        # later objects occlude earlier ones
        for k in reversed(range(len(spec.objects))):
            visible = footprints[k] & ~covered
            masks[t, k] = visible
            covered |= footprints[k]
        rgb = img[..., None] + tint
        if spec.noise > 0:
            rgb = rgb + rng.normal(0.0, spec.noise, size=rgb.shape)
        frames[t] = np.clip(rgb, 0.0, 1.0)
    return VideoSequence(frames, masks, seed=seed, meta={"contrast": spec.contrast, "noise": spec.noise})


def sample_spec(
    rng: np.random.Generator,
    H: int,
    W: int,
    T: int,
    object_count: int = 1,
    contrast: tuple[float, float] = (0.35, 0.8),
    noise: tuple[float, float] = (0.0, 0.03),
) -> SceneSpec:
    """Draw a random scene whose trajectories stay inside the frame."""
    objects = []
    for _ in range(object_count):
        kind = SHAPES[rng.integers(len(SHAPES))]
        size = float(rng.uniform(8.0, 13.0))
        traj = TRAJECTORIES[rng.integers(len(TRAJECTORIES))]
        amp = float(rng.uniform(1.0, 3.0)) if traj == "sinusoidal" else 0.0
        speed = float(rng.uniform(0.5, 2.0))
        ang = rng.uniform(0, 2 * np.pi)
        vel = (speed * np.sin(ang), speed * np.cos(ang))
        margin = size + amp + 1
        # choose a start so start and end both stay well inside
        lo_y = max(margin, margin - vel[0] * (T - 1))
        hi_y = min(H - 1 - margin, H - 1 - margin - vel[0] * (T - 1))
        lo_x = max(margin, margin - vel[1] * (T - 1))
        hi_x = min(W - 1 - margin, W - 1 - margin - vel[1] * (T - 1))
        if lo_y > hi_y or lo_x > hi_x:
            vel = (0.0, 0.0)
            lo_y, hi_y, lo_x, hi_x = margin, H - 1 - margin, margin, W - 1 - margin
        start = (float(rng.uniform(lo_y, hi_y)), float(rng.uniform(lo_x, hi_x)))
        objects.append(ObjectSpec(kind, size, traj, vel, start, amp))
    return SceneSpec(
        objects=tuple(objects),
        polarity=int(rng.choice([-1, 1])),
        contrast=float(rng.uniform(*contrast)),
        noise=float(rng.uniform(*noise)),
    )


def make_dataset(
    count: int,
    seed: int,
    H: int = 64,
    W: int = 64,
    T: int = 8,
    object_counts: tuple[int, ...] = (1,),
    contrast: tuple[float, float] = (0.35, 0.8),
    noise: tuple[float, float] = (0.0, 0.03),
    prefix: str = "vid",
) -> list[VideoSequence]:
    videos = []
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        k = int(object_counts[i % len(object_counts)])
        spec = sample_spec(rng, H, W, T, k, contrast, noise)
        vid = generate(spec, H, W, T, int(s) & 0x7FFFFFFFFFFFFFFF)
        vid.vid = f"{prefix}{i:04d}"
        videos.append(vid)
    return videos


# -- on-disk format --------------------------------------------------------------
def _video_payload(v: VideoSequence) -> bytes:
    parts = [serial.tensor_bytes(v.frames[t]) for t in range(v.T)]
    parts += [serial.tensor_bytes(v.masks[t, k]) for t in range(v.T) for k in range(v.object_count)]
    return b"".join(parts)


def save_dataset(videos, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"# ara-vos dataset version {DATASET_VERSION}", "# id H W T object_count seed crc32"]
    for v in videos:
        payload = _video_payload(v)
        (path / f"{v.vid}.bin").write_bytes(payload)
        crc = zlib.crc32(payload) & 0xFFFFFFFF
        lines.append(f"{v.vid} {v.H} {v.W} {v.T} {v.object_count} {v.seed} {crc:08x}")
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / MANIFEST)


def load_dataset(path) -> list[VideoSequence]:
    path = Path(path)
    text = (path / MANIFEST).read_text().splitlines()
    if not text or not text[0].startswith("# ara-vos dataset version"):
        raise serial.FormatError(f"{path / MANIFEST}: missing dataset header")
    version = int(text[0].rsplit(" ", 1)[1])
    if version != DATASET_VERSION:
        raise serial.VersionError(f"dataset version {version}, expected {DATASET_VERSION}")
    videos = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise serial.FormatError(f"{MANIFEST}:{lineno}: expected 7 fields, got {len(fields)}")
        vid, h, w, t, k, seed, crc = fields
        h, w, t, k = int(h), int(w), int(t), int(k)
        payload = (path / f"{vid}.bin").read_bytes()
        expected = (t * h * w * 3 + t * k * h * w) * 4 + t * (4 + 8 + 12) + t * k * (4 + 8 + 8)
        if len(payload) < expected:
            raise serial.TruncatedError(f"{vid}.bin: {len(payload)} bytes, expected {expected}")
        if zlib.crc32(payload) & 0xFFFFFFFF != int(crc, 16):
            raise serial.ChecksumError(f"{vid}.bin: CRC32 mismatch")
        fh = io.BytesIO(payload)
        frames = np.stack([serial.read_tensor(fh) for _ in range(t)])
        masks = np.stack([np.stack([serial.read_tensor(fh) for _ in range(k)]) for _ in range(t)])
        if frames.shape != (t, h, w, 3):
            raise serial.FormatError(f"{vid}.bin: frame shape {frames.shape} disagrees with manifest")
        videos.append(VideoSequence(frames, masks, seed=int(seed), vid=vid))
    return videos
