"""Toy space-time memory segmenter and its trainer.

A shared key encoder maps any RGB frame (query or memory) to d-channel key
features at 1/4 resolution. A value encoder reads memory frames together with
their masks (4 input channels). Every query key pixel attends (softmax over
negative squared key distances) to all memory key pixels and reads out the
attention-weighted average of the memory values: the downsampled mask plus the
value features. The readout goes through two convolutions, a bilinear
upsample back to full resolution and a sigmoid. Optionally the query keys are
stacked onto the readout before decoding (``query_skip``).
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import serial
from .autodiff import Tensor
from .optim import Adam

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ARAM"
CKPT_VERSION = 1
STRIDE = 4
MEMORY_RECENT = 4


class ResolutionError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def kaiming(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class VosParams:
    """Named conv weights of both encoders and the decoder."""

    d: int = 16
    hidden: int = 8
    dv: int = 8
    tensors: dict[str, Tensor] = field(default_factory=dict)
    meta: dict[str, float] = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, d: int = 16, hidden: int = 8, dv: int = 8, query_skip: bool = False) -> VosParams:
        rng = np.random.default_rng(seed)
        shapes = {
            "mem.w1": (hidden, 4, 4, 4),
            "mem.w2": (2 * hidden, hidden, 4, 4),
            "mem.w3": (dv, 2 * hidden, 3, 3),
            "key.w1": (hidden, 3, 4, 4),
            "key.w2": (2 * hidden, hidden, 4, 4),
            "key.w3": (d, 2 * hidden, 3, 3),
            "dec.w1": (16, (d if query_skip else 0) + 1 + dv, 3, 3),
            "dec.w2": (1, 16, 3, 3),
        }
        tensors = {}
        for name, shape in shapes.items():
            tensors[name] = Tensor(kaiming(rng, shape), requires_grad=True)
            tensors[name.replace(".w", ".b")] = Tensor(np.zeros(shape[0], np.float32), requires_grad=True)
        return cls(d=d, hidden=hidden, dv=dv, tensors=tensors)

    @property
    def query_skip(self) -> bool:
        """Whether the decoder also sees the query's own key features."""
        return self.tensors["dec.w1"].shape[1] == self.d + 1 + self.dv

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def copy(self, dtype=None, requires_grad: bool = True) -> VosParams:
        tensors = {
            k: Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=requires_grad)
            for k, v in self.tensors.items()
        }
        return VosParams(self.d, self.hidden, self.dv, tensors, dict(self.meta))

    def frozen(self) -> VosParams:
        """Same weights, no gradient tracking (the attack setting: theta fixed)."""
        tensors = {k: Tensor(v.data) for k, v in self.tensors.items()}
        return VosParams(self.d, self.hidden, self.dv, tensors, dict(self.meta))

    def allclose(self, other: VosParams, exact: bool = True) -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        for k in self.tensors:
            a, b = self.tensors[k].data, other.tensors[k].data
            if exact and a.tobytes() != b.tobytes():
                return False
            if not exact and not np.allclose(a, b):
                return False
        return True


@dataclass
class MemorySet:
    """Ordered (frame, mask) pairs; entry 0 carries the ground-truth first mask."""

    entries: list[tuple[object, object]] = field(default_factory=list)

    def add(self, frame, mask) -> None:
        self.entries.append((frame, mask))

    def __len__(self) -> int:
        return len(self.entries)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _conv_block(params: VosParams, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.conv2d(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"], 2, 1))
    h = ad.relu(ad.conv2d(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"], 2, 1))
    return ad.conv2d(h, params[f"{prefix}.w3"], params[f"{prefix}.b3"], 1, 1)


def _check_resolution(h: int, w: int) -> None:
    if h % STRIDE or w % STRIDE:
        raise ResolutionError(f"frame size {h}x{w} must be divisible by {STRIDE}")


def encode_memory_entry(params: VosParams, frame, mask) -> tuple[Tensor, Tensor]:
    """Keys (d, h*w) and values (h*w, 1 + dv) for one memory pair."""
    frame, mask = _as_tensor(frame), _as_tensor(mask)
    H, W, _ = frame.shape
    if mask.shape != (H, W):
        raise ResolutionError(f"memory mask {mask.shape} does not match frame {H}x{W}")
    _check_resolution(H, W)
    rgb = ad.reshape(ad.transpose(frame, (2, 0, 1)), (1, 3, H, W))
    m = ad.reshape(mask, (1, 1, H, W))
    h, w = H // STRIDE, W // STRIDE
    keys = ad.reshape(_conv_block(params, "key", rgb), (params.d, h * w))
    vfeat = _conv_block(params, "mem", ad.concat([rgb, m], axis=1))
    values = ad.concat([ad.avg_pool(m, STRIDE), vfeat], axis=1)
    values = ad.transpose(ad.reshape(values, (1 + params.dv, h * w)), (1, 0))
    return keys, values


def similarity(q: Tensor, k: Tensor) -> Tensor:
    """Negative squared distance between query rows (n, d) and key columns (d, m), up to a per-row constant.

    Dropping the |q|^2 term leaves softmax over memory unchanged, and unlike a
    plain dot product no single high-norm key can attract every query.
    """
    ones = Tensor(np.ones((q.shape[0], k.shape[0]), q.dtype))
    return ad.matmul(q, k) * 2.0 - ad.matmul(ones, k * k)


def segment_encoded(params: VosParams, keys: list[Tensor], values: list[Tensor], frame) -> Tensor:
    frame = _as_tensor(frame)
    H, W, _ = frame.shape
    _check_resolution(H, W)
    h, w = H // STRIDE, W // STRIDE
    if keys[0].shape[1] != h * w:
        raise ResolutionError(f"query frame {H}x{W} does not match memory resolution")
    rgb = ad.reshape(ad.transpose(frame, (2, 0, 1)), (1, 3, H, W))
    qfeat = _conv_block(params, "key", rgb)
    q = ad.transpose(ad.reshape(qfeat, (params.d, h * w)), (1, 0))
    k = keys[0] if len(keys) == 1 else ad.concat(keys, axis=1)
    v = values[0] if len(values) == 1 else ad.concat(values, axis=0)
    attn = ad.softmax(similarity(q, k) * (1.0 / math.sqrt(params.d)), axis=1)
    readout = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0)), (1, 1 + params.dv, h, w))
    x = ad.concat([qfeat, readout], axis=1) if params.query_skip else readout
    x = ad.relu(ad.conv2d(x, params["dec.w1"], params["dec.b1"], 1, 1))
    logits = ad.conv2d(x, params["dec.w2"], params["dec.b2"], 1, 1)
    return ad.reshape(ad.sigmoid(ad.bilinear_upsample(logits, H, W)), (H, W))


def segment(params: VosParams, memory: MemorySet, frame) -> Tensor:
    """Foreground probabilities (H, W) for ``frame`` given the memory pairs."""
    if len(memory) == 0:
        raise ValueError("memory set is empty")
    enc = [encode_memory_entry(params, f, m) for f, m in memory.entries]
    return segment_encoded(params, [e[0] for e in enc], [e[1] for e in enc], frame)


def assign_objects(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Per-object probabilities (K, H, W) to disjoint binary masks via argmax, background below threshold."""
    best = probs.argmax(axis=0)
    fg = probs.max(axis=0) >= threshold
    k = probs.shape[0]
    return np.stack([(best == i) & fg for i in range(k)]).astype(np.float32)


def infer_object(params: VosParams, frames: np.ndarray, first_mask: np.ndarray) -> np.ndarray:
    """Soft predictions for frames 2..T of one object, memory = first frame + 4 most recent."""
    frozen = params.frozen()
    first = encode_memory_entry(frozen, frames[0], first_mask)
    recent: list[tuple[Tensor, Tensor]] = []
    out = []
    for t in range(1, frames.shape[0]):
        enc = [first] + recent[-MEMORY_RECENT:]
        prob = segment_encoded(frozen, [e[0] for e in enc], [e[1] for e in enc], frames[t]).data
        out.append(prob)
        recent.append(encode_memory_entry(frozen, frames[t], prob))
    return np.stack(out)


def infer_video(params: VosParams, video, first_frame_override=None) -> np.ndarray:
    """Probabilities (T-1, K, H, W) for frames 2..T.

    ``first_frame_override`` replaces I_1 wherever it is used; the first mask
    stays the clean ground truth.
    """
    if video.T < 2:
        raise ValueError("need at least two frames")
    frames = video.frames
    if first_frame_override is not None:
        override = np.asarray(first_frame_override, dtype=np.float32)
        if override.shape != frames.shape[1:]:
            raise ResolutionError(f"override shape {override.shape} != frame shape {frames.shape[1:]}")
        frames = frames.copy()
        frames[0] = override
    per_obj = [infer_object(params, frames, video.masks[0, k]) for k in range(video.object_count)]
    return np.stack(per_obj, axis=1)


def predict_masks(params: VosParams, video, first_frame_override=None) -> np.ndarray:
    """Binary per-object masks (T-1, K, H, W) after argmax assignment."""
    probs = infer_video(params, video, first_frame_override)
    return np.stack([assign_objects(p) for p in probs])


# -- training ------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 6000
    lr: float = 3e-3
    cosine: bool = True  # anneal lr to zero over the run
    warmup: int = 200  # linear lr ramp at the start
    seed: int = 0
    d: int = 16
    hidden: int = 8
    dv: int = 8
    query_skip: bool = False
    log_every: int = 100


def sequence_loss(params: VosParams, frames, masks, first_frame=None) -> Tensor:
    """Mean full BCE on frames 2 and 3 of a three-frame clip, memory grown from frame 1."""
    f1 = frames[0] if first_frame is None else first_frame
    mem = [encode_memory_entry(params, f1, masks[0])]
    losses = []
    for t in (1, 2):
        prob = segment_encoded(params, [m[0] for m in mem], [m[1] for m in mem], frames[t])
        losses.append(ad.mean(ad.binary_ce(prob, masks[t], "full")))
        if t == 1:
            mem.append(encode_memory_entry(params, frames[t], prob))
    return (losses[0] + losses[1]) * 0.5


def sample_clip(rng: np.random.Generator, video):
    t2 = int(rng.integers(1, video.T - 1))
    t3 = int(rng.integers(t2 + 1, video.T))
    k = int(rng.integers(video.object_count))
    idx = [0, t2, t3]
    return video.frames[idx], video.masks[idx, k], (t2, t3, k)


def train(dataset, hyper: TrainConfig, init: VosParams | None = None, step_hook=None) -> VosParams:
    """Clean training on random three-frame clips; returns params with ``meta['final_loss']``."""
    if not dataset:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 1]))
    params = init.copy() if init is not None else VosParams.init(hyper.seed, hyper.d, hyper.hidden, hyper.dv, hyper.query_skip)
    opt = Adam(params.parameters(), lr=hyper.lr)
    running = None
    for step in range(hyper.steps):
        video = dataset[int(rng.integers(len(dataset)))]
        frames, masks, _ = sample_clip(rng, video)
        first = step_hook(params, video, frames, masks) if step_hook else None
        opt.lr = hyper.lr
        if hyper.cosine:
            opt.lr *= 0.5 * (1 + math.cos(math.pi * step / hyper.steps))
        if step < hyper.warmup:
            opt.lr *= (step + 1) / hyper.warmup
        opt.zero_grad()
        loss = sequence_loss(params, frames, masks, first)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step} on video {video.vid}")
        loss.backward()
        opt.step()
        running = value if running is None else 0.95 * running + 0.05 * value
        if hyper.log_every and (step + 1) % hyper.log_every == 0:
            log.info("step %d loss %.4f (smoothed %.4f)", step + 1, value, running)
    if hyper.steps:
        params.meta["final_loss"] = float(running)
    params.meta["steps"] = float(params.meta.get("steps", 0.0) + hyper.steps)
    return params


# -- checkpoints -------------------------------------------------------------------
def _pack_str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def save_checkpoint(params: VosParams, path) -> None:
    hp = {"d": float(params.d), "hidden": float(params.hidden), "dv": float(params.dv), "stride": float(STRIDE)}
    hp.update({f"meta.{k}": float(v) for k, v in params.meta.items()})
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hp))]
    for k in sorted(hp):
        parts += [_pack_str(k), struct.pack("<d", hp[k])]
    parts.append(struct.pack("<I", len(params.tensors)))
    for k in sorted(params.tensors):
        parts += [_pack_str(k), serial.tensor_bytes(params.tensors[k].data)]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> VosParams:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        version, n_hp = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")

        def read_str():
            (n,) = struct.unpack("<I", fh.read(4))
            return fh.read(n).decode()

        hp = {}
        for _ in range(n_hp):
            k = read_str()
            (hp[k],) = struct.unpack("<d", fh.read(8))
        if int(hp.get("stride", STRIDE)) != STRIDE:
            raise CheckpointError(f"{path}: stride {hp['stride']} incompatible with this build")
        (n_t,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n_t):
            k = read_str()
            tensors[k] = Tensor(serial.read_tensor(fh).copy(), requires_grad=True)
    meta = {k[5:]: v for k, v in hp.items() if k.startswith("meta.")}
    return VosParams(int(hp["d"]), int(hp["hidden"]), int(hp["dv"]), tensors, meta)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
