"""Hard region learner: a small conv net mapping a gradient map to per-pixel hardness.

Two stride-2 conv stages and a 3x3 head produce a quarter-resolution score
map, which is bilinearly upsampled and squashed with a sigmoid. The net is
trained online, one Adam step per attack iteration, to regress binary
pseudo-labels that flag pixels whose segmentation cross entropy exceeds a
threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import serial
from .autodiff import Tensor
from .optim import Adam

DEFAULT_ALPHA = -math.log(0.4)
HRL_LR = 1e-3  # see make_optimizer
HRL_WEIGHT_DECAY = 0.01
LOSS_KINDS = ("mse", "mae", "ce")


class HrlDiverged(FloatingPointError):
    pass


@dataclass
class HrlParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    widths: tuple[int, int] = (8, 16)

    @classmethod
    def init(cls, seed: int, widths: tuple[int, int] = (8, 16), dtype=np.float32) -> HrlParams:
        """Kaiming-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        c1, c2 = widths
        shapes = {"w1": (c1, 3, 4, 4), "w2": (c2, c1, 4, 4), "head": (1, c2, 3, 3)}
        tensors = {}
        for name, shape in shapes.items():
            std = math.sqrt(2.0 / np.prod(shape[1:]))
            tensors[name] = Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)
            tensors[name + ".b"] = Tensor(np.zeros(shape[0], dtype), requires_grad=True)
        return cls(tensors, widths)

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # (H, W) in {0, 1}
    alpha: float
    ce: np.ndarray | None = None  # per-pixel loss the labels were cut from


def hardness_forward(params: HrlParams, grad_map) -> Tensor:
    """Hardness map (H, W) in (0, 1) from a normalised (H, W, 3) gradient map."""
    g = grad_map if isinstance(grad_map, Tensor) else Tensor(np.asarray(grad_map, np.float32))
    if g.ndim != 3 or g.shape[2] != 3:
        raise ad.ShapeError(f"gradient map must be (H, W, 3), got {g.shape}")
    H, W, _ = g.shape
    if H % 4 or W % 4:
        raise ad.ShapeError(f"gradient map size {H}x{W} must be divisible by 4")
    t = params.tensors
    x = ad.reshape(ad.transpose(g, (2, 0, 1)), (1, 3, H, W))
    x = ad.relu(ad.conv2d(x, t["w1"], t["w1.b"], 2, 1))
    x = ad.relu(ad.conv2d(x, t["w2"], t["w2.b"], 2, 1))
    x = ad.conv2d(x, t["head"], t["head.b"], 1, 1)
    return ad.reshape(ad.sigmoid(ad.bilinear_upsample(x, H, W)), (H, W))


def pixel_ce(gt_mask, pred, mode: str = "literal") -> np.ndarray:
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    return ad.binary_ce(Tensor(p.astype(np.float64)), np.asarray(gt_mask, np.float64), mode).data


def pseudo_labels(gt_mask, pred, alpha: float = DEFAULT_ALPHA, mode: str = "literal") -> PseudoLabelMap:
    """Flag pixels whose cross entropy exceeds ``alpha``.

    In ``literal`` mode the loss is ``-y log p`` so background pixels are never
    flagged; ``full`` uses the two-sided binary cross entropy.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ce = pixel_ce(gt_mask, pred, mode)
    return PseudoLabelMap((ce > alpha).astype(np.float32), alpha, ce)


def hardness_loss(pseudo: PseudoLabelMap | np.ndarray, pred: Tensor, kind: str = "mse") -> Tensor:
    z = pseudo.labels if isinstance(pseudo, PseudoLabelMap) else np.asarray(pseudo)
    if z.shape != pred.shape:
        raise ad.ShapeError(f"pseudo-labels {z.shape} vs hardness map {pred.shape}")
    if kind == "mse":
        diff = pred - Tensor(z.astype(pred.dtype))
        return ad.mean(diff * diff)
    if kind == "mae":
        return ad.mean(ad.abs(pred - Tensor(z.astype(pred.dtype))))
    if kind == "ce":
        return ad.mean(ad.binary_ce(pred, z, "full"))
    raise ValueError(f"unknown hardness loss {kind!r}; expected one of {LOSS_KINDS}")


def make_optimizer(params: HrlParams, lr: float = HRL_LR, weight_decay: float = HRL_WEIGHT_DECAY) -> Adam:
    """Adam for the learner.

    At lr 0.1 a single step on mostly-zero labels pushes every weight the same
    way and saturates the sigmoid at 0, after which the learner never recovers.
    1e-3 keeps repeated steps monotone on a fixed target.
    """
    return Adam(params.parameters(), lr=lr, weight_decay=weight_decay)


def hrl_step(params: HrlParams, grad_map, pseudo: PseudoLabelMap, optimizer: Adam, kind: str = "mse") -> float:
    """One optimiser step on the hardness loss; returns the loss before the step."""
    optimizer.zero_grad()
    loss = hardness_loss(pseudo, hardness_forward(params, grad_map), kind)
    value = loss.item()
    if not np.isfinite(value):
        raise HrlDiverged(f"hardness loss became {value}")
    loss.backward()
    optimizer.step()
    return value


def dump_maps(directory, iteration: int, hardness: np.ndarray, pseudo: PseudoLabelMap) -> None:
    """Write the hardness and pseudo-label maps of one iteration as tensor records."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    serial.save_tensor(d / f"hardness_{iteration:03d}.arat", hardness)
    serial.save_tensor(d / f"pseudo_{iteration:03d}.arat", pseudo.labels)
