"""First-frame attacks on the toy segmenter.

All attackers perturb a frame inside an l-inf ball of radius ``epsilon``
around the clean frame. The surrogate objective is the segmentation loss of
the attacked frame used as a *query* against a two-entry memory built from
its successor frames and their clean predictions; model weights stay fixed.

Attackers: uniform random noise, FGSM, BIM, PGD, the hardness-weighted
region attack (white-box, with an online hard region learner) and its
gradient-free black-box variant.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import hrl
from . import vos_model as vm
from .autodiff import Tensor

log = logging.getLogger(__name__)

ATTACKERS = ("random", "fgsm", "bim", "pgd", "ara", "ara-black")
NORMS = ("linf", "l2", "l1")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    beta: float = 8 / 255
    iterations: int = 10
    alpha: float = hrl.DEFAULT_ALPHA
    norm_mode: str = "linf"
    region_fraction: float = 1.0
    frames_to_attack: int = 1
    seed: int = 0
    hardness_loss: str = "mse"
    pseudo_mode: str = "literal"
    per_pixel_projection: bool = True
    hrl_lr: float = hrl.HRL_LR
    hrl_weight_decay: float = hrl.HRL_WEIGHT_DECAY

    def __post_init__(self):
        if self.epsilon < 0 or self.beta < 0:
            raise ValueError("epsilon and beta must be non-negative")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.norm_mode not in NORMS:
            raise ValueError(f"norm_mode must be one of {NORMS}")
        if not 0.0 < self.region_fraction <= 1.0:
            raise ValueError("region_fraction must lie in (0, 1]")
        if self.frames_to_attack < 1:
            raise ValueError("frames_to_attack must be >= 1")
        if self.hardness_loss not in hrl.LOSS_KINDS:
            raise ValueError(f"hardness_loss must be one of {hrl.LOSS_KINDS}")

    def with_(self, **kw) -> AttackConfig:
        return replace(self, **kw)


@dataclass
class IterationRecord:
    iteration: int
    seg_loss: float
    hardness_loss: float
    mean_hardness: float
    eta_inf: float


@dataclass
class AttackResult:
    frames: dict[int, np.ndarray]  # frame index -> adversarial frame
    log: list[IterationRecord] = field(default_factory=list)
    aborted: str | None = None

    @property
    def first(self) -> np.ndarray:
        return self.frames[0]


def attack_rng(config: AttackConfig, video, frame_index: int = 0) -> np.random.Generator:
    key = zlib.crc32(video.vid.encode())
    return np.random.default_rng(np.random.SeedSequence([config.seed, key, video.seed & 0xFFFFFFFF, frame_index]))


# -- surrogate objective -------------------------------------------------------------
@dataclass
class MemoryPrime:
    """Encoded two-entry memories, one per object, plus the targeted frame's masks."""

    keys: list[list[Tensor]]
    values: list[list[Tensor]]
    gt: np.ndarray  # (K, H, W)
    frames: tuple[int, int]


def support_frames(T: int, t: int) -> tuple[int, int]:
    """Two frames next to ``t``: its successors when they exist, else the nearest others."""
    others = [i for i in range(T) if i != t]
    after = [i for i in others if i > t]
    if len(after) >= 2:
        return after[0], after[1]
    ranked = sorted(others, key=lambda i: (abs(i - t), i))
    return tuple(sorted(ranked[:2]))


def memory_prime(params: vm.VosParams, video, t: int = 0) -> MemoryPrime:
    """Memory of the two support frames with masks from a clean forward pass.

    For the first frame these are frames 2 and 3 predicted from (I_1, Y_1).
    The memory is computed once and kept fixed across attack iterations.
    """
    if video.T < 3:
        raise ValueError(f"gradient map needs T >= 3, video {video.vid} has {video.T}")
    frozen = params.frozen()
    a, b = support_frames(video.T, t)
    keys, values = [], []
    for k in range(video.object_count):
        probs = vm.infer_object(frozen, video.frames, video.masks[0, k])  # predictions for 2..T
        pred = {i + 1: probs[i] for i in range(len(probs))}
        pred[0] = video.masks[0, k]
        enc = [vm.encode_memory_entry(frozen, video.frames[i], pred[i]) for i in (a, b)]
        keys.append([e[0] for e in enc])
        values.append([e[1] for e in enc])
    return MemoryPrime(keys, values, video.masks[t], (a, b))


def surrogate(params: vm.VosParams, mp: MemoryPrime, frame: np.ndarray, need_grad: bool = True):
    """Segmentation loss of ``frame`` against the prime memory.

    Returns (loss value, raw gradient w.r.t. the frame or None, per-object predictions).
    """
    x = Tensor(np.asarray(frame, np.float32), requires_grad=need_grad)
    losses, preds = [], []
    for k in range(len(mp.keys)):
        p = vm.segment_encoded(params, mp.keys[k], mp.values[k], x)
        preds.append(p.data)
        losses.append(ad.mean(ad.binary_ce(p, mp.gt[k], "full")))
    loss = losses[0]
    for extra in losses[1:]:
        loss = loss + extra
    if need_grad:
        loss.backward()
        return loss.item(), x.grad.astype(np.float64), np.stack(preds)
    return loss.item(), None, np.stack(preds)


def gradient_map(params: vm.VosParams, mp: MemoryPrime, frame: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Gradient of the segmentation loss w.r.t. the frame, (H, W, 3), optionally layer-normalised per channel."""
    _, g, _ = surrogate(params.frozen(), mp, frame)
    if normalize:
        return ad.layer_normalize_per_channel(Tensor(g)).data
    return g


def hard_pixel_ce(mp: MemoryPrime, preds: np.ndarray, mode: str) -> np.ndarray:
    return np.max([hrl.pixel_ce(mp.gt[k], preds[k], mode) for k in range(len(preds))], axis=0)


# -- projection and step shaping ------------------------------------------------------------
def clip_to_ball(frame_adv, frame_orig, epsilon: float, per_pixel: bool = True) -> np.ndarray:
    """Clamp into [min(orig) - eps, max(orig) + eps], then (optionally) onto the per-pixel eps-ball."""
    adv = np.asarray(frame_adv, np.float64)
    orig = np.asarray(frame_orig, np.float64)
    if adv.shape != orig.shape:
        raise ValueError(f"shape mismatch {adv.shape} vs {orig.shape}")
    out = np.clip(adv, orig.min() - epsilon, orig.max() + epsilon)
    if per_pixel:
        out = np.clip(out, orig - epsilon, orig + epsilon)
    return out.astype(np.float32)


def apply_norm_variant(grad: np.ndarray, norm_mode: str, beta: float) -> np.ndarray:
    """Step direction of size ``beta``: sign for linf, gradient over its global l2 or l1 norm otherwise."""
    g = np.asarray(grad, np.float64)
    if norm_mode == "linf":
        return beta * np.sign(g)
    if norm_mode == "l2":
        n = np.sqrt((g * g).sum())
    elif norm_mode == "l1":
        n = np.abs(g).sum()
    else:
        raise ValueError(f"unknown norm mode {norm_mode!r}")
    return beta * g / n if n > 0 else np.zeros_like(g)


def region_mask(hardness: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean (H, W) mask of the ``fraction`` hardest pixels; ties broken by (row, col)."""
    h, w = hardness.shape
    k = int(round(fraction * h * w))
    order = np.argsort(-hardness.reshape(-1), kind="stable")
    mask = np.zeros(h * w, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(h, w)


def _restrict(adv: np.ndarray, orig: np.ndarray, region: np.ndarray) -> np.ndarray:
    return np.where(region[..., None], adv, orig).astype(np.float32)


def uniform_noise(rng: np.random.Generator, shape, epsilon: float) -> np.ndarray:
    return rng.uniform(-epsilon, epsilon, size=shape)


# -- attackers -----------------------------------------------------------------------------
def _ara_one(params, video, t, config: AttackConfig, blackbox: bool, hrl_state=None):
    orig = video.frames[t]
    mp = memory_prime(params, video, t)
    frozen = params.frozen()
    rng = attack_rng(config, video, t)
    seed = int(rng.integers(2**31))
    hparams = hrl.HrlParams.init(seed) if hrl_state is None else _clone_hrl(hrl_state)
    opt = hrl.make_optimizer(hparams, config.hrl_lr, config.hrl_weight_decay)
    adv = clip_to_ball(orig + uniform_noise(rng, orig.shape, config.epsilon), orig, config.epsilon,
                       config.per_pixel_projection)
    records = []
    for r in range(1, config.iterations + 1):
        if blackbox:
            seg, _, preds = surrogate(frozen, mp, adv, need_grad=False)
            g_raw = None
            hrl_input = ad.layer_normalize_per_channel(Tensor(adv.astype(np.float64))).data
        else:
            seg, g_raw, preds = surrogate(frozen, mp, adv)
            hrl_input = ad.layer_normalize_per_channel(Tensor(g_raw)).data
        hrl_input = hrl_input.astype(np.float32)
        hardness = hrl.hardness_forward(hparams, hrl_input).data.astype(np.float64)
        ce = hard_pixel_ce(mp, preds, config.pseudo_mode)
        pseudo = hrl.PseudoLabelMap((ce > config.alpha).astype(np.float32), config.alpha, ce)
        try:
            h_loss = hrl.hrl_step(hparams, hrl_input, pseudo, opt, config.hardness_loss)
        except hrl.HrlDiverged as exc:
            log.warning("attack on %s frame %d aborted at iteration %d: %s", video.vid, t, r, exc)
            return adv, records, str(exc)
        if blackbox:
            step = config.beta * np.repeat(hardness[..., None], 3, axis=2)
        else:
            step = hardness[..., None] * apply_norm_variant(g_raw, config.norm_mode, config.beta)
        adv = clip_to_ball(adv + step, orig, config.epsilon, config.per_pixel_projection)
        if config.region_fraction < 1.0:
            adv = _restrict(adv, orig, region_mask(hardness, config.region_fraction))
        records.append(
            IterationRecord(r, seg, h_loss, float(hardness.mean()), float(np.abs(adv - orig).max()))
        )
    return adv, records, None


def _clone_hrl(state: hrl.HrlParams) -> hrl.HrlParams:
    return hrl.HrlParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in state.tensors.items()}, state.widths)


def _attacked_indices(video, config: AttackConfig) -> list[int]:
    n = min(config.frames_to_attack, video.T)
    return list(range(n))


def ara_whitebox(params: vm.VosParams, video, config: AttackConfig = AttackConfig()) -> AttackResult:
    """Hardness-weighted iterative sign attack with an online hard region learner."""
    result = AttackResult({})
    for t in _attacked_indices(video, config):
        adv, records, aborted = _ara_one(params, video, t, config, blackbox=False)
        result.frames[t] = adv
        if t == 0:
            result.log = records
        if aborted:
            result.aborted = aborted
            break
    return result


def ara_blackbox(params: vm.VosParams, video, config: AttackConfig = AttackConfig(), hrl_state=None) -> AttackResult:
    """Gradient-free variant: the step is the hardness map itself, scaled by beta.

    The model is only queried for forward predictions (to build pseudo-labels);
    the learner sees the normalised adversarial frame instead of a gradient map.
    """
    result = AttackResult({})
    for t in _attacked_indices(video, config):
        adv, records, aborted = _ara_one(params, video, t, config, blackbox=True, hrl_state=hrl_state)
        result.frames[t] = adv
        if t == 0:
            result.log = records
        if aborted:
            result.aborted = aborted
            break
    return result


def _iterative_sign(params, video, t, config: AttackConfig, steps: int, step: float, random_init: bool):
    orig = video.frames[t]
    mp = memory_prime(params, video, t)
    frozen = params.frozen()
    rng = attack_rng(config, video, t)
    adv = orig.astype(np.float32)
    if random_init:
        adv = clip_to_ball(orig + uniform_noise(rng, orig.shape, config.epsilon), orig, config.epsilon,
                           config.per_pixel_projection)
    records = []
    for r in range(1, steps + 1):
        seg, g, _ = surrogate(frozen, mp, adv)
        adv = clip_to_ball(adv + apply_norm_variant(g, config.norm_mode, step), orig, config.epsilon,
                           config.per_pixel_projection)
        records.append(IterationRecord(r, seg, float("nan"), float("nan"), float(np.abs(adv - orig).max())))
    return adv, records


def baseline_attack(kind: str, params: vm.VosParams, video, config: AttackConfig = AttackConfig()) -> AttackResult:
    result = AttackResult({})
    for t in _attacked_indices(video, config):
        orig = video.frames[t]
        if kind == "random":
            rng = attack_rng(config, video, t)
            adv = clip_to_ball(orig + uniform_noise(rng, orig.shape, config.epsilon), orig, config.epsilon,
                               config.per_pixel_projection)
            records = []
        elif kind == "fgsm":
            adv, records = _iterative_sign(params, video, t, config, 1, config.epsilon, False)
        elif kind == "bim":
            adv, records = _iterative_sign(params, video, t, config, config.iterations, config.beta, False)
        elif kind == "pgd":
            adv, records = _iterative_sign(params, video, t, config, config.iterations, config.beta, True)
        else:
            raise ValueError(f"unknown baseline attacker {kind!r}")
        result.frames[t] = adv
        if t == 0:
            result.log = records
    return result


def run_attack(kind: str, params: vm.VosParams, video, config: AttackConfig = AttackConfig()) -> AttackResult:
    if kind == "ara":
        return ara_whitebox(params, video, config)
    if kind == "ara-black":
        return ara_blackbox(params, video, config)
    return baseline_attack(kind, params, video, config)


def attacked_video(video, result: AttackResult):
    frames = video.frames.copy()
    for t, f in result.frames.items():
        frames[t] = f
    return type(video)(frames, video.masks, video.seed, video.vid, dict(video.meta))


def perturbation_stats(video, result: AttackResult) -> dict[str, float]:
    deltas = [np.abs(result.frames[t].astype(np.float64) - video.frames[t]) for t in result.frames]
    d = np.stack(deltas)
    return {
        "linf": float(d.max()),
        "mean_abs": float(d.mean()),
        "perturbed_fraction": float((d.max(axis=-1) > 0).mean()),
    }


__all__ = [
    "ATTACKERS",
    "AttackConfig",
    "AttackResult",
    "IterationRecord",
    "MemoryPrime",
    "apply_norm_variant",
    "ara_blackbox",
    "ara_whitebox",
    "attacked_video",
    "baseline_attack",
    "clip_to_ball",
    "gradient_map",
    "memory_prime",
    "region_mask",
    "run_attack",
    "surrogate",
]
