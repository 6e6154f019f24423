"""Adversarial fine-tuning and the attack/defense evaluation grid."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import attacks as A
from . import vos_model as vm

log = logging.getLogger(__name__)

DEFENSE_ATTACKERS = ("pgd", "ara")
ADV_FRACTION = 0.25  # share of fine-tuning steps that see an attacked first frame


def finetune_config(hyper: vm.TrainConfig, step_fraction: float = 0.25, lr_scale: float = 0.1) -> vm.TrainConfig:
    """Schedule for fine-tuning after a clean run: a fraction of its steps at a reduced rate, no warmup."""
    if step_fraction < 0 or lr_scale <= 0:
        raise ValueError("step_fraction must be >= 0 and lr_scale > 0")
    return dataclasses.replace(hyper, steps=int(round(hyper.steps * step_fraction)), lr=hyper.lr * lr_scale, warmup=0)


def adversarial_finetune(
    params: vm.VosParams,
    dataset,
    attacker: str = "ara",
    attack_config: A.AttackConfig = A.AttackConfig(),
    hyper: vm.TrainConfig | None = None,
    adv_fraction: float = ADV_FRACTION,
) -> vm.VosParams:
    """Continue training with each clip's first frame replaced by an adversarial one.

    ``hyper`` is the fine-tuning schedule itself (see ``finetune_config``).
    Adversarial frames are crafted against the weights current at the time,
    once per video per epoch (an epoch is ``len(dataset)`` steps), and reused
    for the rest of that epoch. Each step trains on the adversarial first frame
    with probability ``adv_fraction`` and on the clean clip otherwise.
    """
    if attacker not in DEFENSE_ATTACKERS:
        raise ValueError(f"defense attacker must be one of {DEFENSE_ATTACKERS}")
    if not dataset:
        raise ValueError("training set is empty")
    if not 0.0 <= adv_fraction <= 1.0:
        raise ValueError("adv_fraction must lie in [0, 1]")
    hyper = hyper or finetune_config(vm.TrainConfig())
    cfg = attack_config.with_(frames_to_attack=1)
    cache: dict[str, np.ndarray] = {}
    step = [0]
    coin = np.random.default_rng(np.random.SeedSequence([hyper.seed, 2]))

    def hook(current, video, frames, masks):
        if step[0] % len(dataset) == 0:
            cache.clear()
        step[0] += 1
        if coin.random() >= adv_fraction:
            return None
        if video.vid not in cache:
            cache[video.vid] = A.run_attack(attacker, current, video, cfg).first
        return cache[video.vid]

    out = vm.train(dataset, hyper, init=params, step_hook=hook)
    out.meta["defense"] = float(DEFENSE_ATTACKERS.index(attacker) + 1)
    return out


@dataclass
class GridCell:
    attacker: str
    defense: str  # "none" or a defense attacker
    clean_jf: float
    attacked_jf: float

    @property
    def drop(self) -> float:
        return self.clean_jf - self.attacked_jf


def grid(models: dict[str, vm.VosParams], videos, attackers=DEFENSE_ATTACKERS,
         config: A.AttackConfig = A.AttackConfig(), seeds=(0,)) -> list[GridCell]:
    """Clean and attacked J&F for every (attacker, model) pair; ``models`` maps a defense name to params."""
    from . import experiments as E

    cells = []
    for name, params in models.items():
        clean = E.evaluate(params, videos)
        clean_jf = E.mean_jf(clean)
        for attacker in attackers:
            rows = E.attack_panel(params, videos, attacker, config, seeds, clean)
            cells.append(GridCell(attacker, name, clean_jf, float(np.mean([r.adv.JF for r in rows]))))
    return cells


def recovery(undefended: GridCell, defended: GridCell) -> float:
    """Share of the undefended attack drop that the defense wins back (1 = fully recovered)."""
    if undefended.drop <= 0:
        return float("nan")
    return 1.0 - defended.drop / undefended.drop


__all__ = ["adversarial_finetune", "finetune_config", "grid", "recovery", "GridCell"]
