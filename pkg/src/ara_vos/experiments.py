"""Experiment plumbing shared by the command line and the acceptance suite.

Holds the run configuration (a sectioned ``key = value`` file), named seed
sub-streams, dataset construction, attack panels, sweeps and the paired
bootstrap used to compare attackers.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import re
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attacks as A
from . import metrics as M
from . import synthvid as sv
from . import vos_model as vm

SECTIONS = ("run", "data", "train", "attack", "defense")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass
class DataConfig:
    train_count: int = 200
    eval_count: int = 20
    height: int = 64
    width: int = 64
    frames: int = 8
    train_objects: tuple[int, ...] = (1, 1, 2)
    eval_objects: tuple[int, ...] = (1,)
    contrast: tuple[float, float] = (0.35, 0.8)
    noise: tuple[float, float] = (0.0, 0.03)


@dataclass
class DefenseConfig:
    attacker: str = "ara"
    step_fraction: float = 0.25  # of the clean run's steps
    lr_scale: float = 0.1  # of the clean run's learning rate
    adv_fraction: float = 0.25  # of fine-tuning steps on attacked first frames, the rest clean


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: vm.TrainConfig = field(default_factory=vm.TrainConfig)
    attack: A.AttackConfig = field(default_factory=A.AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    explicit: frozenset[str] = frozenset()  # "section.key" names set by the file

    def finalize(self) -> RunConfig:
        """Fill seeds that the file left unset from the run seed's sub-streams."""
        train, attack = self.train, self.attack
        if "train.seed" not in self.explicit:
            train = dataclasses.replace(train, seed=derive_seed(self.seed, "init"))
        if "attack.seed" not in self.explicit:
            attack = attack.with_(seed=derive_seed(self.seed, "attack"))
        return dataclasses.replace(self, train=train, attack=attack)

    def snapshot(self) -> dict:
        out = {"run": {"seed": self.seed}}
        for name in SECTIONS[1:]:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for a named sub-stream of the run seed."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


# -- config parsing ------------------------------------------------------------------------------
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip().lower()
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _parse_scalar(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(Fraction(raw)) if "/" in raw else float(raw)
    return raw


def _parse_value(raw: str, annotation: str):
    ann = annotation.replace(" ", "")
    if ann.startswith("tuple["):
        inner = ann[len("tuple["):-1]
        kind = int if inner.startswith("int") else float
        return tuple(_parse_scalar(p, kind) for p in raw.split(",") if p.strip())
    kind = {"int": int, "float": float, "bool": bool}.get(ann, str)
    return _parse_scalar(raw, kind)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse a sectioned ``key = value`` file; unknown keys and bad values report their line."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno, source) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line, source) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(exc.message.split(": ", 1)[-1], exc.lineno, source) from None
    lines = _key_lines(text)
    cfg = RunConfig()
    explicit = set()
    parts = {}
    for section in parser.sections():
        name = section.lower()
        if name not in SECTIONS:
            line = next((no for no, l in enumerate(text.splitlines(), 1)
                         if _SECTION_RE.match(l) and _SECTION_RE.match(l).group(1).strip().lower() == name), None)
            raise ConfigError(f"unknown section [{section}]", line, source)
        target = cfg if name == "run" else getattr(cfg, name)
        fields = {f.name: f for f in dataclasses.fields(target) if f.name != "explicit"}
        updates = {}
        for key, raw in parser.items(section):
            line = lines.get((name, key))
            if key not in fields or (name == "run" and key != "seed"):
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, source)
            try:
                updates[key] = _parse_value(raw, str(fields[key].type))
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad value for {name}.{key}: {exc}", line, source) from None
            explicit.add(f"{name}.{key}")
        parts[name] = (target, updates, section)
    for name, (target, updates, section) in parts.items():
        if name == "run":
            cfg = dataclasses.replace(cfg, **updates)
            continue
        try:
            setattr(cfg, name, dataclasses.replace(target, **updates))
        except ValueError as exc:
            first = min((lines.get((name, k), 0) for k in updates), default=None)
            raise ConfigError(f"[{section}] {exc}", first, source) from None
    return dataclasses.replace(cfg, explicit=frozenset(explicit)).finalize()


def load_config(path) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def dump_config(cfg: RunConfig) -> str:
    """Render a config back into the file format (every field, explicit seeds)."""
    out = []
    for section, values in cfg.snapshot().items():
        out.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(repr(x) for x in v)
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)


# -- hashing -------------------------------------------------------------------------------------
def content_hash(*paths) -> str:
    """sha256 over file contents (directories walked in sorted order), prefixed like a git object id."""
    h = hashlib.sha256()
    for path in paths:
        p = Path(path)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            rel = f.relative_to(p).as_posix() if p.is_dir() else f.name
            h.update(rel.encode() + b"\0")
            h.update(f.read_bytes())
    return "sha256:" + h.hexdigest()


# -- datasets and models -------------------------------------------------------------------------
def build_datasets(cfg: RunConfig) -> tuple[list[sv.VideoSequence], list[sv.VideoSequence]]:
    d = cfg.data
    common = dict(H=d.height, W=d.width, T=d.frames, contrast=d.contrast, noise=d.noise)
    train = sv.make_dataset(d.train_count, derive_seed(cfg.seed, "data.train"),
                            object_counts=d.train_objects, prefix="train", **common)
    evals = sv.make_dataset(d.eval_count, derive_seed(cfg.seed, "data.eval"),
                            object_counts=d.eval_objects, prefix="eval", **common)
    return train, evals


def evaluate(params: vm.VosParams, videos, adv: dict[str, dict[int, np.ndarray]] | None = None) -> list[M.EvalResult]:
    """Per-video scores; ``adv`` maps a video id to replacement frames by index."""
    out = []
    for v in videos:
        frames = (adv or {}).get(v.vid)
        if frames:
            v = A.attacked_video(v, A.AttackResult(dict(frames)))
        out.append(M.evaluate_video(vm.predict_masks(params, v), v.masks[1:]))
    return out


def mean_jf(results) -> float:
    return float(np.mean([r.JF for r in results]))


# -- attack panels -------------------------------------------------------------------------------
@dataclass
class PanelRow:
    vid: str
    attacker: str
    seed: int
    clean: M.EvalResult
    adv: M.EvalResult
    linf: float
    mean_abs: float
    result: A.AttackResult

    @property
    def drop(self) -> float:
        return M.attack_drop(self.clean, self.adv)


def _attack_one(args):
    params, video, attacker, config, clean = args
    res = A.run_attack(attacker, params, video, config)
    adv = M.evaluate_video(vm.predict_masks(params, A.attacked_video(video, res)), video.masks[1:])
    stats = A.perturbation_stats(video, res)
    return PanelRow(video.vid, attacker, config.seed, clean, adv, stats["linf"], stats["mean_abs"], res)


def _pool_map(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args, chunksize=max(1, len(jobs_args) // (4 * jobs))))


def attack_panel(params, videos, attacker: str, config: A.AttackConfig, seeds=(0,), clean=None,
                 jobs: int = 1) -> list[PanelRow]:
    """Attack every video once per seed; rows come back in (seed, video) order whatever ``jobs`` is."""
    frozen = params.frozen()
    clean = evaluate(frozen, videos) if clean is None else clean
    work = [(frozen, v, attacker, config.with_(seed=int(s)), c) for s in seeds for v, c in zip(videos, clean)]
    return _pool_map(_attack_one, work, jobs)


def seed_list(base: int, count: int) -> list[int]:
    return [derive_seed(base, f"attack.{i}") for i in range(count)]


def paired_bootstrap(a, b, n: int = 10000, seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Mean of a - b over pairs with a percentile bootstrap interval (two-sided ``level``)."""
    d = np.asarray(a, np.float64) - np.asarray(b, np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("need a non-empty 1-d sequence of pairs")
    rng = np.random.default_rng(seed)
    means = d[rng.integers(0, d.size, size=(n, d.size))].mean(axis=1)
    tail = (1.0 - level) / 2
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(d.mean()), float(lo), float(hi)


SWEEPABLE = ("epsilon", "beta", "alpha", "region_fraction", "frames_to_attack", "iterations")


def sweep_overrides(key: str, value: float) -> dict:
    """Attack-config overrides for one sweep point; epsilon moves beta with it."""
    if key not in SWEEPABLE:
        raise ValueError(f"cannot sweep {key!r}; choose from {SWEEPABLE}")
    if key == "epsilon":
        return {"epsilon": value, "beta": value}
    if key in ("frames_to_attack", "iterations"):
        return {key: int(value)}
    return {key: value}


def sweep(params, videos, attacker: str, config: A.AttackConfig, key: str, values, seeds=(0,),
          jobs: int = 1) -> list[tuple[float, list[PanelRow]]]:
    frozen = params.frozen()
    clean = evaluate(frozen, videos)
    out = []
    for value in values:
        cfg = config.with_(**sweep_overrides(key, value))
        out.append((value, attack_panel(frozen, videos, attacker, cfg, seeds, clean, jobs)))
    return out
