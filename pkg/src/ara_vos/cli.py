"""Command line entry point: ``ara-vos <subcommand> ...``.

Subcommands: gen-data, train, attack, defend, defense-grid, eval, report.
Every run writes a ``manifest.json`` (config snapshot, seed, content hashes
of its inputs) next to its outputs; CSV files carry no timestamps so reruns
with the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import attacks as A
from . import defense as D
from . import experiments as E
from . import serial
from . import synthvid as sv
from . import vos_model as vm

log = logging.getLogger("ara_vos")

CONFIG_NAME = "config.ini"


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(directory, command: str, cfg: E.RunConfig | None, inputs: dict, extra: dict | None = None,
                   name: str = "manifest.json") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    body = {
        "command": command,
        "version": __version__,
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.snapshot(),
        "inputs": {k: {"path": str(v), "hash": E.content_hash(v)} for k, v in inputs.items()},
    }
    body.update(extra or {})
    path = d / name
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def write_pgm(path, image: np.ndarray) -> None:
    """Plain-text greyscale preview, values clipped to [0, 1] and scaled to 0..255."""
    img = np.clip(np.asarray(image, np.float64), 0.0, 1.0)
    if img.ndim == 3:
        img = img.mean(axis=2)
    px = np.round(img * 255).astype(int)
    h, w = px.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n")


# -- config and data lookup ---------------------------------------------------------------------
def resolve_config(args, data_dir: Path | None = None) -> E.RunConfig:
    if getattr(args, "config", None):
        return E.load_config(args.config)
    if data_dir is not None:
        root = data_dir if (data_dir / CONFIG_NAME).exists() else data_dir.parent
        if (root / CONFIG_NAME).exists():
            return E.load_config(root / CONFIG_NAME)
    return E.RunConfig().finalize()


def dataset_dir(data: Path, split: str) -> Path:
    """A dataset directory itself, or its ``train``/``eval`` split when given the gen-data root."""
    if (data / "manifest.txt").exists():
        return data
    sub = data / split
    if (sub / "manifest.txt").exists():
        return sub
    raise SystemExit(f"error: no dataset found at {data} (expected manifest.txt or {split}/manifest.txt)")


def load_ckpt(path) -> vm.VosParams:
    try:
        return vm.load_checkpoint(path)
    except (OSError, vm.CheckpointError, serial.FormatError) as exc:
        raise SystemExit(f"error: cannot load checkpoint: {exc}") from None


# -- subcommands ---------------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    train, evals = E.build_datasets(cfg)
    sv.save_dataset(train, out / "train")
    sv.save_dataset(evals, out / "eval")
    (out / CONFIG_NAME).write_text(E.dump_config(cfg))
    inputs = {"config": args.config} if args.config else {}
    write_manifest(out, "gen-data", cfg, inputs, {"train_videos": len(train), "eval_videos": len(evals)})
    print(f"wrote {len(train)} training and {len(evals)} evaluation videos to {out}")
    return 0


def cmd_train(args) -> int:
    data = Path(args.data)
    cfg = resolve_config(args, data)
    hyper = cfg.train if args.steps is None else dataclasses.replace(cfg.train, steps=args.steps)
    train_dir = dataset_dir(data, "train")
    videos = sv.load_dataset(train_dir)
    t0 = time.perf_counter()
    params = vm.train(videos, hyper)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vm.save_checkpoint(params, out)
    write_manifest(out.parent, "train", cfg, {"data": train_dir},
                   {"checkpoint": out.name, "train": vm.config_dict(hyper),
                    "final_loss": params.meta.get("final_loss"),
                    "elapsed_seconds": round(time.perf_counter() - t0, 2)},
                   name=out.name + ".manifest.json")
    print(f"trained {hyper.steps} steps, final loss {params.meta.get('final_loss', float('nan')):.4f} -> {out}")
    return 0


def _parse_sweep(spec: str) -> tuple[str, list[float]]:
    key, _, values = spec.partition("=")
    key = key.strip()
    if not values or key not in E.SWEEPABLE:
        raise SystemExit(f"error: --sweep expects key=v1,v2,... with key in {E.SWEEPABLE}")
    try:
        return key, [E._parse_scalar(v, float) for v in values.split(",")]
    except ValueError as exc:
        raise SystemExit(f"error: bad sweep value: {exc}") from None


RESULT_HEADER = ["attacker", "sweep", "value", "seed", "vid", "clean_J", "clean_F", "clean_JF",
                 "adv_J", "adv_F", "adv_JF", "drop", "linf", "mean_abs", "aborted"]
ITER_HEADER = ["attacker", "sweep", "value", "seed", "vid", "iteration", "seg_loss", "hardness_loss",
               "mean_hardness", "eta_inf"]


def cmd_attack(args) -> int:
    data = Path(args.data)
    cfg = resolve_config(args, data)
    params = load_ckpt(args.ckpt)
    eval_dir = dataset_dir(data, "eval")
    videos = sv.load_dataset(eval_dir)
    if args.limit:
        videos = videos[: args.limit]
    seeds = E.seed_list(cfg.attack.seed, args.seeds)
    points = [("", None)] if not args.sweep else [(args.sweep[0], v) for v in args.sweep[1]]
    out = Path(args.out)
    t0 = time.perf_counter()
    clean = E.evaluate(params, videos)
    results, iters = [], []
    for key, value in points:
        acfg = cfg.attack if not key else cfg.attack.with_(**E.sweep_overrides(key, value))
        rows = E.attack_panel(params, videos, args.attacker, acfg, seeds, clean, args.jobs)
        label = "" if not key else f"{key}={_fmt(float(value))}"
        for row in rows:
            si = seeds.index(row.seed)
            results.append([args.attacker, key, "" if value is None else float(value), si, row.vid,
                            row.clean.J, row.clean.F, row.clean.JF, row.adv.J, row.adv.F, row.adv.JF,
                            row.drop, row.linf, row.mean_abs, row.result.aborted or ""])
            for rec in row.result.log:
                iters.append([args.attacker, key, "" if value is None else float(value), si, row.vid,
                              rec.iteration, rec.seg_loss, rec.hardness_loss, rec.mean_hardness, rec.eta_inf])
            fdir = out / "frames" / (label or "base") / f"s{si}"
            pdir = out / "previews" / (label or "base") / f"s{si}"
            fdir.mkdir(parents=True, exist_ok=True)
            pdir.mkdir(parents=True, exist_ok=True)
            video = next(v for v in videos if v.vid == row.vid)
            for t, frame in sorted(row.result.frames.items()):
                serial.save_tensor(fdir / f"{row.vid}_t{t}.arat", frame)
                write_pgm(pdir / f"{row.vid}_t{t}.pgm", frame)
                eps = max(acfg.epsilon, 1e-12)
                write_pgm(pdir / f"{row.vid}_t{t}_delta.pgm", 0.5 + 0.5 * (frame - video.frames[t]) / eps)
    write_csv(out / "results.csv", RESULT_HEADER, results)
    write_csv(out / "iterations.csv", ITER_HEADER, iters)
    mean_drop = float(np.mean([r[11] for r in results])) if results else float("nan")
    write_manifest(out, "attack", cfg, {"checkpoint": args.ckpt, "data": eval_dir},
                   {"attacker": args.attacker, "checkpoint_label": Path(args.ckpt).stem,
                    "sweep": args.sweep[0] if args.sweep else None, "seeds": seeds, "videos": len(videos),
                    "mean_drop": mean_drop, "elapsed_seconds": round(time.perf_counter() - t0, 2)})
    print(f"{args.attacker}: mean J&F drop {mean_drop:.4f} over {len(results)} attacked videos -> {out}")
    return 0


def _load_adv(adv_dir: Path) -> dict[str, dict[str, dict[int, np.ndarray]]]:
    """variant -> video id -> frame index -> adversarial frame."""
    root = adv_dir / "frames" if (adv_dir / "frames").is_dir() else adv_dir
    out: dict[str, dict[str, dict[int, np.ndarray]]] = {}
    for f in sorted(root.rglob("*.arat")):
        variant = f.parent.relative_to(root).as_posix()
        vid, _, t = f.stem.rpartition("_t")
        out.setdefault(variant, {}).setdefault(vid, {})[int(t)] = serial.load_tensor(f)
    if not out:
        raise SystemExit(f"error: no adversarial frames under {adv_dir}")
    return out


def cmd_eval(args) -> int:
    data = Path(args.data)
    params = load_ckpt(args.ckpt)
    eval_dir = dataset_dir(data, "eval")
    videos = sv.load_dataset(eval_dir)
    variants = {"clean": None} if not args.adv else _load_adv(Path(args.adv))
    rows = []
    for variant, adv in variants.items():
        for v, r in zip(videos, E.evaluate(params, videos, adv)):
            rows.append([Path(args.ckpt).stem, variant, v.vid, r.J, r.F, r.JF])
    write_csv(args.out, ["checkpoint", "variant", "vid", "J", "F", "JF"], rows)
    inputs = {"checkpoint": args.ckpt, "data": eval_dir}
    if args.adv:
        inputs["adv"] = args.adv
    write_manifest(Path(args.out).parent, "eval", None, inputs, name=Path(args.out).name + ".manifest.json")
    for variant in variants:
        jf = [r[5] for r in rows if r[1] == variant]
        print(f"{variant}: mean J&F {np.mean(jf):.4f} over {len(jf)} videos")
    return 0


def _train_videos_for(args, ckpt: Path) -> tuple[list, Path]:
    if args.data:
        d = dataset_dir(Path(args.data), "train")
    else:
        man = ckpt.parent / (ckpt.name + ".manifest.json")
        if not man.exists():
            raise SystemExit("error: --data not given and the checkpoint has no training manifest")
        d = Path(json.loads(man.read_text())["inputs"]["data"]["path"])
    return sv.load_dataset(d), d


def cmd_defend(args) -> int:
    ckpt = Path(args.ckpt)
    params = load_ckpt(ckpt)
    videos, train_dir = _train_videos_for(args, ckpt)
    cfg = resolve_config(args, train_dir)
    ft = D.finetune_config(cfg.train, cfg.defense.step_fraction, cfg.defense.lr_scale)
    if args.steps is not None:
        ft = dataclasses.replace(ft, steps=args.steps)
    t0 = time.perf_counter()
    out_params = D.adversarial_finetune(params, videos, args.attacker, cfg.attack, ft, cfg.defense.adv_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vm.save_checkpoint(out_params, out)
    write_manifest(out.parent, "defend", cfg, {"checkpoint": ckpt, "data": train_dir},
                   {"attacker": args.attacker, "finetune": vm.config_dict(ft),
                    "elapsed_seconds": round(time.perf_counter() - t0, 2)},
                   name=out.name + ".manifest.json")
    print(f"adversarially fine-tuned ({args.attacker}, {ft.steps} steps) -> {out}")
    return 0


GRID_HEADER = ["attacker", "defense", "clean_JF", "attacked_JF", "drop", "clean_change", "recovery"]


def cmd_defense_grid(args) -> int:
    ckpt = Path(args.ckpt)
    base = load_ckpt(ckpt)
    data = Path(args.data)
    train_dir, eval_dir = dataset_dir(data, "train"), dataset_dir(data, "eval")
    cfg = resolve_config(args, data)
    ft = D.finetune_config(cfg.train, cfg.defense.step_fraction, cfg.defense.lr_scale)
    if args.steps is not None:
        ft = dataclasses.replace(ft, steps=args.steps)
    train, evals = sv.load_dataset(train_dir), sv.load_dataset(eval_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = {"none": base}
    for attacker in D.DEFENSE_ATTACKERS:
        models[attacker] = D.adversarial_finetune(base, train, attacker, cfg.attack, ft, cfg.defense.adv_fraction)
        vm.save_checkpoint(models[attacker], out / f"defended_{attacker}.ckpt")
    seeds = E.seed_list(cfg.attack.seed, args.seeds)
    cells = D.grid(models, evals, D.DEFENSE_ATTACKERS, cfg.attack, seeds)
    undefended = {c.attacker: c for c in cells if c.defense == "none"}
    rows = []
    for c in cells:
        u = undefended[c.attacker]
        rec = "" if c.defense == "none" else D.recovery(u, c)
        rows.append([c.attacker, c.defense, c.clean_jf, c.attacked_jf, c.drop, c.clean_jf - u.clean_jf, rec])
    write_csv(out / "grid.csv", GRID_HEADER, rows)
    write_manifest(out, "defense-grid", cfg, {"checkpoint": ckpt, "data": data},
                   {"finetune": vm.config_dict(ft), "seeds": seeds})
    for r in rows:
        print("attack {:<4} defense {:<4} clean {:.4f} attacked {:.4f} drop {:+.4f}".format(*r[:5]))
    return 0


def _run_summary(run: Path) -> dict:
    man = json.loads((run / "manifest.json").read_text())
    if man.get("command") != "attack":
        raise SystemExit(f"error: {run} is not an attack run")
    return {"run": run, "manifest": man, "rows": read_csv(run / "results.csv")}


def build_report(runs) -> str:
    """Markdown with the attacker comparison (rows ordered by mean drop) and any sweep tables."""
    summaries = [_run_summary(Path(r)) for r in runs]
    base = [s for s in summaries if not s["manifest"].get("sweep")]
    sweeps = [s for s in summaries if s["manifest"].get("sweep")]
    lines = []
    if base:
        ckpts = sorted({s["manifest"]["checkpoint_label"] for s in base})
        cell: dict[tuple[str, str], tuple[float, float, float]] = {}
        for s in base:
            rows = s["rows"]
            key = (s["manifest"]["attacker"], s["manifest"]["checkpoint_label"])
            cell[key] = (np.mean([float(r["clean_JF"]) for r in rows]),
                         np.mean([float(r["adv_JF"]) for r in rows]),
                         np.mean([float(r["drop"]) for r in rows]))
        attackers = sorted({a for a, _ in cell}, key=lambda a: (np.mean([v[2] for k, v in cell.items() if k[0] == a]), a))
        lines += ["## Attack comparison", "", "Cells: J&F under attack (drop from clean). Rows ordered by mean drop.", ""]
        lines.append("| attacker | " + " | ".join(ckpts) + " |")
        lines.append("|---|" + "---|" * len(ckpts))
        clean_row = []
        for c in ckpts:
            vals = [v[0] for k, v in cell.items() if k[1] == c]
            clean_row.append(f"{np.mean(vals):.4f}")
        lines.append("| clean | " + " | ".join(clean_row) + " |")
        for a in attackers:
            cells = [f"{cell[(a, c)][1]:.4f} ({cell[(a, c)][2]:+.4f})" if (a, c) in cell else "-" for c in ckpts]
            lines.append(f"| {a} | " + " | ".join(cells) + " |")
        lines.append("")
    by_key: dict[str, list[dict]] = {}
    for s in sweeps:
        by_key.setdefault(s["manifest"]["sweep"], []).append(s)
    for key in sorted(by_key):
        cols = sorted({f'{s["manifest"]["attacker"]}@{s["manifest"]["checkpoint_label"]}' for s in by_key[key]})
        table: dict[tuple[float, str], float] = {}
        for s in by_key[key]:
            col = f'{s["manifest"]["attacker"]}@{s["manifest"]["checkpoint_label"]}'
            values = sorted({float(r["value"]) for r in s["rows"]})
            for v in values:
                table[(v, col)] = float(np.mean([float(r["adv_JF"]) for r in s["rows"] if float(r["value"]) == v]))
        lines += [f"## Sweep: {key}", "", "Cells: mean J&F under attack.", ""]
        lines.append(f"| {key} | " + " | ".join(cols) + " |")
        lines.append("|---|" + "---|" * len(cols))
        for v in sorted({v for v, _ in table}):
            lines.append(f"| {_fmt(v)} | " + " | ".join(
                f"{table[(v, c)]:.4f}" if (v, c) in table else "-" for c in cols) + " |")
        lines.append("")
    return "\n".join(lines)


def cmd_report(args) -> int:
    text = build_report(args.runs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    write_manifest(out.parent, "report", None, {f"run{i}": r for i, r in enumerate(args.runs)},
                   name=out.name + ".manifest.json")
    print(text)
    return 0


# -- argument parsing ----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ara-vos", description="Adversarial region attacks on a toy video segmenter.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic train/eval datasets")
    g.add_argument("--config", help="run config file (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="clean training of the segmenter")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attack", help="attack the first frame of every evaluation video")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--attacker", required=True, choices=A.ATTACKERS)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, default=1, help="attack seeds per video")
    a.add_argument("--sweep", type=_parse_sweep, help="key=v1,v2,... over one attack setting")
    a.add_argument("--limit", type=int, help="only the first N videos")
    a.add_argument("--jobs", type=int, default=1, help="worker processes")
    a.set_defaults(fn=cmd_attack)

    d = sub.add_parser("defend", help="adversarial fine-tuning")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--attacker", required=True, choices=D.DEFENSE_ATTACKERS)
    d.add_argument("--out", required=True, help="defended checkpoint path")
    d.add_argument("--data", help="training data (defaults to the one recorded for --ckpt)")
    d.add_argument("--config")
    d.add_argument("--steps", type=int, help="override the fine-tuning step count")
    d.set_defaults(fn=cmd_defend)

    dg = sub.add_parser("defense-grid", help="fine-tune against pgd and ara, evaluate both attacks on all models")
    dg.add_argument("--ckpt", required=True)
    dg.add_argument("--data", required=True)
    dg.add_argument("--out", required=True)
    dg.add_argument("--config")
    dg.add_argument("--seeds", type=int, default=1)
    dg.add_argument("--steps", type=int, help="override the fine-tuning step count")
    dg.set_defaults(fn=cmd_defense_grid)

    e = sub.add_parser("eval", help="clean or attacked evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--adv", help="attack output directory")
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="aggregate attack runs into markdown tables")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except E.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
