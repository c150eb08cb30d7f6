"""Command line entry point: ``svdrestore <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff, degradelab, imagestack, lindecomp, trainer

log = logging.getLogger("svdrestore")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Formatter(argparse.HelpFormatter):
    """Fixed width (stable snapshots); shows defaults only where one exists."""

    def __init__(self, prog):
        super().__init__(prog, width=100, max_help_position=32)

    def _get_help_string(self, action):
        text = action.help or ""
        hidden = action.default is None or action.default is False or action.default == argparse.SUPPRESS
        if not hidden and not action.required:
            text += " (default: %(default)s)"
        elif action.required:
            text += " (required)"
        return text


# ---------------------------------------------------------------- helpers


def _existing(path: str, kind: str = "path") -> Path:
    p = Path(path)
    if kind == "file" and not p.is_file():
        raise UsageError(f"no such file: {path}")
    if kind == "dir" and not p.is_dir():
        raise UsageError(f"no such directory: {path}")
    if kind == "path" and not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def _pngs(p: Path) -> list[Path]:
    if p.is_file():
        return [p]
    files = sorted(q for q in p.iterdir() if q.is_file() and q.suffix.lower() == ".png")
    if not files:
        raise UsageError(f"no .png files in {p}")
    return files


def _parse_param(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--param expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _load_config(path: str | None, overrides: dict) -> trainer.TrainConfig:
    data: dict = {}
    if path is not None:
        p = _existing(path, "file")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: malformed JSON at line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return trainer.TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _task_pairs(clean: Path, degraded: Path, task: str | None) -> list[tuple[str, Path, Path]]:
    """Match degraded files to clean files by name.

    Subdirectories of ``degraded`` are tasks; loose files form one task named
    ``task`` (default: the directory name).
    """
    if clean.is_file() != degraded.is_file():
        raise UsageError("--clean and --degraded must both be files or both be directories")
    if clean.is_file():
        return [(task or "task", clean, degraded)]
    out = []
    subdirs = sorted(d for d in degraded.iterdir() if d.is_dir())
    groups = [(d.name, d) for d in subdirs] or [(task or degraded.name, degraded)]
    for name, folder in groups:
        for f in _pngs(folder):
            c = clean / f.name
            if not c.is_file():
                raise UsageError(f"no clean counterpart for {f} (expected {c})")
            out.append((name, c, f))
    if not out:
        raise UsageError(f"no image pairs found under {degraded}")
    return out


def _degrade_one(args: tuple[str, str, dict]) -> None:
    src, dst, spec = args
    img = imagestack.load_image(src)
    imagestack.save_image(imagestack.apply_degradation(img, imagestack.DegradationSpec.from_dict(spec)), dst)


def _analyze_one(args: tuple[str, str]) -> degradelab.DegradationStats:
    return degradelab.analyze_pair(imagestack.load_image(args[0]), imagestack.load_image(args[1]))


def _map(fn, items: list, jobs: int) -> list:
    """Ordered map; results come back in input order whatever ``jobs`` is."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _fmt(x: float) -> str:
    return "inf" if np.isinf(x) else f"{x:.4f}"


# ---------------------------------------------------------------- commands


def cmd_degrade(a) -> int:
    src = _existing(a.inp)
    files = _pngs(src)
    params = dict(_parse_param(p) for p in a.param)
    try:
        base = imagestack.DegradationSpec(a.kind, params, seed=a.seed)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs, manifest = [], []
    for i, f in enumerate(files):
        spec = imagestack.DegradationSpec(base.kind, dict(base.params), seed=(a.seed + i) % 2**64)
        jobs.append((str(f), str(out / f.name), spec.to_dict()))
        manifest.append({"file": f.name, **spec.to_dict()})
    _map(_degrade_one, jobs, a.jobs)
    (out / "degradations.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(files)} image(s) to {out}")
    return 0


def cmd_analyze(a) -> int:
    pairs = _task_pairs(_existing(a.clean), _existing(a.degraded), a.task)
    stats = _map(_analyze_one, [(str(c), str(d)) for _, c, d in pairs], a.jobs)
    grouped: dict[str, list] = {}
    for (task, c, d), s in zip(pairs, stats):
        grouped.setdefault(task, []).append((s, c, d))
    reports = {}
    for task, rows in grouped.items():
        items = [(imagestack.load_image(c), imagestack.load_image(d)) for _, c, d in rows]
        reports[task] = degradelab.aggregate(task, [s for s, _, _ in rows], items)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    degradelab.write_report(reports, out, a.csv_dir)
    if a.svg:
        degradelab.write_boxplot_svg(reports, out.with_suffix(".svg"))
    for r in reports.values():
        print(f"{r.task}: {r.majority} (agreement {r.agreement:.2f}, n={r.n}, "
              f"err_vec_swap {r.mean['err_vec_swap']:.4g}, err_val_swap {r.mean['err_val_swap']:.4g})")
    return 0


def cmd_classify(a) -> int:
    c = imagestack.load_image(_existing(a.clean, "file"))
    d = imagestack.load_image(_existing(a.degraded, "file"))
    try:
        res = degradelab.classify(c, d)
    except degradelab.AmbiguousError as exc:
        print(f"Ambiguous: {exc}", file=sys.stderr)
        return 2
    print(f"{res.label.value} margin={res.margin:.6g}")
    return 0


def cmd_progressive(a) -> int:
    img = imagestack.load_image(_existing(a.inp, "file"))
    if a.channel != "gray" and int(a.channel) >= img.shape[2]:
        raise UsageError(f"--channel {a.channel} out of range for a {img.shape[2]}-channel image")
    x = img.mean(axis=2) if a.channel == "gray" else img[:, :, int(a.channel)]
    curve = lindecomp.progressive_reconstruction(x.astype(np.float64), a.order)
    lindecomp.write_curve_csv(curve, a.out)
    print(f"{a.order}: {len(curve)} points written to {a.out}")
    return 0


def cmd_bench(a) -> int:
    if min(a.c, a.h, a.w) < 8 or a.reps < 3:
        raise UsageError("--c, --h and --w must be >= 8 and --reps >= 3")
    rep = lindecomp.bench_decomp(a.c, a.h, a.w, a.reps, a.seed)
    rep.write_json(a.out)
    if a.csv:
        rep.write_csv(a.csv)
    d = rep.to_dict()
    print(f"svd total {d['svd_total_ms']:.3f} ms, fft total {d['fft_total_ms']:.3f} ms, ratio {rep.ratio:.1f}x")
    return 0


def cmd_gradcheck(a) -> int:
    comps = list(autodiff.GRADCHECK_BOUNDS) if a.component == "all" else [a.component]
    failed = False
    for c in comps:
        err = autodiff.gradcheck(c, seed=a.seed)
        bound = autodiff.GRADCHECK_BOUNDS[c]
        ok = err <= bound
        failed |= not ok
        print(f"{c:12s} max_rel_err={err:.3e} bound={bound:.0e} {'ok' if ok else 'FAIL'}")
    return 2 if failed else 0


def cmd_train(a) -> int:
    cfg = _load_config(a.config, {"steps": a.steps, "seed": a.seed})
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = a.log or str(out.with_suffix(".log.csv"))
    res = trainer.train(cfg, out=out, log_path=log_path)
    if res.eval_table:
        m = res.eval_table["all"]
        print(f"held-out PSNR {_fmt(m['psnr'])} dB (degraded {_fmt(m['psnr_degraded'])} dB), SSIM {m['ssim']:.4f}")
    print(f"checkpoint {out}, log {log_path}")
    return 0


def cmd_eval(a) -> int:
    ckpt = _existing(a.ckpt, "file")
    if a.heldout:
        if a.clean or a.degraded:
            raise UsageError("--heldout cannot be combined with --clean/--degraded")
        model, cfg = trainer.load_model(ckpt)
        pairs = trainer.heldout_pairs(cfg)
    else:
        if not (a.clean and a.degraded):
            raise UsageError("give --clean and --degraded, or --heldout")
        paths = _task_pairs(_existing(a.clean), _existing(a.degraded), a.task)
        model, _ = trainer.load_model(ckpt)
        pairs = [(t, imagestack.load_image(c), imagestack.load_image(d)) for t, c, d in paths]
    table = trainer.evaluate(model, pairs)
    trainer.write_metrics_csv(table, a.out)
    for task, m in table.items():
        print(f"{task}: PSNR {_fmt(m['psnr'])} (degraded {_fmt(m['psnr_degraded'])}), "
              f"SSIM {m['ssim']:.4f} (degraded {m['ssim_degraded']:.4f}), n={m['n']}")
    return 0


def cmd_ablate(a) -> int:
    cfg = _load_config(a.config, {"steps": a.steps})
    rows = trainer.ablate(cfg, a.toggles)
    trainer.write_ablation_csv(rows, a.out)
    for r in rows:
        flags = " ".join(f"{t}={'on' if r[t] else 'off'}" for t in trainer.TOGGLES)
        print(f"{flags}  PSNR {_fmt(r['psnr'])}  SSIM {r['ssim']:.4f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svdrestore", formatter_class=_Formatter,
                description="SVD/DFT degradation analysis and decomposition-aware restoration at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=_Formatter)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("degrade", cmd_degrade, "apply a synthetic degradation to PNG images")
    sp.add_argument("--in", dest="inp", required=True, help="input PNG file or directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--kind", required=True, help="one of " + ", ".join(imagestack.KINDS))
    sp.add_argument("--seed", type=int, default=0, help="base seed; file i (sorted by name) uses seed+i")
    sp.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                    help="degradation parameter, repeatable (e.g. sigma=25, t=0.5)")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = add("analyze", cmd_analyze, "swap-recomposition statistics for clean/degraded pairs")
    sp.add_argument("--clean", required=True, help="clean PNG file or directory")
    sp.add_argument("--degraded", required=True,
                    help="degraded PNG file or directory; subdirectories are treated as tasks")
    sp.add_argument("--out", required=True, help="stats JSON path")
    sp.add_argument("--task", default=None, help="task name for loose files (default: directory name)")
    sp.add_argument("--csv-dir", default=None, help="also write <task>.csv tables here")
    sp.add_argument("--svg", action="store_true", help="also write a singular value boxplot next to --out")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = add("classify", cmd_classify, "label one pair VectorDominated or ValueDominated")
    sp.add_argument("--clean", required=True, help="clean PNG")
    sp.add_argument("--degraded", required=True, help="degraded PNG")

    sp = add("progressive", cmd_progressive, "relative error curve of progressive reconstruction")
    sp.add_argument("--in", dest="inp", required=True, help="input PNG")
    sp.add_argument("--out", required=True, help="curve CSV path")
    sp.add_argument("--order", choices=("svd_rank", "fft_radius"), default="svd_rank",
                    help="add rank-1 SVD terms or Fourier coefficients by frequency radius")
    sp.add_argument("--channel", default="gray", choices=("gray", "0", "1", "2"),
                    help="channel index, or gray for the channel mean")

    sp = add("bench", cmd_bench, "time per-channel SVD against 2D FFT decompose+compose")
    sp.add_argument("--c", type=int, default=64, help="channels")
    sp.add_argument("--h", type=int, default=128, help="height")
    sp.add_argument("--w", type=int, default=128, help="width")
    sp.add_argument("--reps", type=int, default=10, help="timed repetitions (median reported)")
    sp.add_argument("--seed", type=int, default=0, help="input seed")
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--csv", default=None, help="also write the report as CSV")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient checks in float64")
    sp.add_argument("--component", default="all", choices=["all", *autodiff.GRADCHECK_BOUNDS],
                    help="component to check")
    sp.add_argument("--seed", type=int, default=0, help="case seed")

    sp = add("train", cmd_train, "train the toy backbone")
    sp.add_argument("--config", default=None, help="TrainConfig JSON (missing keys take defaults)")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", default=None, help="trajectory CSV; <out>.log.csv when omitted")
    sp.add_argument("--steps", type=int, default=None, help="override config steps")
    sp.add_argument("--seed", type=int, default=None, help="override config seed")

    sp = add("eval", cmd_eval, "PSNR/SSIM of a checkpoint on image pairs")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--clean", default=None, help="clean PNG file or directory")
    sp.add_argument("--degraded", default=None,
                    help="degraded PNG file or directory; subdirectories are treated as tasks")
    sp.add_argument("--task", default=None, help="task name for loose files")
    sp.add_argument("--heldout", action="store_true",
                    help="use the synthetic held-out patches of the checkpoint's config instead")
    sp.add_argument("--out", required=True, help="metrics CSV path")

    sp = add("ablate", cmd_ablate, "train every on/off combination of the chosen toggles")
    sp.add_argument("--config", default=None, help="TrainConfig JSON")
    sp.add_argument("--toggles", nargs="+", default=list(trainer.TOGGLES), choices=trainer.TOGGLES,
                    help="components to switch")
    sp.add_argument("--steps", type=int, default=None, help="override config steps")
    sp.add_argument("--out", required=True, help="comparison CSV path")
    return p


RUNTIME_ERRORS = (ValueError, OSError, RuntimeError, KeyError, imagestack.ImageDecodeError,
                  trainer.CheckpointError, trainer.TrainingDiverged)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("svdrestore: a subcommand is required (see --help)")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
