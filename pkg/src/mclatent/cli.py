"""``mclatent`` command line: pretrain, probe, analyze, synth-data,
grad-check, inspect-ckpt and sweep.

Exit status: 0 on success, 1 on a usage or validation error, 2 on a runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .errors import ConfigError, InputError, MclError

log = logging.getLogger("mclatent")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. model.r=3")
    p.add_argument("--out", help="output directory (default: train.out_dir)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mclatent", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("probe", help="linear probe on a frozen checkpoint")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint (default: <out>/ckpt_final.bin)")
    p.add_argument("--random-init", action="store_true", help="probe a freshly initialised encoder instead")

    p = sub.add_parser("analyze", help="winner histograms and hypothesis prototypes")
    _common(p)
    p.add_argument("--ckpt", help="checkpoint (default: <out>/ckpt_final.bin)")

    p = sub.add_parser("synth-data", help="write synthetic WAV clips and a manifest")
    _common(p)
    p.add_argument("--kind", choices=("scenes", "events4"), default="events4")
    p.add_argument("--n", type=int, default=20, help="clips per split")
    p.add_argument("--recipe", help="render a single TOML scene recipe instead")

    p = sub.add_parser("grad-check", help="finite-difference check of the training loss")
    p.add_argument("--strategy", choices=("annealed", "greedy", "mean"), default="annealed")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-fault", action="store_true", help="scale analytic gradients by 1.01 (must fail)")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("inspect-ckpt", help="list the tensors in a checkpoint")
    p.add_argument("path")
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("sweep", help="pretrain and probe over strategies and hypothesis counts")
    _common(p)
    p.add_argument("--strategies", default="annealed,greedy,mean")
    p.add_argument("--rs", default="1,2,3,5")
    return ap


# -- helpers ---------------------------------------------------------------
def _resolve(args) -> tuple[config_mod.RunConfig, str]:
    cfg = config_mod.load(args.config, args.overrides)
    out = args.out or cfg.train.out_dir
    cfg.train.out_dir = out
    os.makedirs(out, exist_ok=True)
    config_mod.save(cfg, os.path.join(out, "resolved.toml"))
    return cfg, out


def _load_state(args, cfg, out):
    from .checkpoint import load_checkpoint

    path = args.ckpt or os.path.join(out, "ckpt_final.bin")
    if not os.path.exists(path):
        raise InputError(f"checkpoint not found: {path}")
    state = load_checkpoint(path)
    # evaluation settings come from the invocation, the model from the file
    state.cfg.probe, state.cfg.analysis = cfg.probe, cfg.analysis
    return state


# -- subcommands -----------------------------------------------------------
def cmd_pretrain(args) -> int:
    from .trainer import run

    cfg, out = _resolve(args)
    res = run(cfg, out_dir=out, resume=args.resume, progress=True)
    last = res.history[-1] if res.history else None
    if last is not None:
        print(f"step {res.state.step}: total {last.total:.6f} pred {last.pred_loss:.6f} cls {last.cls_loss:.6f} ({res.seconds:.1f}s)")
    print(os.path.join(out, "ckpt_final.bin"))
    return EXIT_OK


def probe_rows(state, cfg) -> list:
    """One row per probe seed, then the seed average under the bare task name."""
    from .probe import ProbeResult, probe_checkpoint

    results = probe_checkpoint(state, cfg)
    task = cfg.probe.task
    rows = [(f"{task}[seed={s}]", r) for s, r in zip(cfg.probe.seeds, results)]
    mean = ProbeResult(
        results[0].metric,
        float(np.mean([r.value for r in results])),
        np.nanmean([r.per_class for r in results], axis=0),
        int(round(np.mean([r.epoch for r in results]))),
    )
    rows.append((task, mean))
    return rows


def cmd_probe(args) -> int:
    from .probe import write_results
    from .trainer import init_state

    cfg, out = _resolve(args)
    if args.random_init:
        from .data import build_dataset, norm_stats

        state, tag = init_state(cfg, norm_stats(build_dataset(cfg))), "random"
    else:
        state, tag = _load_state(args, cfg, out), "ckpt"
    rows = probe_rows(state, cfg)
    path = os.path.join(out, f"probe_{cfg.probe.task}_{tag}.csv")
    write_results(path, rows)
    print(f"{rows[-1][0]} {rows[-1][1].metric} {rows[-1][1].value:.4f} -> {path}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from . import analysis
    from .data import build_dataset

    cfg, out = _resolve(args)
    state = _load_state(args, cfg, out)
    a = cfg.analysis
    wlog = analysis.collect_winners(state, build_dataset(state.cfg), a.sample_limit, a.seed)
    wlog.write_csv(os.path.join(out, "winners.csv"))
    hist = analysis.utilisation_histogram(wlog)
    with open(os.path.join(out, "utilisation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hypothesis", "count", "frequency"])
        for j, (c, f) in enumerate(zip(wlog.counts(), hist)):
            w.writerow([j, int(c), repr(float(f))])
    protos = analysis.prototypes(wlog, k=a.k, seed=a.seed, max_iter=a.max_iter, tol=a.tol)
    analysis.export_prototypes(protos, out)
    for j, n in protos.under_populated.items():
        log.warning("hypothesis %d won only %d patches; fewer than k=%d, not clustered", j, n, a.k)
    print("utilisation " + " ".join(f"{f:.4f}" for f in hist))
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .data import EVENT_CLASSES, EventTaskDataset, SceneDataset
    from .frontend import load_recipe, synth_scene, warn_clipped, write_manifest, write_wav

    cfg, out = _resolve(args)
    if args.recipe:
        clip = synth_scene(load_recipe(args.recipe), seed=cfg.data.seed)
        warn_clipped(clip, args.recipe)
        path = os.path.join(out, "scene.wav")
        write_wav(path, clip)
        print(path)
        return EXIT_OK
    rows = []
    for k, split in enumerate(("train", "val", "test")):
        cls = EventTaskDataset if args.kind == "events4" else SceneDataset
        ds = cls(args.n, cfg.data.clip_seconds, cfg.data.mel(), cfg.data.seed * 10 + k)
        for i in range(args.n):
            clip = ds.clip(i)
            name = f"{split}_{i:05d}.wav"
            warn_clipped(clip, name)
            write_wav(os.path.join(out, name), clip)
            label = EVENT_CLASSES[ds.label(i)] if args.kind == "events4" else "scene"
            rows.append({"path": name, "label": label, "split": split})
    write_manifest(os.path.join(out, "manifest.csv"), rows)
    print(os.path.join(out, "manifest.csv"))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .verify import check_combined_loss

    worst = None
    for s in range(args.seeds):
        rep = check_combined_loss(args.strategy, seed=s, tol=args.tol, corrupt=1.01 if args.inject_fault else 1.0)
        log.info("seed %d: %s", s, rep)
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    print(f"{args.strategy} over {args.seeds} seeds: {worst}")
    return EXIT_OK if worst.passed else EXIT_RUNTIME


def cmd_inspect(args) -> int:
    from .checkpoint import describe

    if not os.path.exists(args.path):
        raise InputError(f"no such file: {args.path}")
    for name, dtype, shape in describe(args.path):
        print(f"{name}\t{dtype}\t{'x'.join(map(str, shape)) or 'scalar'}")
    return EXIT_OK


SWEEP_HEADER = ["strategy", "r", "task", "metric", "value", "pred_loss", "cls_loss", "utilisation"]


def cmd_sweep(args) -> int:
    from . import analysis
    from .data import build_dataset
    from .trainer import run

    base, out = _resolve(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rs = [int(v) for v in args.rs.split(",") if v.strip()]
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for strategy in strategies:
            for r in rs:
                cfg = config_mod.load(args.config, args.overrides + [f"loss.strategy='{strategy}'", f"model.r={r}"])
                sub = os.path.join(out, f"{strategy}_r{r}")
                res = run(cfg, out_dir=sub)
                config_mod.save(cfg, os.path.join(sub, "resolved.toml"))
                rows = probe_rows(res.state, cfg)
                wlog = analysis.collect_winners(res.state, build_dataset(cfg), cfg.analysis.sample_limit, cfg.analysis.seed)
                util = " ".join(f"{f:.4f}" for f in analysis.utilisation_histogram(wlog))
                last = res.history[-1]
                summary = rows[-1][1]
                w.writerow([strategy, r, rows[-1][0], summary.metric, repr(summary.value), repr(last.pred_loss), repr(last.cls_loss), util])
                fh.flush()
                print(f"{strategy} r={r}: {summary.metric} {summary.value:.4f}")
    print(path)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
    "synth-data": cmd_synth_data,
    "grad-check": cmd_grad_check,
    "inspect-ckpt": cmd_inspect,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"mclatent {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MclError, OSError, ArithmeticError) as exc:
        print(f"mclatent {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
