"""Command line entry point: ``attdistill <command> --config <path-or-name>``.

Exit codes: 0 success, 2 configuration or compatibility error,
3 divergence, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import buffer as bf
from . import diagnostics as dg
from . import plotting
from .config import ConfigError, RunConfig, load_config, shipped_config_path, shipped_configs
from .datasets import DatasetError, IdxFormatError, fingerprint, load_dataset, write_csv
from .engine import FTL, IncompatibleBufferError, distill, init_synth, load_synth, read_jsonl, save_synth
from .evaluate import EvalConfig, evaluate, random_subset_baseline
from .nn import DimensionError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

log = logging.getLogger("attdistill")


class Diverged(Exception):
    pass


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _config(args) -> RunConfig:
    path = Path(args.config)
    if not path.exists() and not path.suffix:
        try:
            path = shipped_config_path(args.config)
        except FileNotFoundError:
            raise ConfigError(args.config, f"no such file or shipped config ({', '.join(shipped_configs())})") from None
    return load_config(path, seed=args.seed, mode=args.mode)


def _run_dir(cfg, args) -> Path:
    d = Path(args.run_dir) if args.run_dir else cfg.run_dir()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _check_fingerprint(fp: bytes, data, what):
    if fp != b"\0" * 32 and fp != fingerprint(data.train):
        raise IncompatibleBufferError(f"{what} was produced from a different dataset than the config describes")


def _load_buffer(cfg, run_dir, data):
    path = cfg.resolve("buffer", run_dir)
    buf = bf.load_buffer(path)
    _check_fingerprint(buf.dataset_fingerprint, data, f"buffer {path}")
    if buf.arch != cfg.arch:
        raise IncompatibleBufferError(f"buffer architecture {buf.arch} differs from config arch {cfg.arch}")
    return buf


def cmd_buffer(args):
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    run_dir = _run_dir(cfg, args)
    e = cfg.experts
    try:
        buf = bf.build_buffer(cfg.arch, data.train, e.count, e.epochs, bf.TrainMeta(e.step_size, e.batch_size),
                              base_seed=e.seed, jobs=args.jobs)
    except bf.ExpertDivergedError as exc:
        raise Diverged(str(exc)) from None
    path = cfg.resolve("buffer", run_dir)
    size = bf.save_buffer(buf, path)
    print(f"wrote {path}: experts={len(buf)} M={buf.epochs} params={cfg.arch.param_count} bytes={size}")


def cmd_distill(args):
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    run_dir = _run_dir(cfg, args)
    buf = _load_buffer(cfg, run_dir, data)
    match = cfg.match if args.iterations is None else cfg.match.replace(iterations=args.iterations)
    synth0 = init_synth(match, data.train, cfg.arch.num_classes)
    report = distill(match, buf, synth0)
    synth_path = cfg.resolve("synth_out", run_dir)
    report_path = cfg.resolve("report_out", run_dir)
    save_synth(report.final_synth, synth_path, fingerprint(data.train))
    report.write_jsonl(report_path, trace_distances=args.trace_distances)
    losses = [r.loss for r in report.records if r.loss is not None]
    tail = losses[-50:]
    summary = f"mean loss (last {len(tail)}) = {sum(tail) / len(tail):.6g}" if tail else "no iterations"
    print(f"wrote {synth_path} and {report_path}: {len(report.records)} iterations, {summary}, "
          f"lr_student={report.final_synth.lr_student:.6g}")
    if report.diverged:
        raise Diverged(f"distillation diverged at iteration {report.records[-1].iter}")


def cmd_eval(args):
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    run_dir = _run_dir(cfg, args)
    if args.baseline:
        synth = random_subset_baseline(data.train, cfg.match.ipc, cfg.match.seed, cfg.match.lr_init)
        out = run_dir / "eval-baseline.csv"
    else:
        path = Path(args.synth) if args.synth else cfg.resolve("synth_out", run_dir)
        synth, fp = load_synth(path)
        _check_fingerprint(fp, data, f"synthetic set {path}")
        out = run_dir / f"eval-{cfg.match.mode}.csv"
    ev = cfg.eval
    result = evaluate(synth, EvalConfig(list(ev.archs), data.test, ev.n_seeds, ev.train_steps,
                                        ev.use_learned_lr, ev.lr_override))
    result.write_csv(out)
    for name, r in result.results.items():
        print(f"{name}: {100 * r.mean_acc:.2f} +- {100 * r.std_acc:.2f} % (std over {len(r.per_seed_acc)} seeds)")
    print(f"wrote {out}")


def cmd_diagnose(args):
    cfg = _config(args)
    run_dir = _run_dir(cfg, args)
    if args.which == "amp":
        _diagnose_amp(cfg, args, run_dir)
    elif args.which == "trace":
        _diagnose_trace(cfg, args, run_dir)
    else:
        _diagnose_stability(cfg, args, run_dir)


def _diagnose_amp(cfg, args, run_dir):
    gammas = _int_list(args.gammas) if args.gammas else [args.gamma]
    reports = []
    if args.sweep_n_s:
        data = load_dataset(cfg.dataset)
        buf = _load_buffer(cfg, run_dir, data)
        for n_s in _int_list(args.sweep_n_s):
            match = cfg.match.replace(mode=FTL, n_s=n_s)
            rep = distill(match, buf, init_synth(match, data.train, cfg.arch.num_classes))
            rep.write_jsonl(run_dir / f"report-ftl-ns{n_s}.jsonl", trace_distances=True)
            reports.append(rep.records)
        tag = "ftl-sweep"
    else:
        path = Path(args.report) if args.report else cfg.resolve("report_out", run_dir)
        reports.append(read_jsonl(path))
        tag = cfg.match.mode
    hists = [dg.amp_histogram(recs, g, args.interval) for recs in reports for g in gammas]
    csv_path = run_dir / f"amp-{tag}.csv"
    for i, h in enumerate(hists):
        h.write_csv(csv_path, append=i > 0)
        print(f"N_S={h.n_s} gamma={h.gamma}: counts={h.counts}")
    plotting.plot_amp_histograms(hists, run_dir / f"amp-{tag}.svg")
    print(f"wrote {csv_path}")


def _diagnose_trace(cfg, args, run_dir):
    path = Path(args.report) if args.report else cfg.resolve("report_out", run_dir)
    tr = dg.nopt_trace(read_jsonl(path))
    tag = cfg.match.mode
    tr.write_csv(run_dir / f"nopt-{tag}.csv")
    plotting.plot_nopt_traces({tag.upper(): tr}, run_dir / f"nopt-{tag}.svg", n_s=cfg.match.n_s)
    print(f"selected step mean: first 10% {tr.early_mean:.3g}, last 10% {tr.late_mean:.3g}")
    print(f"wrote {run_dir / f'nopt-{tag}.csv'}")


def _diagnose_stability(cfg, args, run_dir):
    data = load_dataset(cfg.dataset)
    buf = _load_buffer(cfg, run_dir, data)
    params = ["lr_img", "lr_sc"] if args.parameter == "both" else [args.parameter]
    modes = args.modes.split(",") if args.modes else [cfg.match.mode]
    results = []
    for mode in modes:
        for p in params:
            res = dg.stability_sweep(cfg.match.replace(mode=mode), buf, data.train, p,
                                     _float_list(args.multipliers), args.repeats, jobs=args.jobs)
            results.append(res)
            for m, s in zip(res.multipliers, res.successes):
                print(f"{mode} {p} x{m:g}: {s}/{res.repeats} successful")
    tag = "-".join(modes)
    csv_path = run_dir / f"stability-{tag}.csv"
    for i, r in enumerate(results):
        r.write_csv(csv_path, append=i > 0)
    plotting.plot_stability(results, run_dir / f"stability-{tag}.svg")
    print(f"wrote {csv_path}")


def cmd_dataset(args):
    cfg = _config(args)
    data = load_dataset(cfg.dataset)
    run_dir = _run_dir(cfg, args)
    write_csv(data.train, run_dir / "train.csv")
    write_csv(data.test, run_dir / "test.csv")
    for c, (ntr, nte) in sorted(data.class_counts.items()):
        print(f"class {c}: train={ntr} test={nte}")
    print(f"wrote {run_dir / 'train.csv'} and {run_dir / 'test.csv'}")


def cmd_configs(args):
    for name in shipped_configs():
        print(name)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML config path or shipped config name")
    common.add_argument("--mode", choices=["att", "ftl"], help="override match.mode")
    common.add_argument("--seed", type=int, help="override match.seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for parallel stages")
    common.add_argument("--run-dir", help="output directory (default: $ATT_DATA_DIR/runs/<name>-<hash>-s<seed>)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="attdistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("buffer", parents=[common], help="train experts and write the trajectory buffer").set_defaults(func=cmd_buffer)

    d = sub.add_parser("distill", parents=[common], help="distill a synthetic set from the buffer")
    d.add_argument("--trace-distances", action="store_true", help="store every distance trace in the report")
    d.add_argument("--iterations", type=int, help="override match.iterations")
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", parents=[common], help="evaluate a synthetic set on fresh networks")
    e.add_argument("--synth", help="synthetic set file (default: the run directory's)")
    e.add_argument("--baseline", action="store_true", help="evaluate a random real subset instead")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("diagnose", parents=[common], help="mismatch histograms, step traces, stability sweeps")
    g.add_argument("which", choices=["amp", "trace", "stability"])
    g.add_argument("--report", help="report JSONL (default: the run directory's)")
    g.add_argument("--gamma", type=int, default=dg.DEFAULT_GAMMA)
    g.add_argument("--gammas", help="comma-separated gamma sweep, e.g. 0,1,2,3,4,5")
    g.add_argument("--interval", type=int, default=dg.DEFAULT_INTERVAL)
    g.add_argument("--sweep-n-s", help="run one FTL distillation per N_S, e.g. 10,30,50")
    g.add_argument("--parameter", choices=["lr_img", "lr_sc", "both"], default="both")
    g.add_argument("--multipliers", default=",".join(f"{m:g}" for m in dg.DEFAULT_MULTIPLIERS))
    g.add_argument("--repeats", type=int, default=dg.DEFAULT_REPEATS)
    g.add_argument("--modes", help="comma-separated modes for the stability sweep, e.g. att,ftl")
    g.set_defaults(func=cmd_diagnose)

    sub.add_parser("dataset", parents=[common], help="export the loaded train/test split as CSV").set_defaults(func=cmd_dataset)

    c = sub.add_parser("configs", help="list shipped configs")
    c.set_defaults(func=cmd_configs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * getattr(args, "verbose", 0), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except IdxFormatError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DatasetError, IncompatibleBufferError, DimensionError, dg.MissingTraceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, bf.BufferError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
