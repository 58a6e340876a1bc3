"""Command-line front end.

Subcommands: gen-data, import, train, rollout, eval, gradcheck, sweep,
pareto, ablate-waves.  Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    p = _Parser(prog="dwnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default="out")
        sp.add_argument("--threads", type=int, default=1)

    sp = sub.add_parser("gen-data", help="generate solver trajectories")
    common(sp)

    sp = sub.add_parser("import", help="convert external data to the trajectory format")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dt", type=float, default=None)
    sp.add_argument("--names", default=None, help="comma-separated field names")
    sp.add_argument("--periodic", default="00",
                    help="two flags yx, e.g. 11 for doubly periodic")

    sp = sub.add_parser("train", help="train one model configuration")
    common(sp)
    sp.add_argument("--data-dir", required=True)

    sp = sub.add_parser("rollout", help="roll a checkpoint out autoregressively")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="trajectory supplying the history")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("eval", help="compare a predicted trajectory to ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--metric", choices=["scaled_l2", "spectrum"],
                    default="scaled_l2")
    sp.add_argument("--out", default=None, help="optional CSV of per-step errors")

    sp = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("sweep", help="train the full width/family grid")
    common(sp)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--infer-cost", action="store_true",
                    help="plot inference time instead of training time")

    sp = sub.add_parser("pareto", help="non-dominated front of a records CSV")
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--infer-cost", action="store_true")

    sp = sub.add_parser("ablate-waves", help="sweep the wave-count grid")
    common(sp)
    sp.add_argument("--data-dir", required=True)
    return p


def _dataset_paths(data_dir) -> tuple[list[Path], list[Path]]:
    data_dir = Path(data_dir)
    train = sorted((data_dir / "train").glob("*.dwtrj"))
    test = sorted((data_dir / "test").glob("*.dwtrj"))
    if not train:
        raise FileNotFoundError(f"no training trajectories under {data_dir}/train")
    if not test:
        raise FileNotFoundError(f"no test trajectories under {data_dir}/test")
    return train, test


def cmd_gen_data(args) -> int:
    from . import configfile, solvers
    from .trajectory import save_trajectory

    cp = configfile.load_config(args.config)
    cfg, n_train, n_test = configfile.solver_config_from(cp, args.seed)
    out = Path(args.out_dir)
    for split, count, base in (("train", n_train, 0), ("test", n_test, 10_000)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            c = replace(cfg, seed=cfg.seed + base + i)
            traj = solvers.generate(c)
            dest = out / split / f"{cfg.system}_{i:03d}.dwtrj"
            save_trajectory(dest, traj)
            print(f"wrote {dest} ({traj.frames} frames of "
                  f"{traj.num_fields}x{c.grid}x{c.grid})")
    return 0


def cmd_import(args) -> int:
    from .trajectory import import_external, save_trajectory

    names = args.names.split(",") if args.names else None
    periodic = tuple(ch == "1" for ch in args.periodic.ljust(2, "0")[:2])
    traj = import_external(args.input, dt=args.dt, field_names=names,
                           periodic=periodic)
    save_trajectory(args.out, traj)
    print(f"imported {args.input} -> {args.out} ({traj.frames} frames)")
    return 0


def cmd_train(args) -> int:
    from . import configfile, models
    from .training import Dataset, save_training_state, AdamState, train
    from .trajectory import load_trajectory

    cp = configfile.load_config(args.config)
    tcfg = configfile.train_config_from(cp)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    train_paths, _ = _dataset_paths(args.data_dir)
    dataset = Dataset([load_trajectory(p) for p in train_paths])
    m = dataset.num_fields
    mcfg = configfile.model_config_from(cp, tcfg.history_length * m, m)
    model = models.build(mcfg, seed=tcfg.seed)
    state = AdamState.for_params(model.params)
    model, rec = train(model, dataset, tcfg, adam_state=state)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{mcfg.family.value}_w{mcfg.width}_k{mcfg.waves}_s{tcfg.seed}.ckpt"
    save_training_state(ckpt, model, state)
    print(f"trained {mcfg.family.value} width={mcfg.width} waves={mcfg.waves}: "
          f"final loss {rec.final_loss:.5g} in {rec.train_wall_s:.1f}s -> {ckpt}")
    return 0


def cmd_rollout(args) -> int:
    from . import metrics, models
    from .trajectory import load_trajectory, save_trajectory

    model, _ = models.load_checkpoint(args.checkpoint)
    src = load_trajectory(args.data)
    m = src.num_fields
    h_hist = model.config.in_channels // m
    hist = src.fields[:h_hist]
    pred = metrics.rollout(model, hist, args.steps, src.mean, src.std, src.dt,
                           field_names=src.field_names, periodic=src.periodic)
    save_trajectory(args.out, pred)
    note = f" (blew up at step {pred.meta['blew_up_at']})" if "blew_up_at" in pred.meta else ""
    print(f"rolled out {pred.frames} frames -> {args.out}{note}")
    return 0


def cmd_eval(args) -> int:
    from . import metrics
    from .trajectory import load_trajectory

    pred = load_trajectory(args.pred)
    truth = load_trajectory(args.truth)
    n = min(pred.frames, truth.frames)
    if args.metric == "scaled_l2":
        errs = [metrics.scaled_l2(pred.fields[t], truth.fields[t])
                for t in range(n)]
        print(f"err_first={errs[0]!r} err_last={errs[-1]!r}")
        if args.out:
            metrics.write_curve_csv(args.out, np.arange(n), errs, xlabel="step")
    else:
        errs = metrics.spectrum_errors(pred, truth)
        for name, e in errs.items():
            print(f"spectrum_err[{name}]={e!r}")
        if args.out:
            metrics.write_curve_csv(args.out, np.arange(len(errs)),
                                    list(errs.values()), xlabel="field")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    return 0 if run_suite(verbose=True, seed=args.seed) else 2


def _core_sweep(args, spec) -> int:
    from . import sweep as sw

    train_paths, test_paths = _dataset_paths(args.data_dir)
    records = sw.sweep(spec, train_paths, test_paths, args.out_dir,
                       workers=args.threads)
    cost = "infer_s_per_step" if getattr(args, "infer_cost", False) else "train_s"
    out = Path(args.out_dir)
    sw.render_svg(records, out / "pareto.svg", cost=cost,
                  title=f"{spec.system}: error vs cost")
    pts = sw.records_to_points(records, cost=cost)
    if pts:
        front = sw.pareto_front(pts)
        with open(out / "front.csv", "w") as f:
            f.write("cost,error,family,width,waves,seed\n")
            for p in front:
                fam, width, waves, seed = p.provenance
                f.write(f"{p.cost!r},{p.error!r},{fam},{width},{waves},{seed}\n")
        print(f"front: {len(front)} of {len(pts)} points")
    return 0


def cmd_sweep(args) -> int:
    from . import configfile

    cp = configfile.load_config(args.config)
    return _core_sweep(args, configfile.sweep_spec_from(cp))


def cmd_ablate(args) -> int:
    from . import configfile

    cp = configfile.load_config(args.config)
    return _core_sweep(args, configfile.ablate_spec_from(cp))


def cmd_pareto(args) -> int:
    from . import sweep as sw

    records = sw.read_records_csv(args.records)
    cost = "infer_s_per_step" if args.infer_cost else "train_s"
    by_hw: dict[str, list] = {}
    for r in records:
        by_hw.setdefault(r.hardware, []).append(r)
    total = 0
    for hw, rs in sorted(by_hw.items()):
        pts = sw.records_to_points(rs, cost=cost)
        if not pts:
            continue
        front = sw.pareto_front(pts)
        total += len(front)
        print(f"[{hw}] front: {len(front)} of {len(pts)} points")
        for p in front:
            fam, width, waves, seed = p.provenance
            print(f"  cost={p.cost:.4g} err={p.error:.4g} "
                  f"{fam} w={width} k={waves} seed={seed}")
        if args.out:
            with open(args.out, "w") as f:
                f.write("cost,error,family,width,waves,seed\n")
                for p in front:
                    fam, width, waves, seed = p.provenance
                    f.write(f"{p.cost!r},{p.error!r},{fam},{width},{waves},{seed}\n")
    if total == 0:
        print("no usable points (all failed or unselected)")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data, "import": cmd_import, "train": cmd_train,
    "rollout": cmd_rollout, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep, "pareto": cmd_pareto, "ablate-waves": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # solver/training runtime failures
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
