"""Sweep orchestration: width grids, fixed-seed repetition, Pareto fronts.

A sweep trains every (family, width, waves, seed) cell, evaluates rollout
errors on held-out trajectories, keeps the best seed per cell by final-step
rollout error, and persists everything as CSV rows plus a log-log SVG
scatter of error against wall-clock cost.

Records carry the hardware string they were measured on; fronts are only
ever computed within one hardware group, never across machines.
"""

from __future__ import annotations

import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, models
from .models import Family, ModelConfig
from .tensor import PaddingMode
from .training import Dataset, RunRecord, TrainConfig, TrainingDiverged, train
from .trajectory import Trajectory, load_trajectory

CSV_COLUMNS = ["system", "family", "width", "waves", "seed", "params",
               "train_s", "infer_s_per_step", "err_first", "err_last",
               "selected", "hardware"]

FAILED = "failed"


def hardware_string() -> str:
    return f"{platform.system()}-{platform.machine()}-cpu{os.cpu_count()}".replace(",", ";")


def default_seeds(n: int) -> list[int]:
    """The fixed seed pattern 2, 12, 22, ..."""
    return [2 + 10 * i for i in range(n)]


@dataclass
class SweepSpec:
    system: str
    families: list[tuple[Family, int]]        # (family, waves)
    widths: list[int] = field(default_factory=lambda: [4, 8, 16])
    seeds: list[int] = field(default_factory=lambda: default_seeds(3))
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout_steps: int = 16
    metric: str = "scaled_l2"                 # or "spectrum"
    levels: int = 5
    padding: PaddingMode = PaddingMode.PERIODIC
    spectrum_discard: int = 100

    def validate(self):
        if not self.families:
            raise ValueError("no families to sweep")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be strictly increasing")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.metric not in ("scaled_l2", "spectrum"):
            raise ValueError(f"unknown metric {self.metric!r}")

    def cells(self) -> list[tuple[Family, int, int, int]]:
        return [(fam, waves, width, seed)
                for fam, waves in self.families
                for width in self.widths
                for seed in self.seeds]


@dataclass(frozen=True)
class ParetoPoint:
    cost: float
    error: float
    provenance: tuple = ()

    def dominates(self, other: "ParetoPoint") -> bool:
        return (self.cost <= other.cost and self.error <= other.error
                and (self.cost < other.cost or self.error < other.error))


def pareto_front(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Points not dominated by any other, sorted by cost ascending.

    Dominance: another point with cost <= and error <= and at least one
    strict.  Exact ties on both axes are all kept.
    """
    if not points:
        raise ValueError("empty point set")
    front = [p for p in points if not any(q.dominates(p) for q in points)]
    return sorted(front, key=lambda p: (p.cost, p.error))


# ---------------------------------------------------------------------------
# record CSV


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def record_to_row(rec: RunRecord) -> str:
    err_first = FAILED if rec.failed else _fmt(rec.err_first)
    err_last = FAILED if rec.failed else _fmt(rec.err_last)
    vals = [rec.system, rec.family, _fmt(rec.width), _fmt(rec.waves),
            _fmt(rec.seed), _fmt(rec.params), _fmt(rec.train_wall_s),
            _fmt(rec.infer_s_per_step), err_first, err_last,
            _fmt(rec.selected), rec.hardware]
    return ",".join(vals)


def row_to_record(row: str) -> RunRecord:
    parts = row.rstrip("\n").split(",")
    if len(parts) != len(CSV_COLUMNS):
        raise ValueError(f"malformed record row: {row!r}")
    failed = parts[8] == FAILED
    return RunRecord(
        system=parts[0], family=parts[1], width=int(parts[2]),
        waves=int(parts[3]), seed=int(parts[4]), params=int(parts[5]),
        train_wall_s=float(parts[6]), infer_s_per_step=float(parts[7]),
        err_first=float("nan") if failed else float(parts[8]),
        err_last=float("nan") if failed else float(parts[9]),
        selected=parts[10] == "1", hardware=parts[11], failed=failed)


def write_records_csv(path, records: list[RunRecord]) -> None:
    with open(path, "w") as f:
        f.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            f.write(record_to_row(rec) + "\n")


def read_records_csv(path) -> list[RunRecord]:
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != ",".join(CSV_COLUMNS):
            raise ValueError(f"{path}: unexpected CSV header")
        return [row_to_record(line) for line in f if line.strip()]


def selection_key(rec: RunRecord) -> float:
    """Best-of-seeds key: final-step rollout error; for the statistical
    metric both field errors are reported, so their mean decides."""
    if rec.failed or not np.isfinite(rec.err_last):
        return float("inf")
    if np.isfinite(rec.err_first):
        return float(rec.err_last) if rec.system != "hasegawa_wakatani" \
            else float((rec.err_first + rec.err_last) / 2.0)
    return float(rec.err_last)


def mark_selected(records: list[RunRecord]) -> list[RunRecord]:
    """Flag the best seed within every (family, width, waves) group."""
    best: dict[tuple, int] = {}
    for i, rec in enumerate(records):
        key = (rec.system, rec.family, rec.width, rec.waves)
        if key not in best or selection_key(rec) < selection_key(records[best[key]]):
            best[key] = i
    chosen = set(best.values())
    return [replace(rec, selected=(i in chosen
                                   and selection_key(rec) != float("inf")))
            for i, rec in enumerate(records)]


def records_to_points(records: list[RunRecord], cost: str = "train_s",
                      selected_only: bool = True) -> list[ParetoPoint]:
    pts = []
    for rec in records:
        if rec.failed or (selected_only and not rec.selected):
            continue
        c = rec.train_wall_s if cost == "train_s" else rec.infer_s_per_step
        pts.append(ParetoPoint(float(c), float(selection_key(rec)),
                               (rec.family, rec.width, rec.waves, rec.seed)))
    return pts


# ---------------------------------------------------------------------------
# one sweep cell


def run_cell(system: str, family: Family, waves: int, width: int, seed: int,
             spec: SweepSpec, train_trajs: list[Trajectory],
             test_trajs: list[Trajectory]) -> RunRecord:
    """Train one configuration and evaluate its rollout errors."""
    dataset = Dataset(train_trajs)
    m_fields = dataset.num_fields
    h_hist = spec.train.history_length
    cfg = ModelConfig(family=family, in_channels=h_hist * m_fields,
                      out_channels=m_fields, width=width, levels=spec.levels,
                      waves=waves, padding=spec.padding)
    tcfg = replace(spec.train, seed=seed)
    model = models.build(cfg, seed=seed)
    try:
        model, rec = train(model, dataset, tcfg)
    except TrainingDiverged:
        return RunRecord(system=system, family=family.value, width=width,
                         waves=waves, seed=seed,
                         params=models.param_count(model),
                         hardware=hardware_string(), failed=True)
    rec.system = system
    rec.hardware = hardware_string()

    firsts, lasts = [], []
    t_inf = 0.0
    steps_done = 0
    if spec.metric == "spectrum":
        eval_trajs = test_trajs[:1]     # single long statistical rollout
    else:
        eval_trajs = test_trajs
    for tr in eval_trajs:
        hist = tr.fields[:h_hist]
        steps = min(spec.rollout_steps, tr.frames - h_hist)
        t0 = time.perf_counter()
        pred = metrics.rollout(model, hist, steps, dataset.mean, dataset.std,
                               tr.dt, field_names=tr.field_names,
                               periodic=tr.periodic)
        t_inf += time.perf_counter() - t0
        steps_done += max(pred.frames, 1)
        if "blew_up_at" in pred.meta or pred.frames < steps:
            rec.failed = True
            return rec
        truth = tr.fields[h_hist:h_hist + steps]
        if spec.metric == "spectrum":
            ref = Trajectory(truth, tr.dt, tr.field_names, tr.periodic)
            errs = metrics.spectrum_errors(pred, ref,
                                           discard=spec.spectrum_discard)
            names = tr.field_names
            firsts.append(errs[names[0]])
            lasts.append(errs[names[-1]])
        else:
            ef, el = metrics.rollout_errors(pred, truth)
            firsts.append(ef)
            lasts.append(el)
    rec.err_first = float(np.mean(firsts))
    rec.err_last = float(np.mean(lasts))
    rec.infer_s_per_step = t_inf / max(steps_done, 1)
    return rec


def _cell_worker(args):
    (system, family_value, waves, width, seed, spec, train_paths, test_paths) = args
    train_trajs = [load_trajectory(p) for p in train_paths]
    test_trajs = [load_trajectory(p) for p in test_paths]
    return run_cell(system, Family(family_value), waves, width, seed, spec,
                    train_trajs, test_trajs)


def sweep(spec: SweepSpec, train_paths: list, test_paths: list, out_dir,
          workers: int = 1, log=print) -> list[RunRecord]:
    """Run all cells, skipping ones already present in the records CSV.

    Records are appended by the parent process only (single-writer); with
    workers > 1 the cells share the machine, so wall-clock comparisons are
    only fair at workers=1.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "records.csv"
    records: list[RunRecord] = []
    if csv_path.exists():
        records = read_records_csv(csv_path)
    done = {(r.system, r.family, r.width, r.waves, r.seed) for r in records}

    todo = [(fam, waves, width, seed) for fam, waves, width, seed in spec.cells()
            if (spec.system, fam.value, width, waves, seed) not in done]
    log(f"sweep: {len(todo)} cells to run, {len(records)} already recorded")

    def finish(rec: RunRecord):
        records.append(rec)
        fresh = mark_selected(records)
        write_records_csv(csv_path, fresh)
        status = FAILED if rec.failed else f"err_last={rec.err_last:.4g}"
        log(f"  {rec.family} w={rec.width} k={rec.waves} seed={rec.seed}: "
            f"train {rec.train_wall_s:.1f}s {status}")

    if workers <= 1:
        train_trajs = [load_trajectory(p) for p in train_paths]
        test_trajs = [load_trajectory(p) for p in test_paths]
        for fam, waves, width, seed in todo:
            finish(run_cell(spec.system, fam, waves, width, seed, spec,
                            train_trajs, test_trajs))
    else:
        args = [(spec.system, fam.value, waves, width, seed, spec,
                 list(map(str, train_paths)), list(map(str, test_paths)))
                for fam, waves, width, seed in todo]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for rec in ex.map(_cell_worker, args):
                finish(rec)

    records = mark_selected(records)
    write_records_csv(csv_path, records)
    return records


# ---------------------------------------------------------------------------
# SVG rendering

_PALETTE = {
    "unet_base": "#1f77b4", "unet_mod": "#ff7f0e", "cnu_net": "#2ca02c",
    "unet_deep": "#d62728", "sine_net": "#9467bd", "dw_net": "#8c564b",
}


def _log_ticks(lo: float, hi: float) -> list[float]:
    import math
    first = math.floor(math.log10(lo))
    last = math.ceil(math.log10(hi))
    return [10.0 ** e for e in range(first, last + 1)]


def render_svg(records: list[RunRecord], path, cost: str = "train_s",
               title: str = "error vs cost") -> None:
    """Log-log scatter with per-family polylines over widths and the Pareto
    front highlighted.  Output is deterministic for identical records."""
    usable = [r for r in records if not r.failed and r.selected
              and np.isfinite(selection_key(r))]
    w_px, h_px, ml, mr, mt, mb = 640, 480, 70, 20, 40, 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" '
             f'viewBox="0 0 {w_px} {h_px}">',
             f'<rect width="{w_px}" height="{h_px}" fill="white"/>',
             f'<text x="{w_px / 2:.6g}" y="20" text-anchor="middle" '
             f'font-family="sans-serif" font-size="14">{title}</text>']
    if usable:
        xs = [r.train_wall_s if cost == "train_s" else r.infer_s_per_step
              for r in usable]
        ys = [selection_key(r) for r in usable]
        xlo, xhi = min(xs) * 0.8, max(xs) * 1.25
        ylo, yhi = min(ys) * 0.8, max(ys) * 1.25
        if xlo <= 0 or ylo <= 0:
            raise ValueError("log-log plot needs positive costs and errors")

        import math

        def px(x):
            return ml + (math.log10(x) - math.log10(xlo)) / \
                (math.log10(xhi) - math.log10(xlo)) * (w_px - ml - mr)

        def py(y):
            return h_px - mb - (math.log10(y) - math.log10(ylo)) / \
                (math.log10(yhi) - math.log10(ylo)) * (h_px - mt - mb)

        for t in _log_ticks(xlo, xhi):
            if xlo <= t <= xhi:
                parts.append(f'<line x1="{px(t):.6g}" y1="{mt}" x2="{px(t):.6g}" '
                             f'y2="{h_px - mb}" stroke="#dddddd"/>')
                parts.append(f'<text x="{px(t):.6g}" y="{h_px - mb + 16}" '
                             f'text-anchor="middle" font-family="sans-serif" '
                             f'font-size="10">{t:g}</text>')
        for t in _log_ticks(ylo, yhi):
            if ylo <= t <= yhi:
                parts.append(f'<line x1="{ml}" y1="{py(t):.6g}" x2="{w_px - mr}" '
                             f'y2="{py(t):.6g}" stroke="#dddddd"/>')
                parts.append(f'<text x="{ml - 6}" y="{py(t):.6g}" '
                             f'text-anchor="end" font-family="sans-serif" '
                             f'font-size="10">{t:g}</text>')

        groups: dict[tuple, list[RunRecord]] = {}
        for r in usable:
            groups.setdefault((r.family, r.waves), []).append(r)
        for gi, ((fam, waves), rs) in enumerate(sorted(groups.items())):
            rs = sorted(rs, key=lambda r: r.width)
            color = _PALETTE.get(fam, "#333333")
            pts = " ".join(
                f"{px(r.train_wall_s if cost == 'train_s' else r.infer_s_per_step):.6g},"
                f"{py(selection_key(r)):.6g}" for r in rs)
            parts.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
            for r in rs:
                cx = px(r.train_wall_s if cost == "train_s" else r.infer_s_per_step)
                parts.append(f'<circle cx="{cx:.6g}" cy="{py(selection_key(r)):.6g}" '
                             f'r="4" fill="{color}"/>')
            label = fam if waves == 1 else f"{fam}-{waves}"
            parts.append(f'<text x="{w_px - mr - 4}" y="{mt + 14 * (gi + 1)}" '
                         f'text-anchor="end" font-family="sans-serif" '
                         f'font-size="11" fill="{color}">{label}</text>')

        front = pareto_front(records_to_points(usable, cost=cost,
                                               selected_only=True))
        fpts = " ".join(f"{px(p.cost):.6g},{py(p.error):.6g}" for p in front)
        parts.append(f'<polyline points="{fpts}" fill="none" stroke="black" '
                     f'stroke-width="2" stroke-dasharray="6,3"/>')
        for p in front:
            parts.append(f'<circle cx="{px(p.cost):.6g}" cy="{py(p.error):.6g}" '
                         f'r="6" fill="none" stroke="black" stroke-width="2"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
