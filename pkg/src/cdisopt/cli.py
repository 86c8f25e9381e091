"""Batch command-line front end.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are
option names (``n_patients``, ``max_evals``, ...), either at top level or
under a section named after the subcommand. Explicit flags override it.
Commands that write an output directory also write ``run_config.json`` in
that same format, so ``cdisopt <cmd> --config out/run_config.json --force``
replays the run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .cdis import CdisConfig, compute_cdis, fuse_multiparametric
from .cohort_io import (
    CohortError,
    FormatError,
    PhantomSpec,
    atomic_write_text,
    export_tensor,
    generate_phantom,
    load_cohort,
    load_patient,
    read_manifest,
    write_cohort,
    write_volume,
)
from .diffusion import fit_adc
from .metrics import PredictionFileError, loocv_aggregate, read_predictions, voxel_auc
from .simplex import SimplexOptions, optimize_cdis_coefficients
from .train import ScheduleSpec, sample_weights, schedule_table

log = logging.getLogger("cdisopt")

EXIT_OK, EXIT_FAILURES, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def _record_run(out: Path, args) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "command", "config", "force")}
    atomic_write_text(out / "run_config.json", json.dumps({args.command: resolved}, indent=2, sort_keys=True) + "\n")


def _per_patient(fn, items, jobs):
    """Run ``fn`` on each item; returns (results, failures) keeping item order."""

    def guarded(item):
        try:
            return fn(item), None
        except Exception as e:  # a failed patient must not stop the batch
            return None, str(e)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(guarded, items))
    else:
        outcomes = [guarded(x) for x in items]
    results, failures = [], []
    for item, (res, err) in zip(items, outcomes):
        if err is None:
            results.append(res)
        else:
            pid = getattr(item, "id", str(item))
            log.error("patient %s failed: %s", pid, err)
            failures.append({"patient_id": pid, "error": err})
    return results, failures


def _finish(out: Path | None, failures: list) -> int:
    if not failures:
        return EXIT_OK
    doc = json.dumps({"failures": failures}, indent=2) + "\n"
    if out is not None:
        atomic_write_text(out / "failures.json", doc)
    sys.stderr.write(doc)
    return EXIT_FAILURES


def _load_cdis_config(args, cohort_b=None) -> CdisConfig:
    if args.cdis_config:
        return CdisConfig.load(args.cdis_config)
    if cohort_b is None:
        raise UsageError("--cdis-config is required")
    # Unoptimized default: every acquired b-value, unit exponents.
    return CdisConfig(native_b=tuple(cohort_b))


# --- subcommands -----------------------------------------------------------


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=tuple(args.dims),
        n_patients=args.n_patients,
        b_values=tuple(args.b_values),
        tumor_adc=args.tumor_adc,
        background_adc=args.background_adc,
        radius_range=(args.radius_min, args.radius_max),
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        s0=args.s0,
        tumor_s0=args.tumor_s0,
    )
    out = Path(args.out)
    _prepare_out(out, args.force)
    manifest = write_cohort(generate_phantom(spec), out)
    _record_run(out, args)
    print(manifest)
    return EXIT_OK


def cmd_fit_adc(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    entries = read_manifest(args.manifest)

    def run(entry):
        fit = fit_adc(load_patient(entry).series)
        (out / entry.id).mkdir(exist_ok=True)
        write_volume(fit.adc, out / entry.id / "adc.rvf")
        write_volume(fit.s0, out / entry.id / "s0.rvf")

    _, failures = _per_patient(run, entries, args.jobs)
    _record_run(out, args)
    return _finish(out, failures)


def cmd_cdis(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    entries = read_manifest(args.manifest)
    config = _load_cdis_config(args)

    def run(entry):
        p = load_patient(entry)
        vol = compute_cdis(p.series, config)
        (out / p.id).mkdir(exist_ok=True)
        write_volume(vol, out / p.id / "cdis.rvf")
        return p.id, voxel_auc(vol, p.tumor, p.roi)

    rows, failures = _per_patient(run, entries, args.jobs)
    atomic_write_text(out / "cdis_auc.csv", _csv_text(["patient_id", "auc"], [(i, _fmt(a)) for i, a in rows]))
    _record_run(out, args)
    return _finish(out, failures)


def cmd_optimize(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    cohort = load_cohort(args.manifest)
    config = _load_cdis_config(args, cohort.patients[0].series.b_values)
    opts = SimplexOptions(
        alpha=args.alpha,
        gamma=args.gamma,
        beta=args.beta,
        delta=args.delta,
        initial_step=args.initial_step,
        max_evals=args.max_evals,
        f_tol=args.f_tol,
        x_tol=args.x_tol,
        bounds=(args.lower, args.upper),
        recheck=not args.no_recheck,
        restarts=args.restarts,
        seed=args.seed,
    )
    best_config, result = optimize_cdis_coefficients(cohort, config, opts, jobs=args.jobs)
    initial_auc = -result.trace[0][1]
    final_auc = -result.best_f
    best_config.save(out / "optimized_config.json")
    trace = [(i, _fmt(f), _fmt(-f)) for i, f in result.trace]
    atomic_write_text(out / "trace.csv", _csv_text(["eval", "objective", "mean_auc"], trace))
    _record_run(out, args)
    print(f"initial mean AUC: {initial_auc:.6f}")
    print(f"final mean AUC:   {final_auc:.6f}")
    print(f"exponents: {' '.join(f'{r:.6g}' for r in best_config.exponents)}")
    print(f"evaluations: {result.evals} (stopped on {result.termination.value})")
    return EXIT_OK


def _write_slices(out: Path, pid: str, mp) -> None:
    for name, ch in zip(mp.names, mp.channels):
        mid = ch.array[:, :, ch.array.shape[2] // 2]
        # rows are y, columns are x
        text = "\n".join(",".join(_fmt(v) for v in row) for row in mid.T) + "\n"
        atomic_write_text(out / f"{pid}_{name}_slice.csv", text)


def cmd_fuse(args) -> int:
    out = Path(args.out)
    _prepare_out(out, args.force)
    entries = read_manifest(args.manifest)
    config = _load_cdis_config(args)

    def run(entry):
        p = load_patient(entry)
        dwi_b = args.dwi_b if args.dwi_b else [p.series.b_values[-1]]
        cdis = compute_cdis(p.series, config)
        mp = fuse_multiparametric(cdis, p.series, dwi_b, config.calibration)
        path = out / f"{p.id}.rvt"
        export_tensor(mp, path)
        if args.slice:
            _write_slices(out, p.id, mp)
        return p.id, path.name, "" if p.pcr_label is None else p.pcr_label

    rows, failures = _per_patient(run, entries, args.jobs)
    atomic_write_text(out / "index.csv", _csv_text(["patient_id", "tensor_path", "pcr_label"], rows))
    _record_run(out, args)
    return _finish(out, failures)


def cmd_eval(args) -> int:
    rows = read_predictions(args.predictions)
    report = loocv_aggregate([(pred, act) for _, pred, act in rows])
    print(report.format_table())
    return EXIT_OK


def cmd_schedule(args) -> int:
    spec = ScheduleSpec(total_steps=args.steps, eta_max=args.eta_max, eta_min=args.eta_min)
    text = _csv_text(["step", "lr"], [(t, _fmt(lr)) for t, lr in schedule_table(spec)])
    _emit(text, args.out)
    return EXIT_OK


def cmd_weights(args) -> int:
    labeled = [e for e in read_manifest(args.manifest) if e.pcr_label is not None]
    weights = sample_weights([e.pcr_label for e in labeled])
    text = _csv_text(["patient_id", "weight"], [(e.id, _fmt(w)) for e, w in zip(labeled, weights)])
    _emit(text, args.out)
    return EXIT_OK


def _emit(text: str, out) -> None:
    if out:
        atomic_write_text(Path(out), text)
    else:
        sys.stdout.write(text)


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--jobs", type=int, default=1, help="patients processed concurrently")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cdisopt", description="Optimized CDIs pipeline tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a seeded phantom cohort")
    p.add_argument("--out")
    p.add_argument("--n-patients", type=int, default=5)
    p.add_argument("--dims", type=int, nargs=3, default=[48, 48, 12], metavar=("NX", "NY", "NZ"))
    p.add_argument("--b-values", type=float, nargs="+", default=[0.0, 400.0, 800.0])
    p.add_argument("--tumor-adc", type=float, default=0.0010)
    p.add_argument("--background-adc", type=float, default=0.0025)
    p.add_argument("--radius-min", type=float, default=3.0)
    p.add_argument("--radius-max", type=float, default=5.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--s0", type=float, default=1.0)
    p.add_argument("--tumor-s0", type=float, default=None)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit-adc", parents=[common], help="write per-patient ADC and S0 maps")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_adc)

    p = sub.add_parser("cdis", parents=[common], help="write per-patient CDIs volumes and delineation AUCs")
    p.add_argument("--manifest")
    p.add_argument("--cdis-config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cdis)

    p = sub.add_parser("optimize", parents=[common], help="tune CDIs exponents by Nelder-Mead")
    p.add_argument("--manifest")
    p.add_argument("--cdis-config", help="starting config (default: all b-values, unit exponents)")
    p.add_argument("--out")
    d = SimplexOptions()
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--delta", type=float, default=d.delta)
    p.add_argument("--initial-step", type=float, default=d.initial_step)
    p.add_argument("--max-evals", type=int, default=d.max_evals)
    p.add_argument("--f-tol", type=float, default=d.f_tol)
    p.add_argument("--x-tol", type=float, default=d.x_tol)
    p.add_argument("--lower", type=float, default=d.bounds[0])
    p.add_argument("--upper", type=float, default=d.bounds[1])
    p.add_argument("--restarts", type=int, default=0)
    p.add_argument("--no-recheck", action="store_true", help="stop at the first claimed minimum")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("fuse", parents=[common], help="export standardized multiparametric tensors")
    p.add_argument("--manifest")
    p.add_argument("--cdis-config")
    p.add_argument("--out")
    p.add_argument("--dwi-b", type=float, nargs="+", help="DWI b-values to fuse (default: highest)")
    p.add_argument("--slice", action="store_true", help="also write mid-slice CSVs per channel")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="LOOCV metrics from a predictions CSV")
    p.add_argument("predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", parents=[common], help="cosine-annealing learning-rate table")
    p.add_argument("--steps", type=int)
    p.add_argument("--eta-max", type=float, default=1e-3)
    p.add_argument("--eta-min", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("weights", parents=[common], help="inverse-frequency sampler weights")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_weights)

    return parser


# Checked after --config defaults are merged, so a config file can supply them.
REQUIRED = {
    "phantom": ["out"],
    "fit-adc": ["manifest", "out"],
    "cdis": ["manifest", "cdis_config", "out"],
    "optimize": ["manifest", "out"],
    "fuse": ["manifest", "cdis_config", "out"],
    "schedule": ["steps"],
    "weights": ["manifest"],
}


def _config_defaults(path, command: str, known: set) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    section = doc.get(command)
    if isinstance(section, dict):
        values.update(section)
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"config {path}: unknown options for '{command}': {unknown}")
    return values


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions} - {"help", "config"}
        subparser.set_defaults(**_config_defaults(args.config, args.command, known))
        args = parser.parse_args(argv)
    missing = [name for name in REQUIRED.get(args.command, []) if getattr(args, name) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"{args.command}: missing required option(s) {flags}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, CohortError, FormatError, PredictionFileError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
