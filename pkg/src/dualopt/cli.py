"""``dualopt`` command line: verify-theorem, run, sweep, diag."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import harness, theory

OUTPUT_ENV = "DUALOPT_OUTPUT_DIR"
DEFAULT_OUTPUT = "dualopt-out"

logger = logging.getLogger("dualopt")


class Staging:
    """Collects output files in a scratch directory and moves them into place on success.

    On failure nothing is moved and the scratch directory is deleted, so a
    failed command never leaves partial outputs behind.
    """

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out_dir))

    def write(self, name: str, text: str) -> None:
        path = self.tmp / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)

    def commit(self) -> list:
        moved = []
        for src in sorted(p for p in self.tmp.rglob("*") if p.is_file()):
            dst = self.out_dir / src.relative_to(self.tmp)
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
            moved.append(dst)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return moved

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.discard()
        return False


def _read_config(path):
    if path is None:
        return {"run": {}}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise harness.ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return harness.parse_config_text(text)


def _echo(cfg: harness.RunConfig, overrides: dict) -> str:
    text = cfg.echo()
    if overrides:
        text += "".join(f"# override: {k} = {v}\n" for k, v in overrides.items())
    return text


def _report_files(stage: Staging, report: harness.RunReport, overrides: dict, prefix: str = "") -> None:
    stage.write(prefix + "config.cfg", _echo(report.config, overrides))
    stage.write(prefix + "steps.csv", report.steps_csv())
    stage.write(prefix + "summary.csv", harness.SweepResult([report], [{}], [""]).summary_csv())
    if report.traces:
        stage.write(prefix + "similarity.csv", report.similarity_csv())


def cmd_verify_theorem(args) -> int:
    results = theory.verify_grid(periods=args.periods, tolerance=args.tolerance)
    failed = [r for r in results if not r.passed]
    with Staging(args.out) as stage:
        stage.write("theorem_grid.csv", theory.grid_csv(results))
    print(f"{len(results) - len(failed)}/{len(results)} grid points within {args.tolerance:g}")
    worst = max(results, key=lambda r: r.max_error)
    print(f"worst max_error = {worst.max_error:.17g}")
    return 0 if not failed else 1


def cmd_run(args) -> int:
    sections = _read_config(args.config)
    overrides = harness.parse_overrides(args.overrides)
    if args.diagnostics:
        overrides["diagnostics"] = "true"
    cfg = harness.build_config(sections.get("run", {}), overrides)
    report = harness.run_experiment(cfg)
    if report.diverged:
        print(f"run diverged: {report.error}", file=sys.stderr)
        return 1
    with Staging(args.out) as stage:
        _report_files(stage, report, overrides)
    print(f"final L_f = {report.final_loss('forget'):.17g}")
    print(f"final L_r = {report.final_loss('retain'):.17g}")
    print(f"content hash {report.content_hash()}")
    return 0


def cmd_sweep(args) -> int:
    sections = _read_config(args.config)
    overrides = harness.parse_overrides(args.overrides)
    if args.diagnostics:
        overrides["diagnostics"] = "true"
    base = dict(sections.get("run", {}))
    base.update(overrides)
    if args.ablation:
        grid = harness.ABLATIONS[args.ablation]
    else:
        grid = harness.parse_grid_section(sections.get("grid", {}))
    # validate the shared values before spending time on the grid
    harness.build_config(base)
    result = harness.sweep(base, grid, jobs=args.jobs)
    with Staging(args.out) as stage:
        stage.write("summary.csv", result.summary_csv())
        for i, rep in enumerate(result.reports):
            if rep is not None:
                _report_files(stage, rep, {}, prefix=f"runs/{i:03d}/")
    n = len(result.reports)
    print(f"{n - result.n_failed}/{n} runs completed without failure or divergence")
    return 0 if result.n_failed == 0 else 1


def cmd_diag(args) -> int:
    run_dir = Path(args.run)
    sections = _read_config(run_dir / "config.cfg")
    cfg = harness.build_config(sections.get("run", {}), {"diagnostics": "true"})
    report = harness.run_experiment(cfg)
    stored = run_dir / "steps.csv"
    if stored.exists() and stored.read_text() != report.steps_csv():
        print(f"replay does not match {stored}", file=sys.stderr)
        return 1
    if not report.traces:
        print("run has no similarity traces (needs at least two objectives)", file=sys.stderr)
        return 1
    with Staging(args.out) as stage:
        stage.write("similarity.csv", report.similarity_csv())
    for label in report.traces:
        print(f"mean {label} similarity after burn-in = {report.mean_similarity(label):.17g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT)
    parser = argparse.ArgumentParser(prog="dualopt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="{verify-theorem,run,sweep,diag}")

    def out_arg(p):
        p.add_argument("--out", type=Path, default=Path(default_out),
                       help=f"output directory (default: ${OUTPUT_ENV} or {DEFAULT_OUTPUT})")

    p = sub.add_parser("verify-theorem", help="check the closed-form state limits against simulation")
    out_arg(p)
    p.add_argument("--periods", type=int, default=10_000)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("run", help="run one configuration")
    out_arg(p)
    p.add_argument("--config", help="key = value config file ([run] section optional)")
    p.add_argument("--diagnostics", action="store_true", help="record similarity traces")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every point of a config grid")
    out_arg(p)
    p.add_argument("--config", help="config file; its [grid] section lists comma-separated values per key")
    p.add_argument("--ablation", choices=sorted(harness.ABLATIONS), help="use a built-in grid")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--diagnostics", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diag", help="replay a stored run and write its similarity traces")
    out_arg(p)
    p.add_argument("--run", required=True, help="directory written by 'run'")
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
