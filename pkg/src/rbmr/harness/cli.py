"""Command-line entry point: ``rbmr <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from ..dynamics import BlowUpError, ContractError
from ..model import ModelError
from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("rbmr")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "pass" if x else "fail"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_summary(out: Path, lines: list[str]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _line(name: str, ok: bool, detail: str = "") -> str:
    return f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")


# --------------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    snaps = ex.run_simulate(cfg)
    times = cfg.times()

    def rows():
        for scheme, s in snaps.items():
            for r in range(s.shape[1]):
                for j, t in enumerate(times):
                    for i in range(s.shape[2]):
                        for c in range(s.shape[3]):
                            yield scheme, r, float(t), i, c, float(s[j, r, i, c])

    write_csv(out / "simulate.csv", ["scheme", "replica", "time", "particle", "coord", "value"], rows())
    moments = []
    for scheme, s in snaps.items():
        per_rep = np.mean(np.sum(s ** 2, axis=-1), axis=2)
        mean = ex.fsum_mean(per_rep.T)
        moments.append(f"{scheme}: E|X|^2 at t={times[-1]!r} is {mean[-1]!r}")
    write_summary(out, [f"config {cfg.digest()}", *moments])
    return snaps


def _timings(out: Path, record: ex.RunRecord) -> None:
    # wall-clock is not reproducible, so it lives apart from the result tables
    write_csv(out / "timings.csv", ["kappa", "scheme", "seconds"],
              [(r.kappa, "coupled", r.wall) for r in record.results])


def cmd_converge(cfg: ExperimentConfig, out: Path) -> ex.RunRecord:
    rec = ex.converge(cfg)
    rows = [(r.kappa, r.sup_error, r.sup_se, float(r.times[r.sup_index])) for r in rec.results]
    rows.append(("slope", fmt(rec.slope) if rec.slope is not None else "", fmt(rec.r_squared) if rec.r_squared is not None else "", rec.status))
    write_csv(out / "converge.csv", ["kappa", "error", "se", "sup_time"], rows)
    _timings(out, rec)
    lines = [f"config {rec.config_hash}", f"status {rec.status}"]
    if rec.slope is not None:
        lines += [f"slope {rec.slope!r}", f"r2 {rec.r_squared!r}", f"prefactor {float(np.exp(rec.intercept))!r}"]
    lines.append(_line("errors strictly decreasing", rec.strictly_decreasing))
    write_summary(out, lines)
    return rec


def cmd_wasserstein(cfg: ExperimentConfig, out: Path) -> ex.RunRecord:
    rec = ex.converge(cfg) if len(cfg.kappas) >= 3 else ex.RunRecord(cfg.digest(), ex.coupled_sweep(cfg), None, None, None, "no fit")
    rows = []
    for r, ok in zip(rec.results, rec.dominance()):
        for j, t in enumerate(r.times):
            rows.append((r.kappa, float(t), r.w2[j], r.w2_se[j], r.error[j], r.se[j], bool(r.w2[j] <= r.error[j] + 3 * r.se[j] + 3 * r.w2_se[j])))
    write_csv(out / "wasserstein.csv", ["kappa", "time", "w2", "w2_se", "coupled_error", "coupled_se", "dominance"], rows)
    _timings(out, rec)
    lines = [f"config {rec.config_hash}"]
    lines += [_line(f"W2 dominance at kappa={r.kappa!r}", ok) for r, ok in zip(rec.results, rec.dominance())]
    write_summary(out, lines)
    return rec


def cmd_lemmas(cfg: ExperimentConfig, out: Path) -> list:
    rows, lines = [], [f"config {cfg.digest()}"]
    grid = [tuple(g) for g in cfg.lemmas.grid]
    extra = [(n, n) for n, _ in grid[:1]]  # p = N: clocks are deterministic
    for row in ex.clock_lemmas(cfg, grid + extra):
        r = row.report
        rows.append((row.lemma, row.n, row.p, r.statistic, r.empirical, r.analytic, r.se, r.passed))
        lines.append(_line(f"{row.lemma}/{r.statistic} N={row.n} p={row.p}", r.passed, f"{r.empirical!r} vs {r.analytic!r}"))
    for m in ex.moment_experiment(cfg):
        k = int(np.argmax(m.mean - m.bound))
        rows.append(("moment_bound", cfg.n, cfg.p, m.scheme, float(m.mean[k]), float(m.bound[k]), float(m.se[k]), m.bounded))
        rows.append(("moment_trend", cfg.n, cfg.p, m.scheme, m.trend, 0.0, m.trend_se, m.flat))
        lines.append(_line(f"moment bound {m.scheme}", m.bounded))
        lines.append(_line(f"moment trend {m.scheme}", m.flat, f"{m.trend!r} (se {m.trend_se!r})"))
    for sigma in cfg.lemmas.holder_sigmas:
        h = ex.holder_experiment(cfg, sigma)
        cap = 3 * sigma ** 2
        rows.append(("holder_linear", cfg.n, cfg.p, f"sigma={sigma!r}", h.linear, cap, h.linear_se, h.passed))
        rows.append(("holder_quadratic", cfg.n, cfg.p, f"sigma={sigma!r}", h.quadratic, "", h.quadratic_se, ""))
        lines.append(_line(f"holder linear coefficient sigma={sigma!r}", h.passed, f"{h.linear!r} (se {h.linear_se!r})"))
    write_csv(out / "lemmas.csv", ["lemma", "n", "p", "statistic", "empirical", "analytic", "se", "pass"], rows)
    write_summary(out, lines)
    return rows


COMMANDS = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "lemmas": cmd_lemmas,
    "wasserstein": cmd_wasserstein,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rbmr", description="Random batch particle simulations with a coupled reference.")
    ap.add_argument("command", choices=[*COMMANDS, "print-config"])
    ap.add_argument("--config", help="YAML config; missing keys take defaults")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int, help="worker threads (default from $RBMR_THREADS or 1)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--crn", action="store_true", default=None, help="common random numbers across the kappa sweep")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, threads=args.threads, output=args.out, crn=args.crn)
        if args.command == "print-config":
            sys.stdout.write(cfg.dump())
            return 0
        out = Path(cfg.output)
        COMMANDS[args.command](cfg, out)
        sys.stdout.write((out / "summary.txt").read_text())
    except (ConfigError, ContractError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
