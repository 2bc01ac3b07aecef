"""Command-line entry point: ``dclamp-ppo {train,compare,sweep,lemma,replay}``.

Every command writes into a fresh directory under the output root (``--out``,
else ``$DCLAMP_PPO_OUT``, else ``./runs``) and leaves a ``manifest.json``
there that ``replay`` can re-run.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 acceptance gate failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .lemma import eta_grid, run_suite
from .surrogate import ConfigError, Variant
from .trainer import TrainConfig, preset_config, train

log = logging.getLogger("dclamp_ppo")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3
OUT_ENV = "DCLAMP_PPO_OUT"
MANIFEST = "manifest.json"

COMPARE_FIELDS = (
    "variant", "n_seeds", "n_failed", "last10_eval_mean", "last10_pct_vs_ppo", "top10_episode_mean",
    "top10_pct_vs_ppo", "frac_strict_pos", "frac_strict_neg", "frac_wrong_pos", "frac_wrong_neg",
    "mse_pos", "mse_neg",
)
SWEEP_FIELDS = ("param", "value", "variant", "n_seeds", "n_failed", "last10_eval_mean", "frac_strict_pos",
                "frac_strict_neg", "frac_strict_pos_ref", "frac_strict_neg_ref", "mse_pos", "mse_neg")
STAT_KEYS = ("frac_strict_pos", "frac_strict_neg", "frac_wrong_pos", "frac_wrong_neg", "mse_pos", "mse_neg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    variants: list[str]
    output_dir: str
    timestamp: str
    extra: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, run_dir: Path):
        (run_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read manifest {path}: {exc}") from exc
        doc.pop("version", None)
        return cls(**doc)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in header])
    return buf.getvalue()


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _pct(x, ref):
    if x is None or ref is None or ref == 0:
        return None
    return 100.0 * (x - ref) / abs(ref)


def output_root(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def new_run_dir(root: Path, command: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    k = 0
    while True:
        path = root / f"{command}-{stamp}-{k:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            k += 1


def _parse_list(text, conv, what):
    items = [t for t in (text or "").split(",") if t.strip()]
    if not items:
        raise UsageError(f"{what} list is empty")
    try:
        return [conv(t) for t in items]
    except ValueError as exc:
        raise UsageError(f"bad {what} list {text!r}: {exc}") from None


def _parse_variants(text):
    out = _parse_list(text, str.strip, "variant")
    valid = {v.value for v in Variant}
    bad = [v for v in out if v not in valid]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {sorted(valid)}")
    return out


def _parse_eta_grid(text):
    try:
        lo, hi, factor = (float(x) for x in text.split(":"))
        return list(eta_grid(lo, hi, factor))
    except ValueError as exc:
        raise UsageError(f"--eta-grid {text!r}: {exc}") from None


def _base_config(args, variant=None) -> TrainConfig:
    """Preset for ``--env``, then ``--config`` file, then explicit flags."""
    settings = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    env = args.env or settings.get("env", "chain")
    if env not in ("chain", "point"):
        raise UsageError(f"--env must be chain or point, got {env!r}")
    settings["env"] = env
    for flag, key in (("alpha", "alpha"), ("beta", "beta"), ("epsilon", "epsilon"), ("steps", "n_timesteps")):
        if getattr(args, flag, None) is not None:
            settings[key] = getattr(args, flag)
    if variant is not None:
        settings["variant"] = variant
    if settings.get("variant") == Variant.PPO.value:
        if getattr(args, "alpha", None) is not None or getattr(args, "beta", None) is not None:
            raise UsageError("--alpha/--beta have no meaning for --variant ppo")
    try:
        return preset_config(env, **{k: v for k, v in settings.items() if k != "env"})
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _cell_config(base: dict, variant: str, seed: int, **changes) -> TrainConfig:
    d = dict(base, variant=variant, seed=seed, **changes)
    if variant == Variant.PPO.value:
        d["alpha"] = d["beta"] = None
    elif variant != base.get("variant"):
        d["alpha"] = changes.get("alpha")
        d["beta"] = changes.get("beta")
    return TrainConfig.from_dict(d)


def _run_cell(job):
    cfg_dict, cell_dir = job
    cfg = TrainConfig.from_dict(cfg_dict)
    try:
        report = train(cfg)
    except (FloatingPointError, ValueError, OverflowError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    if cell_dir is not None:
        report.write(cell_dir)
        (Path(cell_dir) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return {
        "error": None,
        "last10": report.last_eval_mean(10),
        "top10": report.top_episode_mean(10),
        "evals": report.evals,
        "frac_strict_pos_ref": report.ref_stats.frac_strict_pos,
        "frac_strict_neg_ref": report.ref_stats.frac_strict_neg,
        **{k: getattr(report.stats, k) for k in STAT_KEYS},
    }


def _run_cells(jobs, n_jobs):
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def _aggregate(results):
    ok = [r for r in results if r["error"] is None]
    row = {"n_seeds": len(ok), "n_failed": len(results) - len(ok)}
    row["last10_eval_mean"] = _mean(r["last10"] for r in ok)
    row["top10_episode_mean"] = _mean(r["top10"] for r in ok)
    for k in STAT_KEYS + ("frac_strict_pos_ref", "frac_strict_neg_ref"):
        row[k] = _mean(r[k] for r in ok)
    return row


# -- commands ---------------------------------------------------------------


def run_train(m: RunManifest, run_dir: Path, n_jobs: int = 1) -> int:
    cfg = TrainConfig.from_dict(m.config)
    report = train(cfg)
    report.write(run_dir)
    print(f"{cfg.variant} on {cfg.env} seed {cfg.seed}: final eval return {report.final_return:.4f} "
          f"after {report.episodes} episodes; strict-wrong pos/neg "
          f"{report.stats.frac_strict_pos:.4f}/{report.stats.frac_strict_neg:.4f}")
    return EXIT_OK


def run_compare(m: RunManifest, run_dir: Path, n_jobs: int = 1) -> int:
    cells = [(i, v, s) for i, v in enumerate(m.variants) for s in m.seeds]
    jobs = [(_cell_config(m.config, v, s).to_dict(), run_dir / "cells" / f"{i}_{v}_seed{s}") for i, v, s in cells]
    results = _run_cells(jobs, n_jobs)
    by_variant = [[] for _ in m.variants]
    for (i, v, s), r in zip(cells, results):
        if r["error"]:
            log.error("cell %s seed %d failed: %s", v, s, r["error"])
        by_variant[i].append(r)
    rows = [dict(variant=v, **_aggregate(rs)) for v, rs in zip(m.variants, by_variant)]
    ref = next((r for r in rows if r["variant"] == Variant.PPO.value), None)
    for r in rows:
        r["last10_pct_vs_ppo"] = _pct(r["last10_eval_mean"], ref and ref["last10_eval_mean"])
        r["top10_pct_vs_ppo"] = _pct(r["top10_episode_mean"], ref and ref["top10_episode_mean"])
    table = _csv(rows, COMPARE_FIELDS)
    (run_dir / "compare.csv").write_text(table)
    sys.stdout.write(table)
    status = EXIT_NUMERIC if any(r["n_failed"] for r in rows) else EXIT_OK
    if m.extra.get("gate"):
        dc = next((r for r in rows if r["variant"] == Variant.DCLAMP.value), None)
        if ref is None or dc is None:
            raise UsageError("--gate needs both ppo and dclamp among the variants")
        passed = all(dc[k] is not None and ref[k] is not None and dc[k] < ref[k]
                     for k in ("frac_strict_pos", "frac_strict_neg"))
        print(f"gate: dclamp strict-wrong below ppo for both signs: {'PASS' if passed else 'FAIL'}")
        if not passed:
            status = EXIT_GATE
    return status


def run_sweep(m: RunManifest, run_dir: Path, n_jobs: int = 1) -> int:
    param, values = m.extra["param"], m.extra["values"]
    variant = m.variants[0]
    groups = [("baseline", Variant.PPO.value, {})] + [(v, variant, {param: v}) for v in values]
    jobs, keys = [], []
    for label, var, change in groups:
        for s in m.seeds:
            cfg = _cell_config(m.config, var, s, **change)
            jobs.append((cfg.to_dict(), run_dir / "cells" / f"{param}_{label}_seed{s}"))
            keys.append((label, var, s))
    results = _run_cells(jobs, n_jobs)
    rows, curves, grouped = [], [], {}
    for (label, var, s), r in zip(keys, results):
        grouped.setdefault((label, var), []).append(r)
        if r["error"]:
            log.error("sweep cell %s=%s seed %d failed: %s", param, label, s, r["error"])
            continue
        for e in r["evals"]:
            curves.append({"value": label, "variant": var, "seed": s, **e})
    for (label, var), rs in grouped.items():
        agg = _aggregate(rs)
        rows.append({"param": param, "value": label, "variant": var, **agg})
    table = _csv(rows, SWEEP_FIELDS)
    (run_dir / "sweep.csv").write_text(table)
    (run_dir / "sweep_curves.csv").write_text(
        _csv(curves, ("value", "variant", "seed", "episodes", "mean_return", "std_return")))
    sys.stdout.write(table)
    return EXIT_NUMERIC if any(r["n_failed"] for r in rows) else EXIT_OK


def run_lemma(m: RunManifest, run_dir: Path, n_jobs: int = 1) -> int:
    etas = m.extra["eta_grid"]
    report = run_suite(m.extra["instances"], m.seeds[0], etas)
    report.write_json(run_dir / "lemma_report.json")
    eb = report.eta_bar_estimate
    print(f"lemma: {len(report.instances)} instances, pass rate at eta={min(etas):g}: "
          f"{100 * report.pass_rate:.1f}%, phi'(0) sign check: {100 * report.phi_pass_rate:.1f}%, "
          f"eta_bar estimate: {'none' if eb is None else f'{eb:g}'}")
    return EXIT_OK if report.pass_rate == 1.0 and report.phi_pass_rate == 1.0 else EXIT_GATE


RUNNERS = {"train": run_train, "compare": run_compare, "sweep": run_sweep, "lemma": run_lemma}


# -- argument handling ---------------------------------------------------------


def _add_common(p, variants=False, single_seed=False):
    p.add_argument("--env", choices=("chain", "point"), help="environment (default: chain or the config's env)")
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int, help="training timesteps per run")
    if single_seed:
        p.add_argument("--seed", type=int, default=0)
    else:
        p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dclamp-ppo", description="PPO surrogate variants: training, comparisons, sweeps, lemma checks.")
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one variant with one seed")
    t.add_argument("--variant", choices=[v.value for v in Variant], default=Variant.DCLAMP.value)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    _add_common(t, single_seed=True)

    c = sub.add_parser("compare", help="several variants over several seeds")
    c.add_argument("--variants", default="ppo,leaky,rb,dclamp")
    c.add_argument("--alpha", type=float, help="DClamp slope for the dclamp cells")
    c.add_argument("--beta", type=float, help="DClamp band for the dclamp cells")
    c.add_argument("--gate", action="store_true", help="exit 3 unless dclamp has fewer strict-wrong ratios than ppo")
    _add_common(c)

    s = sub.add_parser("sweep", help="ablation over alpha or beta, plus a PPO baseline")
    s.add_argument("--param", choices=("alpha", "beta"), required=True)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--variant", choices=[v.value for v in Variant if v != Variant.PPO], default=Variant.DCLAMP.value)
    _add_common(s)

    lm = sub.add_parser("lemma", help="one-step ratio comparison on random instances")
    lm.add_argument("--instances", type=int, default=200)
    lm.add_argument("--seed", type=int, default=0)
    lm.add_argument("--eta-grid", default="1e-6:1e-1:10", help="lo:hi:factor")

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest", help="manifest.json or the run directory containing it")
    r.add_argument("--jobs", type=int, default=1)
    return p


def _manifest_from_args(args, run_dir: Path) -> RunManifest:
    now = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cmd = args.command
    if cmd == "train":
        cfg = _base_config(args, args.variant).replace(seed=args.seed)
        return RunManifest(cmd, cfg.to_dict(), [cfg.seed], [cfg.variant], str(run_dir), now)
    if cmd == "lemma":
        if args.instances < 1:
            raise UsageError("--instances must be >= 1")
        grid = _parse_eta_grid(args.eta_grid)
        return RunManifest(cmd, {}, [args.seed], [Variant.PPO.value, Variant.DCLAMP.value], str(run_dir), now,
                           {"instances": args.instances, "eta_grid": grid})
    seeds = _parse_list(args.seeds, int, "seed")
    if cmd == "compare":
        variants = _parse_variants(args.variants)
        base = _base_config(args, Variant.DCLAMP.value if Variant.DCLAMP.value in variants else variants[0])
        for v in variants:
            _check_cell(base.to_dict(), v)
        return RunManifest(cmd, base.to_dict(), seeds, variants, str(run_dir), now, {"gate": args.gate})
    values = _parse_list(args.values, float, "value")
    base = _base_config(args, args.variant)
    for v in values:
        _check_cell(base.to_dict(), args.variant, **{args.param: v})
    return RunManifest(cmd, base.to_dict(), seeds, [args.variant], str(run_dir), now,
                       {"param": args.param, "values": values})


def _check_cell(base, variant, **changes):
    try:
        _cell_config(base, variant, 0, **changes)
    except ConfigError as exc:
        raise UsageError(f"{variant} {changes or ''}: {exc}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    jobs = getattr(args, "jobs", 1)
    root = output_root(args.out)
    try:
        if jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if args.command == "replay":
            old = RunManifest.read(args.manifest)
            if old.command not in RUNNERS:
                raise UsageError(f"manifest has unknown command {old.command!r}")
            run_dir = new_run_dir(root, old.command)
            manifest = RunManifest(old.command, old.config, old.seeds, old.variants, str(run_dir),
                                   time.strftime("%Y-%m-%dT%H:%M:%S%z"), old.extra)
        else:
            manifest = _manifest_from_args(args, Path("."))
            run_dir = new_run_dir(root, args.command)
            manifest.output_dir = str(run_dir)
        manifest.write(run_dir)
        code = RUNNERS[manifest.command](manifest, run_dir, jobs)
        print(f"outputs in {run_dir}")
        return code
    except UsageError as exc:
        print(f"dclamp-ppo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, OverflowError) as exc:
        print(f"dclamp-ppo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
