"""Command-line harness: generate data, train grid models, run checks, draw figures.

Exit codes: 0 success, 1 usage error, 2 check failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plots
from .experiments import (MODEL_IDS, ExperimentSpec, initial_dense, judge, parse_model_id,
                          run_model)
from .losses import ood_probabilities
from .model import Scheme, closed_form_for_params, load_params, save_params, sentence_counts
from .task_data import (ConfigError, DomainError, read_dataset, sample_batch, sample_ood_batch,
                        write_dataset)
from .theory_checks import (CheckReport, check_flip_batch, check_linear_rate, check_ood_noiseless,
                            check_ood_noisy, check_two_phase, fit_log_linear, write_reports)
from .training import (STREAM_DATA, STREAM_EVAL, STREAM_OOD, EvalSets, train_noise_estimated,
                       phase_boundary, read_trajectory, step_rng, train_full)

log = logging.getLogger("icrlab")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3

CONFIG_HELP = """config file: one `key = value` per line, `#` starts a comment.
tuple keys (Q, O, alphas, models, seeds) take comma-separated values.
keys: """ + ", ".join(ExperimentSpec.keys())


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_INT_TUPLES = {"Q", "O", "seeds"}
_FLOAT_TUPLES = {"alphas"}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if key in _INT_TUPLES:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if key in _FLOAT_TUPLES:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if key == "models":
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path) -> dict:
    defaults = asdict(ExperimentSpec())
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in defaults:
            raise UsageError(f"{path}:{n}: unknown key {k!r}")
        try:
            out[k] = _coerce(k, v, defaults[k])
        except ValueError as e:
            raise UsageError(f"{path}:{n}: bad value for {k}: {e}") from None
    return out


def write_config(path, spec: ExperimentSpec, **extra) -> None:
    lines = []
    for k, v in {**asdict(spec), **extra}.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_spec(args) -> ExperimentSpec:
    kw = load_config(args.config) if args.config else {}
    if args.eta is not None:
        kw["eta"] = args.eta
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.out is not None:
        kw["out"] = args.out
    if args.optimizer is not None:
        kw["optimizer"] = args.optimizer
    if args.seed is not None:
        kw["seeds"] = (args.seed,)
    if args.alpha is not None:
        kw["alphas"] = (args.alpha,)
    if args.model is not None:
        if args.model not in MODEL_IDS:
            raise UsageError(f"unknown model {args.model!r}; choose from {', '.join(MODEL_IDS)}")
        kw["models"] = (args.model,)
    spec = ExperimentSpec(**kw)
    for m in spec.models:
        parse_model_id(m)
    if spec.eta <= 0 or spec.steps < 0:
        raise UsageError("eta must be positive and steps nonnegative")
    return spec


def _alpha_list(spec: ExperimentSpec, args) -> tuple:
    """Noise levels a command covers: the ``--alpha`` value alone, else noiseless plus the list."""
    if args.alpha is not None:
        return (args.alpha,)
    return (0.0,) + tuple(a for a in spec.alphas if a > 0)


def run_dir(out, model: str, alpha: float, seed: int) -> Path:
    return Path(out) / "runs" / model / f"alpha_{alpha:g}" / f"seed_{seed}"


def data_dir(out, alpha: float, seed: int) -> Path:
    return Path(out) / "data" / f"alpha_{alpha:g}" / f"seed_{seed}"


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_generate(spec: ExperimentSpec, alphas, seeds) -> list[Path]:
    written = []
    for alpha in alphas:
        cfg = spec.task(alpha)
        for seed in seeds:
            d = data_dir(spec.out, alpha, seed)
            d.mkdir(parents=True, exist_ok=True)
            sets = {"train": sample_batch(cfg, step_rng(seed, STREAM_DATA), spec.M),
                    "eval": sample_batch(cfg, step_rng(seed, STREAM_EVAL), 10 * spec.M),
                    "ood": sample_ood_batch(cfg, step_rng(seed, STREAM_OOD), spec.ood_size)}
            manifest = {"task": cfg.to_dict(), "seed": seed, "files": {}}
            for name, batch in sets.items():
                p = d / f"{name}.csv"
                write_dataset(p, batch, seed)
                manifest["files"][name] = {"records": len(batch), "sha256": _digest(p)}
                written.append(p)
            (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return written


def _load_or_sample(spec: ExperimentSpec, alpha: float, seed: int):
    d = data_dir(spec.out, alpha, seed)
    if (d / "train.csv").exists():
        return read_dataset(d / "train.csv")[0]
    return sample_batch(spec.task(alpha), step_rng(seed, STREAM_DATA), spec.M)


def cmd_train(spec: ExperimentSpec, model: str, alpha: float, seed: int,
              mode: str = "population") -> Path:
    cfg = spec.task(alpha)
    tcfg = spec.train_config(seed)
    scheme, kind = parse_model_id(model)
    ev = EvalSets.build(cfg, seed, spec.eval_size, spec.ood_size)
    if mode == "population":
        traj = run_model(model, cfg, tcfg, ev)
    elif scheme is Scheme.REPARAM_FULL:
        if not cfg.noisy or kind.value == "softmax":
            raise UsageError("finite-sample training of the scalar family needs alpha > 0 "
                             "and linear/ReLU attention")
        traj, _ = train_noise_estimated(_load_or_sample(spec, alpha, seed), cfg, tcfg, ev, kind)
    else:
        data = _load_or_sample(spec, alpha, seed)
        per_epoch = max(1, len(data) // tcfg.batch_size)
        tcfg.steps = spec.epochs * per_epoch
        traj = train_full(cfg, tcfg, initial_dense(cfg, model, tcfg), eval_sets=ev,
                          dataset=data, targets="labels")
    d = run_dir(spec.out, model, alpha, seed)
    d.mkdir(parents=True, exist_ok=True)
    traj.to_csv(d / "trajectory.csv")
    save_params(d / "checkpoint.npz", traj.params)
    write_config(d / "config.txt", spec, model=model, alpha=alpha, seed=seed, mode=mode)
    manifest = {"model": model, "alpha": alpha, "seed": seed, "mode": mode,
                "trajectory_sha256": _digest(d / "trajectory.csv"), "events": traj.events}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def _discover(out) -> list[tuple[str, float, int, Path]]:
    root = Path(out) / "runs"
    found = []
    if not root.is_dir():
        return found
    for p in sorted(root.glob("*/alpha_*/seed_*/manifest.json")):
        m = json.loads(p.read_text())
        found.append((m["model"], float(m["alpha"]), int(m["seed"]), p.parent))
    return found


def checks_for_run(spec: ExperimentSpec, model: str, alpha: float, seed: int, d: Path) -> list[CheckReport]:
    manifest = json.loads((d / "manifest.json").read_text())
    meta = {"model": model, "alpha": alpha, "seed": seed}
    reports = []
    intact = _digest(d / "trajectory.csv") == manifest["trajectory_sha256"]
    reports.append(CheckReport("integrity", intact, intact, True, 0.0, meta))
    if not intact:
        return reports
    traj = read_trajectory(d / "trajectory.csv")
    params = load_params(d / "checkpoint.npz")
    cfg = spec.task(alpha)
    scheme, kind = parse_model_id(model)
    steps = traj.steps
    if scheme is not Scheme.REPARAM_FULL or (alpha > 0 and kind.value == "softmax"):
        return reports
    ood = sample_ood_batch(cfg, step_rng(seed, STREAM_OOD, 1), spec.ood_size)
    counts = sentence_counts(cfg, ood.Z, ood.q, ood.y)
    p_y, p_tau = ood_probabilities(params, cfg, ood, counts)
    if alpha == 0 and kind.value != "softmax":
        lam_cols = [c for c in traj.fieldnames() if c.startswith("lam_") and c != "lam_min"]
        lam_min = np.min([traj.column(c) for c in lam_cols], axis=0)
        # the 50..200 window, shrunk proportionally for short runs
        last = float(steps[-1])
        window = (min(50.0, last / 4), min(200.0, last))
        exact = np.log1p((cfg.N - 1) * np.exp(-lam_min))
        try:
            slope = fit_log_linear(steps, traj.column("loss_pop"), window)
            ref = fit_log_linear(steps, exact, window)
        except DomainError:
            log.info("%s alpha=%g seed=%d: too few points for a rate fit", model, alpha, seed)
        else:
            reports.append(check_linear_rate(slope, 1.1 * ref, 0.9 * ref, **meta))
        reports.append(check_ood_noiseless(p_y, int(steps[-1]), spec.eta, cfg.N, lam=float(lam_min[-1])))
    elif alpha == 0:
        T0 = phase_boundary(cfg, spec.eta)
        if steps[-1] <= T0:
            log.info("%s seed=%d stops before the phase boundary %d", model, seed, T0)
            return reports
        reports.append(check_two_phase(steps, traj.column("s"), traj.column("lam_min"), T0,
                                       spec.eta, len(cfg.Q)))
    else:
        reports.append(check_ood_noisy(p_y, p_tau, alpha, spec.M, int(steps[-1]), spec.eta,
                                       cfg.N, spec.delta))
        pop = sample_batch(cfg, step_rng(seed, STREAM_EVAL, 1), 2048)
        lg = closed_form_for_params(params, cfg, sentence_counts(cfg, pop.Z, pop.q, pop.y)).logits
        flips = check_flip_batch(lg.xi_attn, lg.xi_ff, pop.y)
        reports.append(CheckReport("flip", bool(flips.all()), float(flips.mean()), 1.0, 0.0, meta))
    return reports


def cmd_check(spec: ExperimentSpec) -> tuple[list[CheckReport], int]:
    runs = _discover(spec.out)
    if not runs:
        log.warning("no trajectories under %s; nothing to check", spec.out)
        return [], EXIT_OK
    reports = []
    for model, alpha, seed, d in runs:
        if model not in spec.models:
            continue
        reports.extend(checks_for_run(spec, model, alpha, seed, d))
    write_reports(Path(spec.out) / "checks.csv", reports)
    failed = [r for r in reports if not r.passed]
    for r in failed:
        log.error("check %s failed: measured %s, bound %s (%s)", r.check_id, r.measured, r.bound, r.metadata)
    return reports, EXIT_CHECK if failed else EXIT_OK


def cmd_figures(spec: ExperimentSpec) -> list[Path]:
    runs = _discover(spec.out)
    if not runs:
        raise FileNotFoundError(f"no trajectories under {spec.out}/runs")
    fig_dir = Path(spec.out) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    seed0 = min(s for _, _, s, _ in runs)
    trajs = {(m, a): read_trajectory(d / "trajectory.csv") for m, a, s, d in runs if s == seed0}
    alphas = sorted({a for _, a in trajs if a > 0})
    written = []
    mid = min(alphas, key=lambda a: abs(a - 0.5)) if alphas else None
    p = fig_dir / "losses.svg"
    plots.figure_losses(trajs, p, mid)
    written.append(p)
    for (m, a), tr in trajs.items():
        p = fig_dir / f"logits_{m}_alpha_{a:g}.svg"
        plots.figure_logits(tr, p, f"{m}, alpha={a:g}")
        written.append(p)
    cells = {}
    for m in MODEL_IDS:
        if (m, 0.0) not in trajs:
            continue
        v0 = judge(trajs[(m, 0.0)], 0.0)
        noisy = [judge(trajs[(m, a)], a) for a in alphas if (m, a) in trajs]
        cells[m] = (v0.loss_ok, v0.ood_ok, bool(noisy) and all(v.loss_ok for v in noisy),
                    bool(noisy) and all(v.ood_ok for v in noisy))
    plots.write_table(cells, fig_dir / "table.csv", fig_dir / "table.svg")
    written += [fig_dir / "table.csv", fig_dir / "table.svg"]
    for (m, a), tr in sorted(trajs.items()):
        v = judge(tr, a)
        log.info("%-18s alpha=%-4g loss=%.4g ood=%.4g (step-%d ood %.4g)", m, a, v.final_loss,
                 v.final_ood, 100, v.ood_at_ref)
    return written


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value file (see below)")
    common.add_argument("--seed", type=int, metavar="S", help="run a single seed")
    common.add_argument("--alpha", type=float, metavar="A", help="noise level (0 for noiseless)")
    common.add_argument("--model", metavar="ID", help="one of: " + ", ".join(MODEL_IDS))
    common.add_argument("--eta", type=float, metavar="H", help="learning rate")
    common.add_argument("--steps", type=int, metavar="T", help="training steps")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--optimizer", choices=("ngd", "gd"), help="dense-model optimizer")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="icrlab", description=__doc__, epilog=CONFIG_HELP,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write train/eval/unseen-output datasets")
    t = sub.add_parser("train", parents=[common], help="train grid models")
    t.add_argument("--mode", choices=("population", "finite"), default="population",
                   help="fresh batches every step, or the fixed training set")
    sub.add_parser("check", parents=[common], help="run the theory checks on saved runs")
    sub.add_parser("figures", parents=[common], help="draw SVG figures and the pass/fail table")
    sub.add_parser("reproduce-all", parents=[common], help="generate, train the grid, check, draw")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.verb != "check" else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = resolve_spec(args)
        seeds = spec.seeds
        if args.verb == "generate":
            for p in cmd_generate(spec, _alpha_list(spec, args), seeds):
                log.info("wrote %s", p)
            return EXIT_OK
        if args.verb == "train":
            for alpha in _alpha_list(spec, args):
                for seed in seeds:
                    for model in spec.models:
                        d = cmd_train(spec, model, alpha, seed, getattr(args, "mode", "population"))
                        log.info("trained %s alpha=%g seed=%d -> %s", model, alpha, seed, d)
            return EXIT_OK
        if args.verb == "check":
            reports, code = cmd_check(spec)
            print(f"{sum(r.passed for r in reports)}/{len(reports)} checks passed")
            return code
        if args.verb == "figures":
            for p in cmd_figures(spec):
                log.info("wrote %s", p)
            return EXIT_OK
        if args.verb == "reproduce-all":
            cmd_generate(spec, _alpha_list(spec, args), seeds)
            for alpha in _alpha_list(spec, args):
                for seed in seeds:
                    for model in spec.models:
                        cmd_train(spec, model, alpha, seed)
            cmd_figures(spec)
            reports, code = cmd_check(spec)
            print(f"{sum(r.passed for r in reports)}/{len(reports)} checks passed")
            return code
    except (UsageError, ConfigError) as e:
        print(f"icrlab: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DomainError) as e:
        print(f"icrlab: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
