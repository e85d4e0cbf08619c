"""Command-line front end.

Exit codes: 0 success, 1 usage or config error, 2 numerical divergence.
Every invocation writes ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidArgumentError, NumericError
from .experiments import (
    ApproximationConfig, MemorizationConfig, RateExperimentConfig, default_rate_train,
    derive_seed, run_approximation_experiment, run_memorization_experiment,
    run_rate_experiment, write_approximation_results, write_memorization_outputs,
    write_rate_regression, write_rate_results,
)
from .measures import (
    Grid, GridDensity, SampleSet, density_from_potential, kl_divergence, read_density_csv,
    read_samples_csv, write_samples_csv,
)
from .model import Activation, Potential, load_potential, rkhs_norm, sample_features, save_potential
from .objectives import Target, loss_backward, loss_forward
from .plotting import write_loglog_svg
from .sampling import LangevinConfig, sample_grid_oracle, sample_langevin
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _physical_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _positive_int(text) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _common(p: argparse.ArgumentParser, seed_required: bool = False):
    p.add_argument("--config", default=None, help="TOML file of flag values; flags take precedence")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="master seed" + (" (required)" if seed_required else " (default 0)"))
    p.add_argument("--plot", action="store_true", help="also write SVG plots")


def build_parser() -> _Parser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="biaspot", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a potential", formatter_class=fmt)
    _common(t)
    t.add_argument("--d", type=_positive_int, default=None, help="input dimension (default: from target)")
    t.add_argument("--m", type=_positive_int, default=500, help="number of random features")
    t.add_argument("--target", default=None, help="target potential JSON or sample CSV")
    t.add_argument("--reference", default=None,
                   help="potential JSON used for test KL (default: the target when it is a potential)")
    t.add_argument("--steps", type=_positive_int, default=1000)
    t.add_argument("--opt", choices=("gd", "sgd", "adam"), default="gd")
    t.add_argument("--lr", type=float, default=0.5)
    t.add_argument("--objective", choices=("backward", "forward"), default="backward")
    t.add_argument("--schedule", choices=("every", "log"), default="every")
    t.add_argument("--eval-every", type=_positive_int, default=1)
    t.add_argument("--batch-size", type=_positive_int, default=32)
    t.add_argument("--activation", default="relu", help="relu or smoothed-relu(beta)")
    t.add_argument("--p", type=_positive_int, default=None, help="grid points per axis")

    s = sub.add_parser("sample", help="draw samples from a potential", formatter_class=fmt)
    _common(s)
    s.add_argument("--potential", default=None, help="potential JSON")
    s.add_argument("--n", type=int, default=None, help="number of samples")
    s.add_argument("--sampler", choices=("oracle", "langevin"), default="oracle")
    s.add_argument("--p", type=_positive_int, default=None, help="grid points per axis (oracle)")
    s.add_argument("--langevin-step", type=float, default=1e-3)
    s.add_argument("--burn-in", type=_positive_int, default=5000)
    s.add_argument("--thinning", type=_positive_int, default=10)
    s.add_argument("--chains", type=_positive_int, default=8)

    e = sub.add_parser("eval", help="evaluate a metric", formatter_class=fmt)
    _common(e)
    e.add_argument("metric", choices=("kl", "loss", "rkhs-norm"))
    e.add_argument("--potential", default=None, help="model potential JSON")
    e.add_argument("--against", default=None,
                   help="reference: potential JSON, density CSV or sample CSV (sample CSV for loss)")
    e.add_argument("--objective", choices=("backward", "forward"), default="backward")
    e.add_argument("--p", type=_positive_int, default=None, help="grid points per axis")

    x = sub.add_parser("experiment", help="run a study", formatter_class=fmt)
    xsub = x.add_subparsers(dest="experiment", parser_class=_Parser)
    base = RateExperimentConfig()
    r = xsub.add_parser("rate", help="sample-complexity exponents", formatter_class=fmt)
    _common(r, seed_required=True)
    r.add_argument("--dims", type=_int_list, default=base.dims)
    r.add_argument("--ns", type=_int_list, default=base.ns)
    r.add_argument("--trials", type=_positive_int, default=base.trials)
    r.add_argument("--m", type=_positive_int, default=base.m)
    r.add_argument("--a-star", type=float, default=base.a_star_value)
    r.add_argument("--lr", type=float, default=base.train.step_size)
    r.add_argument("--max-steps", type=_positive_int, default=base.train.steps)
    r.add_argument("--patience", type=float, default=base.patience)
    r.add_argument("--patience-min", type=int, default=base.patience_min)
    r.add_argument("--sampler", choices=("oracle", "langevin"), default=base.sampler)
    r.add_argument("--regression", choices=("averaged", "pooled"), default=base.regression)
    r.add_argument("--p", type=_positive_int, default=None, help="grid points per axis; None means the per-d default")
    r.add_argument("--jobs", type=_positive_int, default=_physical_cores())

    mem = MemorizationConfig()
    mz = xsub.add_parser("memorize", help="memorization curves", formatter_class=fmt)
    _common(mz, seed_required=True)
    mz.add_argument("--d", type=_positive_int, default=mem.d)
    mz.add_argument("--n", type=_positive_int, default=mem.n)
    mz.add_argument("--m", type=_positive_int, default=mem.m)
    mz.add_argument("--a-star", type=float, default=mem.a_star_value)
    mz.add_argument("--steps", type=_positive_int, default=mem.steps)
    mz.add_argument("--opt", choices=("gd", "adam"), default=mem.optimizer)
    mz.add_argument("--lr", type=float, default=mem.learning_rate)
    mz.add_argument("--snapshot-steps", type=_int_list, default=mem.snapshot_steps)
    mz.add_argument("--no-control", action="store_true", help="skip the population-target control run")
    mz.add_argument("--p", type=_positive_int, default=None)
    mz.add_argument("--jobs", type=_positive_int, default=1, help="unused; accepted for uniformity")

    ap = ApproximationConfig()
    a = xsub.add_parser("approx", help="Monte-Carlo approximation rate", formatter_class=fmt)
    _common(a, seed_required=True)
    a.add_argument("--d", type=_positive_int, default=ap.d)
    a.add_argument("--m-ref", type=_positive_int, default=ap.m_ref)
    a.add_argument("--ms", type=_int_list, default=ap.ms)
    a.add_argument("--resamples", type=_positive_int, default=ap.resamples)
    a.add_argument("--a-value", type=float, default=ap.a_value)
    a.add_argument("--p", type=_positive_int, default=None)
    a.add_argument("--jobs", type=_positive_int, default=1, help="unused; accepted for uniformity")
    for p in (parser, t, s, e, x, r, mz, a):
        for act in p._actions:
            # the defaults formatter only annotates options that have help text
            if act.help is None:
                act.help = act.dest.replace("_", " ")
    return parser


# config files

def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    return doc


def _apply_config(subparser: argparse.ArgumentParser, doc: dict) -> None:
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"config field {key!r} is not a known option")
        if isinstance(value, (dict,)) or (isinstance(value, list)
                                          and any(isinstance(v, (list, dict)) for v in value)):
            raise UsageError(f"config field {key!r}: only scalars and flat arrays are allowed")
        act = actions[dest]
        try:
            if act.type is not None:
                value = act.type(value if not isinstance(value, list) else value)
            if act.choices is not None and value not in act.choices:
                raise ValueError(f"must be one of {list(act.choices)}")
        except (ValueError, TypeError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config field {key!r}: {exc}") from None
        defaults[dest] = value
    subparser.set_defaults(**defaults)


def _subparser(parser, argv):
    """The (sub)parser an argv addresses, for config defaults."""
    sub = parser
    for tok in argv:
        if tok.startswith("-"):
            continue
        choices = next((a.choices for a in sub._actions if isinstance(a, argparse._SubParsersAction)), None)
        if not choices or tok not in choices:
            break
        sub = choices[tok]
    return sub


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config:
        _apply_config(_subparser(parser, argv), _load_toml(known.config))
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required: train, sample, eval or experiment")
    if args.command == "experiment" and getattr(args, "experiment", None) is None:
        raise UsageError("experiment needs one of: rate, memorize, approx")
    return args


# manifest

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


class Manifest:
    def __init__(self, argv, out_dir):
        self.doc = {"command": ["biaspot", *argv], "version": __version__,
                    "started": _dt.datetime.now(_dt.timezone.utc).isoformat()}
        self.out = Path(out_dir)
        self.outputs: list[Path] = []

    def config(self, args: argparse.Namespace | None, **resolved):
        if args is not None:
            cfg = {k: _jsonable(v) for k, v in sorted(vars(args).items())}
            self.doc["config"] = cfg
            self.doc["master_seed"] = cfg.get("seed")
        if resolved:
            self.doc.setdefault("config", {}).update({k: _jsonable(v) for k, v in resolved.items()})

    def write(self, exit_code: int, message: str = "", result: dict | None = None) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        self.doc["finished"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.doc["exit_code"] = exit_code
        if message:
            self.doc["message"] = message
        if result:
            self.doc["result"] = result
        digests = {}
        for p in self.outputs:
            p = Path(p)
            if p.exists():
                digests[os.path.relpath(p, self.out)] = _sha256(p)
        self.doc["outputs"] = dict(sorted(digests.items()))
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")
        return path


# subcommands

def _grid_for(d: int, p) -> Grid:
    return Grid(d, p) if p else Grid.default(d)


def _load_target(path: str, d_flag):
    """(Target, potential or None) from a potential JSON or a sample CSV."""
    if not path:
        raise UsageError("missing --target (potential JSON or sample CSV)")
    src = Path(path)
    if not src.exists():
        raise UsageError(f"target file {path} does not exist")
    if src.suffix == ".json":
        pot = load_potential(src)
        return None, pot
    samples = read_samples_csv(src)
    if d_flag is not None and samples.d != d_flag:
        raise UsageError(f"target samples have d={samples.d}, but --d {d_flag}")
    return Target.empirical(samples), None


def cmd_train(args, manifest: Manifest) -> int:
    seed = 0 if args.seed is None else args.seed
    target, target_pot = _load_target(args.target, args.d)
    d = args.d or (target_pot.d if target_pot is not None else target.d)
    if target_pot is not None and target_pot.d != d:
        raise UsageError(f"target potential has d={target_pot.d}, but --d {d}")
    grid = _grid_for(d, args.p)
    if target_pot is not None and target_pot.m == args.m:
        features = target_pot.features
    else:
        features = sample_features(d, args.m, derive_seed(seed, d), Activation.parse(args.activation))
    reference = None
    if target_pot is not None:
        target = Target.population(density_from_potential(target_pot, grid), reference=target_pot)
        reference = target
    if args.reference:
        ref_pot = load_potential(args.reference)
        if ref_pot.d != d:
            raise UsageError(f"reference potential has d={ref_pot.d}, expected {d}")
        reference = Target.population(density_from_potential(ref_pot, grid), reference=ref_pot)
    cfg = TrainConfig(optimizer=args.opt, step_size=args.lr, steps=args.steps, eval_every=args.eval_every,
                      schedule=args.schedule, batch_size=args.batch_size, seed=seed, reference=reference,
                      objective=args.objective)
    manifest.config(None, d=d, p=grid.p, master_seed=seed)
    traj = train(Potential(features, np.zeros(features.m)), target, grid, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj_path, pot_path = out / "trajectory.csv", out / "potential.json"
    traj.to_csv(traj_path)
    save_potential(Potential(features, traj.final_coeffs), pot_path)
    manifest.outputs += [traj_path, pot_path]
    if args.plot and reference is not None:
        svg = out / "trajectory.svg"
        write_loglog_svg(svg, {"test KL": (traj.steps, traj.test_kl)}, "step", "test KL")
        manifest.outputs.append(svg)
    final = traj.checkpoints[-1] if traj.checkpoints else None
    print(f"train: {len(traj.checkpoints)} checkpoints, status={traj.status}"
          + (f", loss={final.train_loss:.6g}" if final else ""), file=sys.stderr)
    return EXIT_DIVERGED if traj.status != "ok" else EXIT_OK


def cmd_sample(args, manifest: Manifest) -> int:
    if not args.potential:
        raise UsageError("missing --potential")
    if args.n is None or args.n <= 0:
        raise UsageError(f"--n must be a positive integer, got {args.n}")
    seed = 0 if args.seed is None else args.seed
    pot = load_potential(args.potential)
    if args.sampler == "oracle":
        samples = sample_grid_oracle(density_from_potential(pot, _grid_for(pot.d, args.p)), args.n, seed)
    else:
        cfg = LangevinConfig(step=args.langevin_step, burn_in=args.burn_in, thinning=args.thinning,
                             chains=args.chains, seed=seed)
        samples = sample_langevin(pot, args.n, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "samples.csv"
    write_samples_csv(samples, path)
    manifest.outputs.append(path)
    return EXIT_OK


def _load_reference_density(path: str, grid_for_d):
    src = Path(path)
    if not src.exists():
        raise UsageError(f"file {path} does not exist")
    if src.suffix == ".json":
        pot = load_potential(src)
        return density_from_potential(pot, grid_for_d(pot.d))
    return read_density_csv(src)


def cmd_eval(args, manifest: Manifest) -> int:
    if not args.potential:
        raise UsageError("missing --potential")
    pot = load_potential(args.potential)
    if args.metric == "rkhs-norm":
        value = rkhs_norm(pot)
    else:
        if not args.against:
            raise UsageError("missing --against")
        grid = _grid_for(pot.d, args.p)
        if args.metric == "kl":
            ref = _load_reference_density(args.against, lambda d: _grid_for(d, args.p))
            if ref.grid.d != pot.d:
                raise UsageError(f"incompatible dimensions: reference d={ref.grid.d}, potential d={pot.d}")
            grid = ref.grid
            value = kl_divergence(ref, density_from_potential(pot, grid))
        else:
            src = Path(args.against)
            if src.suffix == ".json":
                other = load_potential(src)
                if other.d != pot.d:
                    raise UsageError(f"incompatible dimensions: {other.d} vs {pot.d}")
                target = Target.population(density_from_potential(other, grid))
            else:
                samples = read_samples_csv(src)
                if samples.d != pot.d:
                    raise UsageError(f"incompatible dimensions: samples d={samples.d}, potential d={pot.d}")
                target = Target.empirical(samples)
            fn = loss_backward if args.objective == "backward" else loss_forward
            value = fn(pot, target, grid)
    line = f"{args.metric}={value!r}"
    print(line)
    manifest.doc["result_line"] = line
    return EXIT_OK


def _require_seed(args):
    if args.seed is None:
        raise UsageError("--seed is required for experiment subcommands")


def cmd_experiment_rate(args, manifest: Manifest) -> int:
    train_cfg = replace(default_rate_train(), step_size=args.lr, steps=args.max_steps)
    cfg = RateExperimentConfig(dims=tuple(args.dims), ns=tuple(args.ns), trials=args.trials, m=args.m,
                               a_star_value=args.a_star, train=train_cfg, master_seed=args.seed or 0,
                               sampler=args.sampler, regression=args.regression, points_per_dim=args.p,
                               patience=args.patience, patience_min=args.patience_min)
    _require_seed(args)
    result = run_rate_experiment(cfg, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows_path, reg_path = out / "rate_results.csv", out / "rate_regression.csv"
    write_rate_results(result.rows, rows_path)
    write_rate_regression(result.regression, reg_path)
    manifest.outputs += [rows_path, reg_path]
    if args.plot:
        series = {}
        for d in cfg.dims:
            good = [r for r in result.rows if r.d == d and r.status == "ok"]
            ns = sorted({r.n for r in good})
            series[f"d={d}"] = (ns, [np.exp(np.mean([np.log(r.L_o) for r in good if r.n == n])) for n in ns])
        svg = out / "rate.svg"
        write_loglog_svg(svg, series, "n", "L_o (geometric mean)")
        manifest.outputs.append(svg)
    for reg in result.regression:
        print(f"d={reg.d} alpha={reg.alpha:.4f}+-{reg.alpha_stderr:.4f} "
              f"t_exponent={reg.t_exponent:.4f}+-{reg.t_exponent_stderr:.4f} excluded={reg.excluded_trials}",
              file=sys.stderr)
    if result.failed:
        print(f"rate experiment failed: {result.message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_experiment_memorize(args, manifest: Manifest) -> int:
    cfg = MemorizationConfig(d=args.d, n=args.n, m=args.m, a_star_value=args.a_star, steps=args.steps,
                             optimizer=args.opt, learning_rate=args.lr,
                             snapshot_steps=tuple(args.snapshot_steps), master_seed=args.seed or 0,
                             points_per_dim=args.p, control=not args.no_control)
    _require_seed(args)
    result = run_memorization_experiment(cfg)
    out = Path(args.out)
    manifest.outputs += write_memorization_outputs(result, out)
    if args.plot:
        svg = out / "memorize.svg"
        series = {"test KL": (result.steps, result.test_kl)}
        if result.control_kl is not None:
            series["control"] = (result.control_steps, result.control_kl)
        write_loglog_svg(svg, series, "step", "test KL")
        manifest.outputs.append(svg)
    print(f"T_o={result.T_o} L_o={result.L_o:.6g} final_kl={result.final_kl:.6g} "
          f"final_norm={result.final_norm:.6g}", file=sys.stderr)
    return EXIT_DIVERGED if result.status != "ok" else EXIT_OK


def cmd_experiment_approx(args, manifest: Manifest) -> int:
    cfg = ApproximationConfig(d=args.d, m_ref=args.m_ref, ms=tuple(args.ms), resamples=args.resamples,
                              a_value=args.a_value, master_seed=args.seed or 0, points_per_dim=args.p)
    _require_seed(args)
    result = run_approximation_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "approx_rate.csv"
    write_approximation_results(result, path)
    manifest.outputs.append(path)
    if args.plot:
        svg = out / "approx.svg"
        write_loglog_svg(svg, {"mean KL": (result.ms, result.mean_kl), "bound": (result.ms, result.bound)},
                         "m", "KL")
        manifest.outputs.append(svg)
    print(f"slope={result.slope:.4f}+-{result.slope_stderr:.4f}", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
    "rate": cmd_experiment_rate, "memorize": cmd_experiment_memorize, "approx": cmd_experiment_approx,
}


def _out_dir_guess(argv) -> str:
    for i, tok in enumerate(argv):
        if tok == "--out" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--out="):
            return tok.split("=", 1)[1]
    return "."


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    manifest = Manifest(argv, _out_dir_guess(argv))
    try:
        args = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        manifest.write(EXIT_USAGE, str(exc))
        return EXIT_USAGE
    manifest.out = Path(args.out)
    manifest.config(args)
    name = args.experiment if args.command == "experiment" else args.command
    try:
        code = _COMMANDS[name](args, manifest)
        msg = ""
    except UsageError as exc:
        code, msg = EXIT_USAGE, str(exc)
    except InvalidArgumentError as exc:
        code, msg = EXIT_USAGE, f"invalid argument: {exc}"
    except NumericError as exc:
        code, msg = EXIT_DIVERGED, f"numerical failure: {exc}"
    if msg:
        print(msg, file=sys.stderr)
    manifest.write(code, msg)
    return code


if __name__ == "__main__":
    sys.exit(main())
