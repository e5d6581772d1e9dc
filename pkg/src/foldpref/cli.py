"""``foldpref`` command-line entry point.

Commands: ``gen-data``, ``train ref``, ``train pref``, ``eval``, ``sweep``,
``abtest`` and ``check``. Every option can also come from a JSON file given
with ``--config``; its keys are the option names with dashes replaced by
underscores, unknown keys are rejected and command-line flags win. The
resolved configuration is written next to the command's outputs and can be
fed back through ``--config`` to repeat the run.

Outputs go to ``<root>/<command>-<timestamp>/``, where ``<root>`` is
``--out-dir``, else ``$FOLDPREF_OUTPUT_DIR``, else ``./runs``. ``gen-data``
writes to its explicit ``--out`` path instead.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, datasets, ddpm, foldsim, harness, prefloss
from .datasets import DatasetError
from .harness import NumericalError, PolicyConfig, TrainConfig
from .prefloss import LossConfig

ENV_OUTPUT_DIR = "FOLDPREF_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("foldpref")

PATH_KEYS = ("out", "data", "win", "lose", "ref", "ckpt", "a", "b", "tasks")
INTERNAL_KEYS = ("func", "config", "out_dir", "command", "inject_fault")
REQUIRED = {
    "gen-data": ("garment", "pref", "out"),
    "train ref": ("data",),
    "train pref": ("win",),
    "eval": ("ckpt", "garment", "pref"),
    "sweep": ("win", "lose", "ref", "garment", "pref"),
    "abtest": ("a", "b"),
    "check": (),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--out-dir", help=f"root for run directories (default ${ENV_OUTPUT_DIR} or ./runs)")
    return p


def _train_options(p: argparse.ArgumentParser, steps: int) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, default=steps)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=1e-3)
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--normalization", choices=("workspace", "data"), default="workspace")
    g.add_argument("--diffusion-steps", dest="K", type=int, default=50)
    g.add_argument("--beta-min", type=float, default=1e-3)
    g.add_argument("--beta-max", type=float, default=0.3)


def _pref_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("preference loss")
    g.add_argument("--beta", type=float, help="loss scale (default per method: dpo 10, rpo 20, kto/rko 12)")
    g.add_argument("--tau", type=float, default=0.15)
    g.add_argument("--qref-mode", choices=("zero", "batch_mean_clamped"), default="batch_mean_clamped")
    g.add_argument("--eval-every", type=int, default=500)
    g.add_argument("--holdout-fraction", type=float, default=0.1)
    g.add_argument("--ddpm-init", choices=("fresh", "reference"), default="fresh")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _common()
    root = _Parser(prog="foldpref", description="Preference alignment for toy diffusion folding policies.")
    sub = root.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    parsers: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("gen-data", parents=[common], help="generate expert demonstrations")
    p.add_argument("--garment")
    p.add_argument("--pref")
    p.add_argument("--n", type=int, default=60, help="demonstrations in --mode")
    p.add_argument("--mode", choices=datasets.MODES, default="standard")
    p.add_argument("--takeover", type=int, default=0, help="extra takeover demonstrations appended")
    p.add_argument("--noise-scale", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks", help="task file (default: built-in garments)")
    p.add_argument("--out", help="output .jsonl path")
    parsers["gen-data"] = p

    train = sub.add_parser("train", help="train a reference or preference policy")
    tsub = train.add_subparsers(dest="target", metavar="{ref,pref}")
    tsub.required = True
    p = tsub.add_parser("ref", parents=[common], help="fit a reference DDPM policy")
    p.add_argument("--data", nargs="+", help="demonstration files")
    p.add_argument("--out", help="checkpoint path (default: <run dir>/policy.ckpt)")
    _train_options(p, steps=20000)
    parsers["train ref"] = p

    p = tsub.add_parser("pref", parents=[common], help="preference fine-tuning or the DDPM baseline")
    p.add_argument("--method", choices=harness.ALL_METHODS, default="rko")
    p.add_argument("--no-reweight", action="store_true", help="rko without similarity reweighting")
    p.add_argument("--win", nargs="+", help="winning demonstration files")
    p.add_argument("--lose", nargs="+", help="losing demonstration files")
    p.add_argument("--ref", help="reference checkpoint")
    p.add_argument("--out", help="checkpoint path (default: <run dir>/policy.ckpt)")
    _train_options(p, steps=20000)
    _pref_options(p)
    parsers["train pref"] = p

    p = sub.add_parser("eval", parents=[common], help="roll out a checkpoint and score it")
    p.add_argument("--ckpt")
    p.add_argument("--garment")
    p.add_argument("--pref")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tasks")
    parsers["eval"] = p

    p = sub.add_parser("sweep", parents=[common], help="score methods over winner-count subsets")
    p.add_argument("--methods", default=",".join(harness.ALL_METHODS))
    p.add_argument("--counts", default="20:95:15", help="start:stop:stride (inclusive) or a comma list")
    p.add_argument("--seeds", default="0", help="comma list of training seeds")
    p.add_argument("--win", nargs="+")
    p.add_argument("--lose", nargs="+")
    p.add_argument("--ref")
    p.add_argument("--garment")
    p.add_argument("--pref")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--tasks")
    _train_options(p, steps=20000)
    _pref_options(p)
    parsers["sweep"] = p

    p = sub.add_parser("abtest", parents=[common], help="Bayesian A/B test on two score files")
    p.add_argument("a", nargs="?", help="scores of policy A (one per line, or a 'score' column)")
    p.add_argument("b", nargs="?", help="scores of policy B")
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--mc-draws", type=int, default=0, help="also report a Monte Carlo estimate")
    p.add_argument("--seed", type=int, default=0)
    parsers["abtest"] = p

    p = sub.add_parser("check", parents=[common], help="run the gradient and invariant checks")
    p.add_argument("--gradient-batches", type=int, default=20)
    p.add_argument("--inject-fault", choices=("dpo-sign",), help=argparse.SUPPRESS)
    parsers["check"] = p
    return root, parsers


def _command_name(args) -> str:
    return f"train {args.target}" if args.command == "train" else args.command


def parse(argv: list[str]) -> argparse.Namespace:
    root, parsers = build_parser()
    args = root.parse_args(argv)
    name = _command_name(args)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        if cfg.pop("command", name) != name:
            raise UsageError(f"config is for a different command than {name!r}")
        sub = parsers[name]
        known = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = root.parse_args(argv)
    missing = [k for k in REQUIRED[name] if getattr(args, k) in (None, [])]
    if missing:
        raise UsageError(f"{name}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    for key in PATH_KEYS:
        v = getattr(args, key, None)
        if isinstance(v, list):
            setattr(args, key, [str(Path(x).resolve()) for x in v])
        elif v is not None:
            setattr(args, key, str(Path(v).resolve()))
    if getattr(args, "no_reweight", False):
        if args.method not in ("rko", "rko_norw"):
            raise UsageError("--no-reweight only applies to --method rko")
        args.method = "rko_norw"
    args.command_name = name
    return args


def resolved_config(args) -> dict:
    out = {"command": args.command_name}
    for k, v in sorted(vars(args).items()):
        if k not in INTERNAL_KEYS and k not in ("target", "command_name", "no_reweight"):
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# run directories and logging


def run_directory(args) -> Path:
    root = Path(args.out_dir or os.environ.get(ENV_OUTPUT_DIR) or "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{args.command_name.replace(' ', '-')}-{stamp}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def _setup_logging(log_file: Path | None) -> None:
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    fmt = logging.Formatter("%(levelname)s %(message)s")
    err = logging.StreamHandler(sys.stderr)
    err.setFormatter(fmt)
    log.addHandler(err)
    if log_file is not None:
        fh = logging.FileHandler(log_file, mode="w")
        fh.setFormatter(fmt)
        log.addHandler(fh)


def blob_digest(path: str | Path) -> str:
    """Git-style object id of a file's content."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _log_inputs(args) -> None:
    for key in PATH_KEYS:
        v = getattr(args, key, None)
        if key == "out" or v is None:
            continue
        for p in v if isinstance(v, list) else [v]:
            if Path(p).is_file():
                log.info("input %s %s blob %s", key, p, blob_digest(p))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _load_demos(paths: list[str] | None) -> list[datasets.Demonstration]:
    demos = []
    for p in paths or []:
        try:
            demos += datasets.load_dataset(p)[0]
        except FileNotFoundError:
            raise DatasetError(f"{p}: no such dataset file") from None
    return demos


def _load_policy(path: str) -> ddpm.DiffusionPolicy:
    try:
        return ddpm.load_checkpoint(path)
    except FileNotFoundError:
        raise DatasetError(f"{path}: no such checkpoint") from None
    except ValueError as exc:
        raise DatasetError(str(exc)) from None


def _tasks(args) -> foldsim.TaskSet:
    try:
        return foldsim.load_tasks(getattr(args, "tasks", None))
    except (OSError, ValueError, KeyError) as exc:
        raise DatasetError(f"task file: {exc}") from None


def _train_config(args, method: str) -> TrainConfig:
    loss_cfg = None
    if method != "ddpm":
        beta = args.beta if args.beta is not None else harness.DEFAULT_BETA[method]
        loss_cfg = LossConfig(beta=beta, tau=args.tau, qref_mode=args.qref_mode)
    return TrainConfig(
        method=method, steps=args.steps, batch_size=args.batch_size, learning_rate=args.learning_rate,
        optimizer=args.optimizer, loss_cfg=loss_cfg, eval_every=getattr(args, "eval_every", 500),
        seed=args.seed, holdout_fraction=getattr(args, "holdout_fraction", 0.1),
        ddpm_init=getattr(args, "ddpm_init", "fresh"),
        policy=PolicyConfig(K=args.K, beta_min=args.beta_min, beta_max=args.beta_max,
                            normalization=args.normalization),
    )


def _write_losses(path: Path, losses: list[float]) -> None:
    with open(path, "w") as fh:
        fh.write("step\tloss\n")
        for i, v in enumerate(losses, 1):
            fh.write(f"{i}\t{v!r}\n")


def read_scores(path: str) -> list[float]:
    """Scores from a one-per-line file or from the ``score`` column of a CSV/TSV."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DatasetError(f"{path}: no such score file") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: no scores")
    delim = "\t" if "\t" in lines[0] else ","
    rows = list(csv.reader(lines, delimiter=delim))
    col = 0
    try:
        float(rows[0][0])
    except ValueError:
        header = [h.strip() for h in rows[0]]
        if "score" not in header and len(header) != 1:
            raise DatasetError(f"{path}: header has no 'score' column") from None
        col = header.index("score") if "score" in header else 0
        rows = rows[1:]
    try:
        scores = [float(r[col]) for r in rows]
    except (ValueError, IndexError):
        raise DatasetError(f"{path}: non-numeric score entries") from None
    if not scores or not all(np.isfinite(scores)):
        raise DatasetError(f"{path}: scores must be finite and non-empty")
    return scores


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    tasks = _tasks(args)
    try:
        garment = tasks.garment(args.garment)
        pref = tasks.pref(args.garment, args.pref)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    if args.mode == "takeover" and args.takeover:
        raise UsageError("--takeover adds takeover demos to a standard set; use it with --mode standard")
    if args.takeover:
        demos = datasets.compose_demos(garment, pref, args.n, args.takeover, args.noise_scale, args.seed)
    else:
        demos = datasets.generate_demos(garment, pref, args.n, args.mode, args.noise_scale, args.seed)
    out = Path(args.out)
    manifest = datasets.save_dataset(out, demos, {"noise_scale": args.noise_scale, "seed": args.seed})
    _write_json(out.with_name(out.name + ".config.json"), resolved_config(args))
    print(f"wrote {len(demos)} demos to {out} (sha256 {manifest['sha256'][:12]})")
    return EXIT_OK


def cmd_train_ref(args, run_dir: Path) -> int:
    demos = _load_demos(args.data)
    if not demos:
        raise DatasetError("reference data is empty")
    result = harness.train_reference(demos, _train_config(args, "ddpm"))
    ckpt = Path(args.out) if args.out else run_dir / "policy.ckpt"
    ddpm.save_checkpoint(ckpt, result.policy)
    _write_losses(run_dir / "losses.tsv", result.losses)
    final = result.losses[-1] if result.losses else float("nan")
    log.info("final loss %.6f after %d steps", final, args.steps)
    print(f"checkpoint {ckpt}\nfinal loss {final:.6f}")
    return EXIT_OK


def cmd_train_pref(args, run_dir: Path) -> int:
    method = args.method
    win = _load_demos(args.win)
    lose = _load_demos(args.lose)
    if not win:
        raise DatasetError("no winning demonstrations")
    if method != "ddpm" and not lose:
        raise DatasetError(f"{method} needs losing demonstrations (--lose); the dataset holds winners only")
    ref = _load_policy(args.ref) if args.ref else None
    if method != "ddpm" and ref is None:
        raise UsageError(f"{method} needs --ref")
    cfg = _train_config(args, method)
    result = harness.train_preference(method, win, lose, ref, cfg)
    ckpt = Path(args.out) if args.out else run_dir / "policy.ckpt"
    ddpm.save_checkpoint(ckpt, result.policy)
    _write_losses(run_dir / "losses.tsv", result.losses)
    with open(run_dir / "gaps.tsv", "w") as fh:
        fh.write("step\tgap\n")
        for step, gap in result.gaps:
            fh.write(f"{step}\t{gap!r}\n")
    log.info("method %s selected step %s", method, result.selected_step)
    print(f"checkpoint {ckpt}\nmethod {method} selected step {result.selected_step}")
    return EXIT_OK


def cmd_eval(args, run_dir: Path) -> int:
    policy = _load_policy(args.ckpt)
    tasks = _tasks(args)
    try:
        report = harness.evaluate(policy, tasks, args.garment, args.pref, args.runs, args.seed)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    with open(run_dir / "report.tsv", "w") as fh:
        fh.write("run\tscore\ttermination\n")
        for i, (s, r) in enumerate(zip(report.scores, report.reasons)):
            fh.write(f"{i}\t{s!r}\t{r}\n")
    _write_json(run_dir / "report.json", report.to_dict())
    print(f"{args.garment}/{args.pref}: mean {report.mean:.3f} +- {report.std:.3f} over {report.n} runs")
    return EXIT_OK


def cmd_sweep(args, run_dir: Path) -> int:
    methods = [m for m in args.methods.split(",") if m]
    bad = [m for m in methods if m not in harness.ALL_METHODS]
    if bad:
        raise UsageError(f"unknown methods: {', '.join(bad)}")
    counts = harness.parse_counts(args.counts)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    win, lose = _load_demos(args.win), _load_demos(args.lose)
    if not win or not lose:
        raise DatasetError("sweep needs winning and losing demonstrations")
    if max(counts) > len(win):
        raise DatasetError(f"largest count {max(counts)} exceeds the {len(win)} winning demos")
    ref = _load_policy(args.ref)
    tasks = _tasks(args)
    base = _train_config(args, methods[0])
    rows = harness.sweep(methods, counts, win, lose, ref, tasks, args.garment, args.pref, base,
                         args.runs, seeds, args.jobs)
    harness.write_results(rows, run_dir / "results.tsv", run_dir / "plot.json")
    for r in rows:
        print(f"{r['method']:<9} n={r['demos']:<3} seed={r['seed']} mean={r['mean']:.3f} std={r['std']:.3f}")
    return EXIT_OK


def cmd_abtest(args, run_dir: Path) -> int:
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    a, b = read_scores(args.a), read_scores(args.b)
    p = harness.bayes_ab(a, b, args.threshold)
    out = {"p_a_greater": p, "threshold": args.threshold,
           "a": harness.successes(a, args.threshold), "b": harness.successes(b, args.threshold)}
    if args.mc_draws:
        out["monte_carlo"] = harness.bayes_ab_monte_carlo(a, b, args.threshold, args.mc_draws, args.seed)
    _write_json(run_dir / "abtest.json", out)
    print(f"P(p_a > p_b) = {p:.6f}")
    if args.mc_draws:
        print(f"monte carlo ({args.mc_draws} draws) = {out['monte_carlo']:.6f}")
    return EXIT_OK


def _flip_dpo_sign():
    original = prefloss.dpo_loss

    def flipped(res, pairs, cfg):
        pairs = np.asarray(pairs).reshape(-1, 2)[:, ::-1]
        labels = res.labels.copy()
        labels[pairs[:, 0]], labels[pairs[:, 1]] = prefloss.WIN, prefloss.LOSE
        return original(prefloss.Residuals(res.theta, res.ref, labels), pairs, cfg)

    prefloss.dpo_loss = flipped
    return original


def cmd_check(args, run_dir: Path) -> int:
    restore = _flip_dpo_sign() if args.inject_fault == "dpo-sign" else None
    try:
        results = checks.run_all(args.gradient_batches)
    finally:
        if restore is not None:
            prefloss.dpo_loss = restore
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    (run_dir / "check.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "train ref": cmd_train_ref,
    "train pref": cmd_train_pref,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "abtest": cmd_abtest,
    "check": cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
        if args.command_name == "gen-data":
            _setup_logging(None)
            return cmd_gen_data(args)
        run_dir = run_directory(args)
        _setup_logging(run_dir / "run.log")
        config = resolved_config(args)
        _write_json(run_dir / "config.json", config)
        log.info("config %s", json.dumps(config, sort_keys=True))
        _log_inputs(args)
        return COMMANDS[args.command_name](args, run_dir)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
