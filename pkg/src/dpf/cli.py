"""Command-line entry point: ``dpf <command> [options]``.

Every command accepts ``--seed``, ``--threads`` and ``--config FILE``.  The
config file holds flat ``key=value`` lines named after the long options
(``max-sweeps=200`` or ``max_sweeps=200``); its values override anything
given on the command line.  Errors print a single ``error: ...`` line to
stderr and exit with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .data import (DataFormatError, RawEvent, binarize, load_interactions, save_tensor, step_timestamp,
                   write_events_tsv)
from .evaluation import MODEL_KINDS, evaluate_rolling
from .export import export_aggregate_factors, export_global_factors, export_trajectories
from .inference import FitConfig, fit
from .model import Hyperparams, save_latent, simulate
from .predict import log_score_matrix, rank_scores

logger = logging.getLogger("dpf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# config files -------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser, config: dict):
    actions = {a.dest: a for a in parser._actions}
    for key, raw in config.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "command"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r} needs a boolean, got {raw!r}")
            value = raw.lower() in _TRUE
        elif action.nargs in ("+", "*"):
            value = [action.type(v) if action.type else v for v in raw.split(",") if v]
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        setattr(args, key, value)


# shared option groups -------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--config", help="key=value file; its values override command-line flags")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _hyper(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--K", type=int, default=20, help="number of factors (default 20)")
    g.add_argument("--prior-variance", type=float, default=10.0,
                   help="variance of every Gaussian prior unless set individually (default 10)")
    for name in ("sigma_u", "sigma_v", "sigma_ubar", "sigma_vbar"):
        g.add_argument("--" + name.replace("_", "-"), type=float, default=None,
                       help=f"prior stddev {name.split('_')[1]} (overrides --prior-variance)")
    for name in ("mu_u", "mu_v", "mu_ubar", "mu_vbar"):
        g.add_argument("--" + name.replace("_", "-"), type=float, default=0.0,
                       help="prior mean (default 0)")


def _fitopts(p: argparse.ArgumentParser):
    g = p.add_argument_group("inference")
    d = FitConfig()
    g.add_argument("--max-sweeps", type=int, default=d.max_sweeps)
    g.add_argument("--tol", type=float, default=d.tol, help="relative ELBO change to stop at")
    g.add_argument("--min-sweeps", type=int, default=d.min_sweeps)
    g.add_argument("--inner-iters", type=int, default=d.inner_iters,
                   help="quasi-Newton iterations per block update")
    g.add_argument("--init-scale", type=float, default=d.init_scale)


def _dataopts(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="event TSV or serialized tensor")
    p.add_argument("--granularity", type=int, default=1,
                   help="seconds per time step for event TSV input (default 1)")
    p.add_argument("--origin", type=int, default=None,
                   help="timestamp of step 0 (default: earliest event)")
    p.add_argument("--counts", action="store_true", help="keep counts instead of binarizing")


def _hp(args) -> Hyperparams:
    sd = float(np.sqrt(args.prior_variance))
    kw = {name: getattr(args, name) if getattr(args, name) is not None else sd
          for name in ("sigma_u", "sigma_v", "sigma_ubar", "sigma_vbar")}
    kw.update({name: getattr(args, name) for name in ("mu_u", "mu_v", "mu_ubar", "mu_vbar")})
    return Hyperparams(K=args.K, **kw)


def _config(args) -> FitConfig:
    return FitConfig(max_sweeps=args.max_sweeps, tol=args.tol, min_sweeps=args.min_sweeps,
                     inner_iters=args.inner_iters, init_scale=args.init_scale,
                     seed=args.seed, threads=args.threads)


def _load(args):
    return load_interactions(args.data, args.granularity, args.origin, binary=not args.counts)


def _ids(values) -> list[str] | None:
    if values is None:
        return None
    out = []
    for v in values:
        out.extend(x for x in v.split(",") if x)
    return out


def _out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8")


# commands -----------------------------------------------------------------

def cmd_simulate(args):
    hp = _hp(args)
    tensor, truth = simulate(hp, args.users, args.items, args.steps, seed=args.seed)
    if not args.counts:
        tensor = binarize(tensor)
    if args.format == "tensor":
        save_tensor(tensor, args.out)
    else:
        events = (RawEvent(tensor.user_ids[n], tensor.item_ids[m],
                           step_timestamp(int(t), args.granularity), int(c))
                  for n, m, t, c in zip(tensor.users, tensor.items, tensor.steps, tensor.counts))
        write_events_tsv(events, args.out)
    if args.truth:
        save_latent(truth, args.truth)
    logger.info("simulated %d observations over %d steps", tensor.nnz, tensor.n_steps)


def cmd_fit(args):
    tensor = _load(args)
    hp = _hp(args)
    result = fit(tensor, hp, _config(args))
    meta = {"converged": str(result.converged), "sweeps": str(len(result.elbo_trace)),
            "seed": str(args.seed), "source": Path(args.data).name, "version": __version__}
    write_checkpoint(Checkpoint(hp, result.state, tensor.user_ids, tensor.item_ids,
                                result.elbo_trace, meta), args.out)
    logger.info("final ELBO %.6f after %d sweeps", result.elbo_trace[-1],
                len(result.elbo_trace))


def cmd_evaluate(args):
    tensor = _load(args)
    steps = args.eval_steps or list(range(1, tensor.n_steps))
    with _out(args.out) as fh:
        for i, kind in enumerate(args.model):
            report = evaluate_rolling(tensor, _hp(args), _config(args), kind, steps,
                                      recall_cutoff=args.recall_cutoff,
                                      extrapolate=not args.no_extrapolate)
            text = report.to_tsv()
            if i:
                text = "\n".join(l for l in text.splitlines() if not l.startswith(("#", "model\t")))
                text += "\n"
            fh.write(text)


def cmd_predict(args):
    ckpt = read_checkpoint(args.checkpoint)
    T = ckpt.n_steps
    step = T if args.step is None else args.step
    if not 0 <= step <= T:
        raise ValueError(f"step {step} outside [0, {T}]")
    user_ids = _ids(args.users) or list(ckpt.user_ids)
    rows = [ckpt.user_index(u) for u in user_ids]
    seen: dict[int, set[int]] = {}
    if args.exclude_data:
        known = {iid: i for i, iid in enumerate(ckpt.item_ids)}
        userpos = {uid: i for i, uid in enumerate(ckpt.user_ids)}
        data = load_interactions(args.exclude_data, args.granularity, args.origin)
        for n, m in zip(data.users.tolist(), data.items.tolist()):
            un, im = userpos.get(data.user_ids[n]), known.get(data.item_ids[m])
            if un is not None and im is not None:
                seen.setdefault(un, set()).add(im)
    scores = log_score_matrix(ckpt.state, ckpt.hp, step, users=np.array(rows),
                              extrapolate=not args.no_extrapolate)
    all_items = np.arange(len(ckpt.item_ids))
    with _out(args.out) as fh:
        fh.write("user_id\trank\titem_id\tscore\n")
        for row, (uid, n) in enumerate(zip(user_ids, rows)):
            cand = np.setdiff1d(all_items, np.fromiter(seen.get(n, ()), np.int64))
            ranked = rank_scores(scores[row], cand)[:args.top_k]
            for r, m in enumerate(ranked, start=1):
                fh.write(f"{uid}\t{r}\t{ckpt.item_ids[m]}\t{float(np.exp(scores[row, m]))!r}\n")


def cmd_export_trajectories(args):
    n = export_trajectories(read_checkpoint(args.checkpoint), args.out,
                            _ids(args.users), _ids(args.items))
    logger.info("wrote %d rows", n)


def cmd_export_global(args):
    n = export_global_factors(read_checkpoint(args.checkpoint), args.out,
                              _ids(args.users), _ids(args.items))
    logger.info("wrote %d rows", n)


def cmd_export_aggregate(args):
    export_aggregate_factors(read_checkpoint(args.checkpoint), args.out,
                             normalize=args.normalize, kind=args.kind,
                             scale="raw" if args.raw else "exp")


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpf", description="Dynamic Poisson factorization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="sample a synthetic dataset from the model")
    _common(p)
    _hyper(p)
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--counts", action="store_true", help="keep counts instead of binarizing")
    p.add_argument("--format", choices=("tensor", "events"), default="tensor",
                   help="tensor keeps exact dimensions; events writes a timestamped TSV")
    p.add_argument("--granularity", type=int, default=1,
                   help="seconds per step for --format events (default 1)")
    p.add_argument("--truth", help="also write the latent factors (.npz)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model and write a checkpoint")
    _common(p)
    _dataopts(p)
    _hyper(p)
    _fitopts(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="rolling one-step-ahead evaluation")
    _common(p)
    _dataopts(p)
    _hyper(p)
    _fitopts(p)
    p.add_argument("--model", nargs="+", choices=MODEL_KINDS, default=["dPF"])
    p.add_argument("--eval-steps", type=int, nargs="+", default=None,
                   help="steps to hold out in turn (default: every step after the first)")
    p.add_argument("--recall-cutoff", type=int, default=50)
    p.add_argument("--no-extrapolate", action="store_true",
                   help="score with the last fitted step instead of one step ahead")
    p.add_argument("--out", default=None, help="metric TSV (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="top-k items for users from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", nargs="+", default=None,
                   help="user ids, space or comma separated (default all)")
    p.add_argument("--step", type=int, default=None,
                   help="time step to score (default: one step past the fitted range)")
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--exclude-data", default=None,
                   help="event TSV or tensor whose items are removed per user")
    p.add_argument("--granularity", type=int, default=1)
    p.add_argument("--origin", type=int, default=None)
    p.add_argument("--no-extrapolate", action="store_true")
    p.add_argument("--out", default=None, help="output TSV (default stdout)")
    p.set_defaults(func=cmd_predict)

    for name, func, helptext in (
            ("export-trajectories", cmd_export_trajectories,
             "per-step expression of every factor"),
            ("export-global", cmd_export_global, "global factor means")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--users", nargs="+", default=None, help="user ids (default all)")
        p.add_argument("--items", nargs="+", default=None, help="item ids (default all)")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("export-aggregate", help="per-step factor totals averaged over entities")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=("user", "item"), default="user")
    p.add_argument("--raw", action="store_true", help="average log-space means instead")
    p.add_argument("--normalize", action="store_true",
                   help="divide each step by its total over factors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_aggregate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            apply_config(args, sub, read_config(args.config))
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, IndexError, OSError, FloatingPointError, DataFormatError,
            CheckpointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
