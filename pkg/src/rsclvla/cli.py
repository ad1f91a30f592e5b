"""``rscl`` command line: gen-data, train, eval, analyze, gradcheck.

Exit codes: 0 success, 1 usage or validation error, 2 I/O error,
3 numerical failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .analysis import AlignmentError, cknna, dump_embeddings, linear_cka
from .config import DOCS, ConfigError, TrainConfig, coerce, load_config
from .contrastive import ContrastiveError
from .encoder import EncoderError
from .flowmatch import FlowError
from .synthenv import (
    EnvConfig,
    EnvError,
    ExpertPolicy,
    RandomPolicy,
    ViewRenderer,
    evaluate_policy,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .tensor import NonFiniteError, ShapeError, finite_diff_check
from .trainer import (
    NonFiniteLossError,
    TrainingError,
    assemble_batch,
    compute_losses,
    draw,
    init_state,
    lambda_at,
    load_checkpoint,
    prepare,
    total_loss,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("rsclvla")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_csv(rows: list[dict[str, Any]], out: str | None) -> None:
    if not rows:
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def parse_overrides(tokens: Sequence[str]) -> dict[str, Any]:
    """``--key value`` / ``--key=value`` pairs naming TrainConfig fields."""
    out: dict[str, Any] = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in DOCS:
            raise UsageError(f"unknown config key {key!r}")
        if not eq:
            value = next(it, None)
            if value is None:
                raise UsageError(f"--{key} needs a value")
        out[key] = coerce(key, value)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    overrides = {}
    if args.n is not None:
        overrides["n_traj"] = args.n
    if args.seed is not None:
        overrides["data_seed"] = args.seed
    cfg = load_config(args.config, overrides)
    ds = generate_dataset(cfg.n_traj, cfg.env, cfg.data_seed)
    write_dataset(ds, args.out)
    log.info("wrote %d trajectories to %s (%d re-drawn)", len(ds.trajectories), args.out, ds.discarded)
    return EXIT_OK


def cmd_train(args, extra: Sequence[str]) -> int:
    cfg = load_config(args.config, parse_overrides(extra))
    res = train(cfg)
    log.info("final checkpoint %s", res.checkpoint)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ValueError("empty evaluation")
    if args.policy == "model" and not args.checkpoint:
        raise UsageError("eval: --checkpoint is required for the model policy")
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        env = EnvConfig(**ck.data["env"])
        render_seed = ck.data["render_seed"]
    else:
        ck = None
        cfg = load_config(args.config)
        env, render_seed = cfg.env, cfg.data_seed
    policy = {
        "model": lambda: ck.policy(),
        "expert": lambda: ExpertPolicy(env),
        "random": lambda: RandomPolicy(env),
    }[args.policy]()
    res = evaluate_policy(policy, args.episodes, args.seed, ViewRenderer(render_seed, env), env)
    row = {
        "checkpoint": args.checkpoint or "",
        "policy": args.policy,
        "episodes": args.episodes,
        "seed": args.seed,
        "success_rate": f"{res.success_rate:.6f}",
    }
    _write_csv([row], args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    ds = read_dataset(args.dataset)
    rows = []
    for path in args.checkpoint:
        ck = load_checkpoint(path)
        cfg = ck.train_config
        dump = dump_embeddings(
            ck.params, cfg.model, ds, args.window or cfg.analysis_window, args.per_task or cfg.analysis_per_task,
            meta={"checkpoint": str(path), "dataset": str(args.dataset)},
        )
        if args.dump:
            dump.save(args.dump if len(args.checkpoint) == 1 else f"{args.dump}.{Path(path).stem}")
        values = {
            "cka_proprio": linear_cka(dump.x, dump.q),
            "cknna_proprio": cknna(dump.x, dump.q, args.k),
            "cknna_self": cknna(dump.x, dump.x, args.k),
        }
        rows += [{"checkpoint": path, "metric": m, "k": args.k, "value": f"{v:.9f}"} for m, v in values.items()]
    _write_csv(rows, args.out)
    return EXIT_OK


def gradcheck_report(
    seeds: Sequence[int], batch: int, coords: int, cfg: TrainConfig | None = None, step: float = 1e-3
) -> list[dict[str, Any]]:
    """Max relative error of backprop vs central differences for each loss and seed.

    ``coords`` coordinates are probed per parameter tensor, so every tensor of
    every group is exercised. Attention query/key weights have gradients near
    1e-9 at init; a 3-point quotient cannot resolve those in float64 (rounding
    noise at small steps, truncation at large ones), so the five-point stencil
    is used.
    """
    base = cfg or TrainConfig()
    rows = []
    for seed in seeds:
        c = base.replace(train_seed=seed, batch_size=batch, max_steps=max(base.max_steps, 1))
        ds = generate_dataset(max(2, batch), c.env, seed)
        data = prepare(ds, c.horizon)
        rng = np.random.default_rng(seed)
        b = assemble_batch(data, batch, rng)
        d = draw(c, batch, rng, rng)
        state = init_state(c)
        params = [state.params[n] for n in state.trainable(c)]
        lam = lambda_at(c, 0)
        losses = {
            "fm": lambda: compute_losses(state.params, b, d, c)[0],
            "rscl": lambda: compute_losses(state.params, b, d, c)[1],
            "total": lambda: total_loss(*compute_losses(state.params, b, d, c), lam),
        }
        for name, f in losses.items():
            err = finite_diff_check(
                f, params, step=step, max_coords=coords, rng=np.random.default_rng([seed, len(name)]), stencil=5
            )
            rows.append({"seed": seed, "loss": name, "batch": batch, "max_rel_err": err})
    return rows


def cmd_gradcheck(args) -> int:
    if args.batch < 2:
        raise ValueError("gradcheck needs batch >= 2 for a non-trivial contrastive loss")
    cfg = load_config(args.config) if args.config else TrainConfig(supervision="proprio_state")
    if cfg.supervision == "none":
        raise ValueError("gradcheck needs a contrastive supervision target")
    seeds = range(args.seed, args.seed + args.n_seeds)
    rows = gradcheck_report(seeds, args.batch, args.coords, cfg, args.step)
    worst = max(r["max_rel_err"] for r in rows)
    for r in rows:
        r["max_rel_err"] = f"{r['max_rel_err']:.3e}"
        r["pass"] = float(r["max_rel_err"]) < args.tol
    _write_csv(rows, args.out)
    if worst >= args.tol:
        log.error("gradient check failed: max relative error %.3e >= %.1e", worst, args.tol)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rscl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train; any config key may be given as --key value")
    t.add_argument("--config")

    e = sub.add_parser("eval", help="rollout success rate as CSV")
    e.add_argument("--checkpoint")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--policy", choices=("model", "expert", "random"), default="model")
    e.add_argument("--config", help="environment settings when no checkpoint is given")
    e.add_argument("--out")

    a = sub.add_parser("analyze", help="CKA / CKNNA of adapter embeddings vs proprio as CSV")
    a.add_argument("--checkpoint", required=True, nargs="+")
    a.add_argument("--dataset", required=True)
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--window", type=int)
    a.add_argument("--per-task", type=int)
    a.add_argument("--dump", help="also save the embedding dump (JSON)")
    a.add_argument("--out")

    c = sub.add_parser("gradcheck", help="backprop vs finite differences for each loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=1)
    c.add_argument("--batch", type=int, default=4)
    c.add_argument("--coords", type=int, default=6, help="coordinates probed per parameter tensor")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=1e-3, help="five-point central-difference step")
    c.add_argument("--config")
    c.add_argument("--out")
    return p


_USAGE_ERRORS = (
    UsageError, ConfigError, ContrastiveError, EncoderError, EnvError, FlowError, AlignmentError,
    ShapeError, TrainingError, ValueError, KeyError,
)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(message)s",
            stream=sys.stderr,
        )
        if args.command == "train":
            return cmd_train(args, extra)
        if extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        handler = {
            "gen-data": cmd_gen_data,
            "eval": cmd_eval,
            "analyze": cmd_analyze,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except (NonFiniteError, NonFiniteLossError, FloatingPointError) as e:
        print(f"rscl: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"rscl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except _USAGE_ERRORS as e:
        print(f"rscl: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
