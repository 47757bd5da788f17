"""Command-line entry point.

Errors go to stderr as one line ``error[CODE]: message`` and exit non-zero:

    E_USAGE   bad flags or arguments (exit 2)
    E_CONFIG  invalid model config or allocation grid
    E_DATA    dataset generation or format problem
    E_CKPT    checkpoint format, version or config mismatch
    E_TRAIN   training diverged
    E_IO      file could not be read or written

``dump-mask`` prints one row of the attention allow-matrix per line, ``1``
where the query (row) may attend to the key (column).
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import flops
from . import toyenv as te
from .autograd import ContractError
from .checkpoint import CheckpointError, model_from_checkpoint, save_checkpoint
from .coupled_attention import build_hybrid_mask
from .model import ConfigError, Model, ModelConfig
from .train import (LOSSES, TrainingError, build_samples, evaluate, evaluate_loss,
                    model_policy, train)


class CliError(Exception):
    def __init__(self, code, message, status=1):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message, status=2)


def _load_config(path, seed=None):
    if path is None:
        cfg = ModelConfig()
    else:
        try:
            with open(path) as fh:
                cfg = ModelConfig.from_text(fh.read())
        except OSError as exc:
            raise CliError("E_IO", f"cannot read config {path}: {exc.strerror}") from exc
    return cfg if seed is None else cfg.replace(seed=seed)


def _read_data(path):
    try:
        episodes = te.read_dataset(path)
    except OSError as exc:
        raise CliError("E_IO", f"cannot read dataset {path}: {exc.strerror}") from exc
    if not episodes:
        raise CliError("E_DATA", "empty dataset")
    return episodes


def _write_csv(rows, header, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _num(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    if args.count <= 0:
        raise CliError("E_DATA", "empty dataset")
    axes = tuple(a.strip() for a in args.spec.split(",") if a.strip())
    h, w = (int(v) for v in args.grid.lower().split("x"))
    spec = te.TaskSpec(axes=axes, grid=(h, w), n_objects=args.objects, n_goals=args.goals,
                       seed=args.seed)
    episodes = te.generate_dataset(spec, args.count, args.seed)
    digest = te.write_dataset(episodes, args.out)
    print(digest)


def split_train_eval(episodes, eval_fraction=0.2):
    n_eval = max(1, int(round(len(episodes) * eval_fraction))) if len(episodes) > 1 else 0
    return episodes[:len(episodes) - n_eval], episodes[len(episodes) - n_eval:]


def _train_model(cfg, episodes, steps, batch, lr, seed, loss_kind="l1"):
    model = Model(cfg)
    if steps:
        samples = build_samples(episodes, cfg.K, cfg.D)
        train(model, samples, steps, batch, lr, seed, loss_kind=loss_kind)
    return model


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    episodes = _read_data(args.data)
    rows = []

    def log(step, loss, retained):
        rows.append((step, _num(loss), _num(retained)))

    model = Model(cfg)
    samples = build_samples(episodes, cfg.K, cfg.D)
    if args.steps:
        train(model, samples, args.steps, args.batch, args.lr, args.seed, log=log,
              loss_kind=args.loss)
    else:
        idx = np.arange(min(args.batch, len(samples)))
        rows.append((0, _num(evaluate_loss(model, samples.batch(idx), args.loss)),
                     _num(float(np.mean(model.last_retained)))))
    save_checkpoint(model, args.ckpt_out, step=args.steps)
    log_path = args.log or args.ckpt_out + ".log.csv"
    _write_csv(rows, ("step", "loss", "retained_mean"), log_path)


def cmd_eval(args):
    model, _ = model_from_checkpoint(args.ckpt)
    episodes = _read_data(args.data)
    cfg = model.cfg
    samples = build_samples(episodes, cfg.K, cfg.D)
    metrics = evaluate(episodes, model_policy(model), cfg.K, cfg.D, samples=samples)
    _write_csv([("l1", _num(metrics["l1"])), ("success", _num(metrics["success"]))],
               ("metric", "value"), args.out)


def _ablate_cell(job):
    cfg, train_eps, eval_eps, steps, batch, lr, seed, loss_kind = job
    model = _train_model(cfg, train_eps, steps, batch, lr, seed, loss_kind)
    return evaluate(eval_eps, model_policy(model), cfg.K, cfg.D)["success"]


def cmd_ablate(args):
    base = _load_config(args.config, args.seed)
    cells = flops.parse_grid(args.grid)
    rows = flops.ablation_grid(base, cells)
    success = [float("nan")] * len(rows)
    if args.steps is not None and args.data:
        train_eps, eval_eps = split_train_eval(_read_data(args.data))
        jobs = [(r.config, train_eps, eval_eps, args.steps, args.batch, args.lr, args.seed,
                 args.loss) for r in rows]
        workers = max(1, int(os.environ.get("CGV_THREADS", "1")))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                success = list(pool.map(_ablate_cell, jobs))
        else:
            success = [_ablate_cell(j) for j in jobs]
    dense = flops.count_dense(base).total
    out = []
    for r, s in zip(rows, success):
        out.append((f"{r.stage1:g}x{r.stage2:g}", r.stage1, r.stage2, _num(r.product),
                    "yes" if r.feasible else "no", _num(s), _num(dense / r.report.total), r.note))
    _write_csv(out, ("allocation", "stage1", "stage2", "product", "feasible", "success",
                     "ledger_ratio", "note"), args.out)


def cmd_flops(args):
    if args.paper:
        res = flops.paper_ratio()
        reports = {"dense": res["dense"], "sparse": res["sparse"]}
        head = flops.header(flops.PAPER_ASSUMPTIONS)
        extra = (f"# ratio with encoders: {res['with_encoders']:.4f}\n"
                 f"# ratio without encoders: {res['without_encoders']:.4f}\n")
    else:
        cfg = _load_config(args.config, args.seed)
        reports = {"dense": flops.count_dense(cfg), "sparse": flops.count_sparse(cfg)}
        head = ""
        d, s = reports["dense"], reports["sparse"]
        extra = (f"# ratio total: {d.total / s.total:.4f}\n"
                 f"# ratio llm stage: {d.llm / s.llm:.4f}\n")
    sys.stdout.write(head + flops.format_table(reports) + extra)
    if args.records:
        with open(args.records, "w") as fh:
            fh.write(flops.format_records(reports))


def cmd_dump_mask(args):
    try:
        M, T, K, D = (int(v) for v in args.dims.split(","))
    except ValueError as exc:
        raise CliError("E_USAGE", "--dims expects M,T,K,D", status=2) from exc
    sys.stdout.write(build_hybrid_mask(M, T, K, D).render() + "\n")


def cmd_dump_attn(args):
    if args.ckpt:
        model, _ = model_from_checkpoint(args.ckpt)
    else:
        model = Model(_load_config(args.config, args.seed))
    cfg = model.cfg
    if not cfg.aggregate:
        raise CliError("E_CONFIG", "model has no aggregation tokens")
    episodes = _read_data(args.data)
    if not 0 <= args.episode < len(episodes):
        raise CliError("E_DATA", f"episode {args.episode} out of range 0..{len(episodes) - 1}")
    ep = episodes[args.episode]
    imgs = [te.render_patches(ep.scene, b)[None] for b in (0, 1)]
    model(imgs[0], imgs[1], ep.instruction[None], keep_weights=True)
    P, G = cfg.n_patches, cfg.n_agg
    header = ["branch", "block", "head", "slot"] + [f"p{i}" for i in range(P)] + \
        [f"g{i}" for i in range(G)]
    rows = []
    for b, branch in enumerate(model.branches):
        for k, block in enumerate(branch.blocks):
            w = block.attn.last_weights[0]  # [heads, S, S]
            for h in range(w.shape[0]):
                for g in range(G):
                    rows.append([b, k, h, g] + [_num(v) for v in w[h, P + g]])
    _write_csv(rows, header, args.out)


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="vlaroute", description="Token-routing action model toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="model config file (key=value lines)")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("gen-data", cmd_gen_data, "generate a toy dataset")
    sp.add_argument("--spec", default="spatial,object,goal", help="comma-separated variation axes")
    sp.add_argument("--grid", default="8x8")
    sp.add_argument("--objects", type=int, default=3)
    sp.add_argument("--goals", type=int, default=2)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--out", required=True)

    sp = command("train", cmd_train, "train a model and write a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--loss", choices=LOSSES, default="l1")
    sp.add_argument("--ckpt-out", required=True)
    sp.add_argument("--log", default=None, help="training log CSV (default: <ckpt>.log.csv)")

    sp = command("eval", cmd_eval, "closed-loop evaluation of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default=None)

    sp = command("ablate", cmd_ablate, "stage-allocation ablation")
    sp.add_argument("--grid", default="4x2,2x4,1x8,8x1")
    sp.add_argument("--data", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--loss", choices=LOSSES, default="l1")
    sp.add_argument("--out", default=None)

    sp = command("flops", cmd_flops, "analytic FLOPs report")
    sp.add_argument("--paper", action="store_true", help="use the paper-scale preset")
    sp.add_argument("--records", default=None, help="also write key=value records here")

    sp = command("dump-mask", cmd_dump_mask, "print the coupled-attention allow-matrix")
    sp.add_argument("--dims", required=True, help="M,T,K,D")

    sp = command("dump-attn", cmd_dump_attn, "aggregation-token attention weights as CSV")
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--episode", type=int, default=0)
    sp.add_argument("--out", default=None)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except CliError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.status
    except (ConfigError, ContractError) as exc:
        print(f"error[E_CONFIG]: {exc}", file=sys.stderr)
        return 1
    except (te.DatasetFormatError, te.GenerationError) as exc:
        print(f"error[E_DATA]: {exc}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"error[E_CKPT]: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"error[E_TRAIN]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
