"""Command-line entry point.

Subcommands: train, compare, evaluate, gradcheck, diagnose, lr-sweep,
export-plots.  Every command reads configs/checkpoints/metrics files and
writes plot-ready CSVs or run artifacts; no plotting is performed here.

Exit codes: 0 success, 1 usage/config/format error, 2 flagged divergence.
Verbosity comes from the MERIT_LOG environment variable (debug|info).
Reruns with identical inputs reproduce identical outputs, except that
metrics wall_ms fields track real time unless MERIT_FIXED_CLOCK is set.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from merit import diagnostics as diag
from merit import harness
from merit.model import (
    finite_diff_grad,
    forward,
    init_params,
    loss_and_grads,
    param_names,
)
from merit.tensor import SeededRng, max_norm

logger = logging.getLogger("merit.cli")

GRADCHECK_TOL = 1e-4


def _configure_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("MERIT_LOG", "").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(name)s %(levelname)s %(message)s")


def _write_csv(path, header: str, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(str(x) for x in row) + "\n")
    return path


def _cmd_train(args) -> int:
    cfg = harness.parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.synthetic is not None and not args.keep_synthetic_seed:
            cfg.synthetic.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    result = harness.train(cfg)
    if result.diverged:
        print(f"run diverged; metrics at {result.metrics_path}")
        return 2
    train_str = "n/a" if result.final_train_loss is None else f"{result.final_train_loss:.6f}"
    val_str = "n/a" if result.final_val_loss is None else f"{result.final_val_loss:.6f}"
    print(f"final train loss: {train_str}")
    print(f"final val loss: {val_str}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_compare(args) -> int:
    cfgs = [harness.parse_config(p) for p in args.configs]
    out = args.out or str(Path(cfgs[0].out_dir) / "compare.csv")
    rows, path = harness.compare(cfgs, out)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = harness.load_checkpoint(args.ckpt)
    cfg = harness.parse_config(args.config)
    train_split, val_split = harness._load_run_data(cfg)
    split = val_split if args.split == "val" else train_split
    loss = harness.evaluate(ckpt, split, args.batches, args.batch_size)
    print(f"{args.split} loss: {loss:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    if args.coords < 1:
        raise harness.ConfigError(f"--coords must be >= 1, got {args.coords}")
    cfg = harness.parse_config(args.config)
    mcfg = cfg.model
    root = SeededRng(cfg.seed)
    params = init_params(mcfg, root.spawn("init"))
    train_split, _ = harness._load_run_data(cfg)
    tokens, targets = harness.next_batch(
        train_split, 0, seed=cfg.seed, batch_size=2,
        context_len=min(mcfg.context_len, 16), tag="gradcheck",
    )
    _, grads, _ = loss_and_grads(mcfg, params, tokens, targets)
    if args.corrupt_gradient:
        # negative control: poison one whole group so the check must trip
        grads[param_names(mcfg)[0]] += 1e-2
    pick = root.spawn("gradcheck-coords")
    names = param_names(mcfg)
    worst = 0.0
    worst_coord = None
    for i in range(args.coords):
        # cycle through parameter groups so every group gets probed
        name = names[i % len(names)]
        idx = int(pick.integers(0, params[name].size))
        fd = finite_diff_grad(mcfg, params, tokens, targets, (name, idx), 1e-5)
        an = float(grads[name].flat[idx])
        err = abs(an - fd) / max(1.0, abs(an), abs(fd))
        if err > worst:
            worst, worst_coord = err, (name, idx)
    print(f"max relative error over {args.coords} coordinates: {worst:.3e}"
          + (f" at {worst_coord[0]}[{worst_coord[1]}]" if worst_coord else ""))
    if worst > GRADCHECK_TOL:
        print(f"FAIL: exceeds tolerance {GRADCHECK_TOL:g}")
        return 1
    print(f"OK: within tolerance {GRADCHECK_TOL:g}")
    return 0


def _curvature_batch(ckpt: harness.Checkpoint):
    g = SeededRng(0).spawn("curvature-batch")
    T = min(ckpt.cfg.context_len, 16)
    seqs = g.integers(0, ckpt.cfg.vocab_size, (2, T + 1))
    return seqs[:, :-1], seqs[:, 1:]


def _cmd_diagnose(args) -> int:
    ckpt = harness.load_checkpoint(args.ckpt)
    out = Path(args.out or f"diagnose-{args.which}.csv")
    matrices = {n: p for n, p in ckpt.params.items() if p.ndim == 2}
    if args.which == "norm-gap":
        rows = [(n, repr(diag.norm_gap_ratio(p))) for n, p in matrices.items()]
        _write_csv(out, "param,norm_gap_ratio", rows)
        mean = float(np.mean([diag.norm_gap_ratio(p) for p in matrices.values()]))
        print(f"norm gap over {len(rows)} matrices: mean {mean:.4f}; wrote {out}")
    elif args.which == "similarity":
        rows = []
        for n, p in matrices.items():
            rs, cs = diag.rowcol_similarity(p)
            rows.append((n, repr(rs), repr(cs)))
        _write_csv(out, "param,row_sim,col_sim", rows)
        print(f"row/column similarity for {len(rows)} matrices; wrote {out}")
    elif args.which == "curvature":
        tokens, targets = _curvature_batch(ckpt)
        rep = diag.model_curvature(
            ckpt.cfg, ckpt.params, tokens, targets, SeededRng(args.seed),
            power_iters=args.iters, probes=args.probes,
        )
        _write_csv(
            out,
            "top_eigenvalue,trace_estimate,probes_used,power_iters,residual",
            [(repr(rep.top_eigenvalue), repr(rep.trace_estimate),
              rep.probes_used, rep.power_iters, repr(rep.residual))],
        )
        print(
            f"top eigenvalue {rep.top_eigenvalue:.6g}, trace {rep.trace_estimate:.6g} "
            f"({rep.probes_used} probes, residual {rep.residual:.2e}); wrote {out}"
        )
    elif args.which == "bound-check":
        tokens, targets = _curvature_batch(ckpt)
        _, cache, probes = forward(ckpt.cfg, ckpt.params, tokens)
        rows = []
        ok = True
        for probe in probes:
            i = probe.layer_index
            if ckpt.cfg.qk_norm:
                # unit-variance rows bound the logit by sqrt(d_head) directly
                bound = math.sqrt(ckpt.cfg.d_head)
                m_q = m_k = c_x = float("nan")
            else:
                m_q = max_norm(ckpt.params[f"layer{i}.attn.wq"])
                m_k = max_norm(ckpt.params[f"layer{i}.attn.wk"])
                c_x = float(np.abs(cache["layers"][i]["xh1"]).sum(axis=-1).max())
                bound = diag.logit_upper_bound(m_q, m_k, c_x, ckpt.cfg.d_head)
            ok = ok and probe.max_logit <= bound
            rows.append((i, repr(probe.max_logit), repr(bound), repr(m_q), repr(m_k), repr(c_x)))
        _write_csv(out, "layer,max_logit,bound,m_q,m_k,c_x", rows)
        print(("all layers within bound" if ok else "BOUND VIOLATED") + f"; wrote {out}")
        if not ok:
            return 1
    return 0


def _cmd_lr_sweep(args) -> int:
    cfg = harness.parse_config(args.config)
    try:
        lrs = [float(x) for x in args.lrs.split(",") if x.strip()]
    except ValueError as exc:
        raise harness.ConfigError(f"--lrs must be comma-separated numbers: {exc}") from exc
    if not lrs:
        raise harness.ConfigError("--lrs must name at least one learning rate")
    rows = diag.lr_logit_sweep(
        cfg.model, lrs, args.steps, cfg.optimizer, seed=cfg.seed,
        batch_size=cfg.batch_size_sequences, hp=cfg.hp,
    )
    out = Path(args.out or "lr-sweep.csv")
    csv_rows = []
    for row in rows:
        for layer, peak in enumerate(row.peak_mal):
            csv_rows.append((repr(row.lr), layer, repr(peak), repr(row.final_loss),
                             str(row.diverged).lower()))
    _write_csv(out, "lr,layer,peak_mal,final_loss,diverged", csv_rows)
    for row in rows:
        flag = " [diverged]" if row.diverged else ""
        print(f"lr {row.lr:g}: peak MAL {max(row.peak_mal):.4f}{flag}")
    print(f"wrote {out}")
    return 0


def _cmd_export_plots(args) -> int:
    out_dir = Path(args.out)
    loss_rows, mal_rows, clip_rows, bound_rows = [], [], [], []
    seen: list[str] = []
    for path in args.metrics:
        rid = Path(path).resolve().parent.name or Path(path).stem
        n = sum(1 for s in seen if s == rid or s.startswith(rid + "#"))
        seen.append(rid if n == 0 else f"{rid}#{n + 1}")
        rid = seen[-1]
        for rec in harness.parse_metrics(path):
            if rec.get("diverged"):
                continue
            loss_rows.append((rid, rec["step"], repr(rec["train_loss"]),
                              "" if rec["val_loss"] is None else repr(rec["val_loss"])))
            for layer, mal in enumerate(rec["per_layer_max_logit"]):
                mal_rows.append((rid, rec["step"], layer, repr(mal)))
            clip_rows.append((rid, rec["step"], repr(rec["clip_fraction"])))
            bound_rows.append((rid, rec["step"], repr(rec["bound_fraction"])))
    _write_csv(out_dir / "loss.csv", "run_id,step,train_loss,val_loss", loss_rows)
    _write_csv(out_dir / "mal.csv", "run_id,step,layer,max_logit", mal_rows)
    _write_csv(out_dir / "clip_ratio.csv", "run_id,step,clip_fraction", clip_rows)
    _write_csv(out_dir / "bound_ratio.csv", "run_id,step,bound_fraction", bound_rows)
    print(f"wrote loss.csv, mal.csv, clip_ratio.csv, bound_ratio.csv to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merit",
        description="Train and diagnose small transformers under trust-ratio optimizers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--keep-synthetic-seed", action="store_true",
                   help="keep the config's synthetic data seed when overriding --seed")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("compare", help="train several configs on shared data")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out", default=None, help="comparison CSV path")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("evaluate", help="loss of a checkpoint on a data split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True, help="config naming the data source")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("diagnose", help="checkpoint analyses as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--which", required=True,
                   choices=("norm-gap", "similarity", "curvature", "bound-check"))
    p.add_argument("--out", default=None)
    p.add_argument("--probes", type=int, default=100)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_diagnose)

    p = sub.add_parser("lr-sweep", help="peak attention logits across learning rates")
    p.add_argument("--config", required=True)
    p.add_argument("--lrs", required=True, help="comma-separated learning rates")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_lr_sweep)

    p = sub.add_parser("export-plots", help="tidy per-figure CSVs from metrics files")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_plots)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code 1
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except (harness.ConfigError, harness.CheckpointFormatError,
            harness.MetricsFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
