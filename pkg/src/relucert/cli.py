"""Command-line entry point: data generation, training, certification,
attacks, geometry curves and combined evaluation reports.

All randomness of one invocation flows from a single seed; with
--deterministic set, reports are byte-identical across runs on the same
inputs (the wall-clock runtime field is omitted).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import attacks, certify, datasets, geometry, mmr_train, net_core

__all__ = ["derive_eps2", "run_evaluation", "Report", "main"]


def derive_eps2(eps1: float, eps_inf: float) -> float:
    """The l2 radius certified by joint l1/linf margins eps1 and eps_inf.

    Exact convex-hull value, of which sqrt(eps1*eps_inf) is the familiar
    approximation.  Requires eps1 > eps_inf > 0.
    """
    if not (eps1 > eps_inf > 0):
        raise ValueError(f"need eps1 > eps_inf > 0, got {eps1}, {eps_inf}")
    return geometry.hull_min_norm(eps1, eps_inf, 2.0)


@dataclass
class Report:
    """Evaluation summary; validated so that every LB is <= its UB."""

    model_id: str
    eps: dict
    test_error: float
    per_norm: dict
    union: dict
    seeds: dict
    config: dict
    runtime_seconds: float | None = None

    def validate(self):
        for name, pair in list(self.per_norm.items()) + [("union", self.union)]:
            if pair["lb"] > pair["ub"] + 1e-12:
                raise ValueError(
                    f"report invariant violated: {name} LB {pair['lb']} > UB {pair['ub']}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _threads_from_env() -> int:
    try:
        return max(1, int(os.environ.get("RELUCERT_THREADS", "1")))
    except ValueError:
        return 1


def _per_point_certs(net, X, y, threads=1):
    """(certificates, single-norm l2 bounds) for every point."""
    def one(i):
        pc = certify.point_certificate(net, X[i], int(y[i]))
        s2 = certify.certify_single_norm(net, X[i], int(y[i]), 2.0)
        return pc, s2

    out = certify._map_points(one, len(X), threads)
    return [p for p, _ in out], np.array([s for _, s in out])


def run_evaluation(model_path, data_path, eps, seed: int = 0, limit: int = 1000,
                   deterministic: bool = False, iterations: int = 100,
                   restarts: int = 10, threads: int = 1) -> Report:
    """Test error on the full dataset plus robust-error bounds per norm and
    for the union, evaluating the bounds on the first min(limit, n) points."""
    t0 = time.perf_counter()
    eps = certify.EpsTriple(*eps)
    net = net_core.load_model(model_path)
    data = datasets.load_dataset(data_path)
    test_error = float(np.mean(net_core.classify_batch(net, data.features) != data.labels))

    sub = data.head(limit)
    X, y = sub.features, sub.labels
    certs, single2 = _per_point_certs(net, X, y, threads)
    correct = np.array([pc.correct for pc in certs])
    lb1 = np.array([pc.lb_l1 for pc in certs])
    lb2u = np.array([pc.lb_l2 for pc in certs])
    lbinf = np.array([pc.lb_linf for pc in certs])
    lb2 = np.maximum(lb2u, single2)

    ub = {
        "l1": float(np.mean(~(correct & (lb1 >= eps.eps1)))),
        "l2": float(np.mean(~(correct & (lb2 >= eps.eps2)))),
        "linf": float(np.mean(~(correct & (lbinf >= eps.eps_inf)))),
    }
    ub_union = 1.0 - float(np.mean(certify.robust_mask(certs, eps)))

    misclassified = net_core.classify_batch(net, X) != y
    successes = attacks.per_norm_successes(net, sub, eps, iterations=iterations,
                                           restarts=restarts, seed=seed)
    lb = {name: float(np.mean(misclassified | s)) for name, s in successes.items()}
    union_bad = misclassified.copy()
    for s in successes.values():
        union_bad |= s
    lb_union = float(np.mean(union_bad))

    report = Report(
        model_id=os.path.basename(str(model_path)),
        eps={"eps1": eps.eps1, "eps2": eps.eps2, "eps_inf": eps.eps_inf},
        test_error=test_error,
        per_norm={n: {"lb": lb[n], "ub": ub[n]} for n in ("l1", "l2", "linf")},
        union={"lb": lb_union, "ub": ub_union},
        seeds={"seed": seed},
        config={"limit": int(limit), "iterations": iterations, "restarts": restarts,
                "points_evaluated": int(len(X)), "deterministic": bool(deterministic)},
        runtime_seconds=None if deterministic else time.perf_counter() - t0,
    )
    report.validate()
    return report


# -- subcommands ----------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    if args.kind == "blobs":
        ds = datasets.gen_blobs(args.n, seed=args.seed, std=args.std)
    elif args.kind == "moons":
        ds = datasets.gen_moons(args.n, seed=args.seed, noise=args.std)
    elif args.kind == "corners":
        ds = datasets.gen_corners(args.n, seed=args.seed, dim=args.dim,
                                  num_classes=args.classes, spread=args.std)
    else:
        raise ValueError(f"unknown dataset kind {args.kind!r}")
    datasets.save_dataset(ds, args.out, fmt=args.format)
    print(json.dumps({"kind": args.kind, "count": ds.count, "d": ds.dim,
                      "K": ds.num_classes, "out": args.out}))
    return 0


def _cmd_train(args) -> int:
    data = datasets.load_dataset(args.data)
    eval_data = datasets.load_dataset(args.eval_data) if args.eval_data else None
    hidden = [int(s) for s in args.arch.split(",") if s.strip()]
    sizes = [data.dim] + hidden + [data.num_classes]
    net0 = net_core.random_net(sizes, seed=args.seed)
    mmr_cfg = mmr_train.MmrUniversalConfig(
        lambda1=args.lambda1, lambda_inf=args.lambdainf,
        gamma1=args.gamma1, gamma_inf=args.gammainf)
    train_cfg = mmr_train.TrainConfig(
        epochs=args.epochs, batch_size=args.batch,
        learning_rate=args.lr, seed=args.seed)
    net, history = mmr_train.train(net0, data, mmr_cfg, train_cfg,
                                   eval_dataset=eval_data)
    net_core.save_model(net, args.out)
    if args.history:
        cols = list(history[0].keys())
        with open(args.history, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for row in history:
                fh.write(",".join(repr(row[c]) for c in cols) + "\n")
    print(json.dumps({"out": args.out, "epochs": args.epochs,
                      "final_loss": history[-1]["loss"],
                      "final_test_error": history[-1]["test_error"]}))
    return 0


def _cmd_certify(args) -> int:
    net = net_core.load_model(args.model)
    data = datasets.load_dataset(args.data)
    if args.limit:
        data = data.head(args.limit)
    X, y = data.features, data.labels
    eps = certify.EpsTriple(args.eps1, args.eps2, args.epsinf)
    threads = _threads_from_env()
    certs, single2 = _per_point_certs(net, X, y, threads)
    correct = np.array([pc.correct for pc in certs])
    lb1 = np.array([pc.lb_l1 for pc in certs])
    lb2u = np.array([pc.lb_l2 for pc in certs])
    lbinf = np.array([pc.lb_linf for pc in certs])
    lb2 = np.maximum(lb2u, single2)
    summary = {
        "test_error": float(np.mean(~correct)),
        "ub_l1": float(np.mean(~(correct & (lb1 >= eps.eps1)))),
        "ub_l2": float(np.mean(~(correct & (lb2 >= eps.eps2)))),
        "ub_linf": float(np.mean(~(correct & (lbinf >= eps.eps_inf)))),
        "ub_union": float(np.mean(~(correct & (lb1 >= eps.eps1)
                                    & (lb2u >= eps.eps2) & (lbinf >= eps.eps_inf)))),
    }
    if args.per_point_csv:
        with open(args.per_point_csv, "w", encoding="utf-8") as fh:
            fh.write("index,label,predicted,correct,rho1,rho_inf,lb_l1,lb_l2,lb_linf\n")
            for i, pc in enumerate(certs):
                fh.write(f"{i},{pc.label},{pc.predicted},{int(pc.correct)},"
                         f"{pc.rho1!r},{pc.rho_inf!r},{pc.lb_l1!r},{pc.lb_l2!r},"
                         f"{pc.lb_linf!r}\n")
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def _cmd_attack(args) -> int:
    net = net_core.load_model(args.model)
    data = datasets.load_dataset(args.data)
    if args.limit:
        data = data.head(args.limit)
    norms = {"l1": (1.0, args.eps1), "l2": (2.0, args.eps2),
             "linf": (math.inf, args.epsinf)}
    wanted = list(norms) if args.norm == "all" else [args.norm]
    results = {}
    summary = {}
    misclassified = net_core.classify_batch(net, data.features) != data.labels
    union_bad = misclassified.copy()
    for i, name in enumerate(wanted):
        p, eps = norms[name]
        if eps is None:
            raise ValueError(f"--{'epsinf' if name == 'linf' else 'eps' + name[1:]} "
                             f"is required for norm {name}")
        cfg = attacks.PgdConfig(p=p, eps=eps, iterations=args.iters,
                                restarts=args.restarts, seed=args.seed + 10 * i,
                                sparsity_frac=args.sparsity)
        success, norms_found, _ = attacks.attack_dataset(net, data, cfg)
        results[name] = (success, norms_found)
        union_bad |= success
        summary[name] = {"eps": eps, "success_rate": float(np.mean(success))}
    summary["test_error"] = float(np.mean(misclassified))
    if args.norm == "all":
        summary["lb_union"] = float(np.mean(union_bad))
        summary["overlap"] = {
            f"{pn}_in_{qn}": v["pct"]
            for (pn, qn), v in attacks.overlap_stats(
                net, data, args.eps1, args.eps2, args.epsinf,
                iterations=args.iters, restarts=args.restarts,
                seed=args.seed, sparsity_frac=args.sparsity).items()
        }
    if args.per_point_csv:
        with open(args.per_point_csv, "w", encoding="utf-8") as fh:
            header = ["index"] + [f"success_{n},norm_{n}" for n in wanted]
            fh.write(",".join(header) + "\n")
            for i in range(data.count):
                cells = [str(i)]
                for n in wanted:
                    s, nv = results[n]
                    cells.append(f"{int(s[i])},{float(nv[i])!r}")
                fh.write(",".join(cells) + "\n")
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def _cmd_geometry(args) -> int:
    table = geometry.curve_table(args.d, p=args.p, num=args.num)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("delta,naive,union,hull,ratio\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    delta_star, max_ratio, _ = geometry.ratio_analysis(args.d, p=args.p)
    print(json.dumps({"d": args.d, "p": args.p, "delta_star": delta_star,
                      "max_ratio": max_ratio, "out": args.out}, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    eps2 = args.eps2 if args.eps2 is not None else derive_eps2(args.eps1, args.epsinf)
    threads = 1 if args.deterministic else _threads_from_env()
    report = run_evaluation(
        args.model, args.data, (args.eps1, eps2, args.epsinf),
        seed=args.seed, limit=args.limit, deterministic=args.deterministic,
        iterations=args.iters, restarts=args.restarts, threads=threads)
    text = report.to_json()
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("model,test_error,lb_l1,ub_l1,lb_l2,ub_l2,lb_linf,ub_linf,"
                     "lb_union,ub_union\n")
            pn = report.per_norm
            fh.write(",".join([report.model_id, repr(report.test_error)]
                              + [repr(pn[n][k]) for n in ("l1", "l2", "linf")
                                 for k in ("lb", "ub")]
                              + [repr(report.union["lb"]), repr(report.union["ub"])])
                     + "\n")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relucert",
        description="Train small ReLU classifiers with joint l1/linf margin "
                    "regularization and certify their robustness for every lp-norm.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--kind", choices=["blobs", "moons", "corners"], default="blobs")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--std", type=float, default=0.05,
                   help="blob std / moon noise / corner spread")
    g.add_argument("--dim", type=int, default=16, help="corners only")
    g.add_argument("--classes", type=int, default=2, help="corners only")
    g.add_argument("--format", choices=["bin", "csv"], default="bin")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data", default=None)
    t.add_argument("--arch", default="64", help="comma separated hidden sizes")
    t.add_argument("--lambda1", type=float, default=1.0)
    t.add_argument("--lambdainf", type=float, default=6.0)
    t.add_argument("--gamma1", type=float, default=1.0)
    t.add_argument("--gammainf", type=float, default=0.1)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model JSON path")
    t.add_argument("--history", default=None, help="per-epoch CSV path")
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("certify", help="certified robust-error upper bounds")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--eps1", type=float, required=True)
    c.add_argument("--eps2", type=float, required=True)
    c.add_argument("--epsinf", type=float, required=True)
    c.add_argument("--limit", type=int, default=None)
    c.add_argument("--per-point-csv", default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=_cmd_certify)

    a = sub.add_parser("attack", help="PGD lower bounds on the robust error")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--norm", choices=["l1", "l2", "linf", "all"], default="all")
    a.add_argument("--eps1", type=float, default=None)
    a.add_argument("--eps2", type=float, default=None)
    a.add_argument("--epsinf", type=float, default=None)
    a.add_argument("--iters", type=int, default=100)
    a.add_argument("--restarts", type=int, default=10)
    a.add_argument("--sparsity", type=float, default=0.01)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--limit", type=int, default=None)
    a.add_argument("--per-point-csv", default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(func=_cmd_attack)

    ge = sub.add_parser("geometry", help="union/hull bound curves as CSV")
    ge.add_argument("--d", type=int, required=True)
    ge.add_argument("--p", type=float, default=2.0)
    ge.add_argument("--num", type=int, default=2048)
    ge.add_argument("--out", required=True)
    ge.set_defaults(func=_cmd_geometry)

    r = sub.add_parser("report", help="full evaluation: test error, LB and UB")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--eps1", type=float, required=True)
    r.add_argument("--eps2", type=float, default=None,
                   help="defaults to the value implied by eps1 and epsinf")
    r.add_argument("--epsinf", type=float, required=True)
    r.add_argument("--iters", type=int, default=100)
    r.add_argument("--restarts", type=int, default=10)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--limit", type=int, default=1000)
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--out", default=None)
    r.add_argument("--csv", default=None)
    r.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, mmr_train.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
