"""Command-line entry point.

    bmlr train     --config cfg.json [--seed 1 --method bmlr --alpha 1 --beta 0.2 ...]
    bmlr compare   --config cfg.json
    bmlr sweep     --config cfg.json
    bmlr gradcheck [--seed 0] [--n-seeds 1]

Configuration is a flat JSON object; command-line flags override it, and
both override the built-in defaults. Exit codes: 0 success, 1 invalid
configuration, 2 run aborted or failed.
"""

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics, plotting
from .gradcheck import TOLERANCE, run_gradcheck
from .model import FUSIONS
from .reshaper import EPS_BETA, EPS_DIV, ReshapeConfig
from .trainer import METHODS, TrainConfig, TrainingAborted, train

log = logging.getLogger("bmlr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
PREFIX = "BMLR|"

DATA_KEYS = ("n_classes", "samples_per_class", "dims", "separations",
             "exclusive_fraction", "label_noise", "data_seed")

DEFAULTS = {
    # dataset: either data_path, or the generation keys
    "data_path": None,
    "n_classes": 6,
    "samples_per_class": 110,
    "dims": [16, 16],
    "separations": [2.5, 1.0],
    "exclusive_fraction": 0.2,
    "label_noise": 0.0,
    "data_seed": None,          # None -> follow the run seed
    # training
    "method": "bmlr",
    "fusion": "concat",
    "epochs": 40,
    "batch_size": 64,
    "lr": 5e-4,
    "seed": 0,
    "hidden": [64, 32],
    "alpha": 1.0,
    "beta": 0.2,
    "eps_beta": EPS_BETA,
    "eps_div": EPS_DIV,
    "unimodal_weights": None,
    "smoothing": 0.1,
    # outputs
    "out": "runs/default",
    "plots": True,
    "dump_reshape": False,
    "topk": 3,
    # compare / sweep
    "methods": ["baseline", "bmlr"],
    "seeds": [1, 2, 3],
    "sweep_alpha": None,
    "sweep_beta": None,
    "sweep_grid": None,
}


class ConfigError(ValueError):
    pass


def load_config(path=None, overrides=None):
    """Merge defaults <- JSON file <- overrides and validate the result."""
    cfg = dict(DEFAULTS)
    given = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            given = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(given, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
        unknown = sorted(set(given) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"{p}: unknown keys {unknown}")
        cfg.update(given)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
            given[k] = v
    if cfg["data_path"] is not None:
        clash = [k for k in DATA_KEYS if k in given]
        if clash:
            raise ConfigError(f"data_path given together with generation keys {clash}; "
                              "choose exactly one dataset source")
        for k in DATA_KEYS:
            cfg.pop(k)
    validate(cfg)
    return cfg


def _field(cfg, key, check, msg):
    try:
        ok = check(cfg[key])
    except (TypeError, ValueError):
        ok = False
    if not ok:
        raise ConfigError(f"{key}: {msg} (got {cfg[key]!r})")


def validate(cfg):
    _field(cfg, "method", lambda v: v in METHODS, f"must be one of {list(METHODS)}")
    _field(cfg, "fusion", lambda v: v in FUSIONS, f"must be one of {list(FUSIONS)}")
    _field(cfg, "epochs", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    _field(cfg, "batch_size", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    _field(cfg, "lr", lambda v: float(v) > 0, "must be > 0")
    _field(cfg, "seed", lambda v: isinstance(v, int), "must be an integer")
    _field(cfg, "alpha", lambda v: float(v) > 0, "must be > 0")
    _field(cfg, "beta", lambda v: 0 <= float(v) <= 1, "must be in [0, 1]")
    _field(cfg, "smoothing", lambda v: 0 <= float(v) < 1, "must be in [0, 1)")
    _field(cfg, "hidden", lambda v: len(v) >= 1 and all(int(h) >= 1 for h in v),
           "must be a non-empty list of positive widths")
    _field(cfg, "methods", lambda v: isinstance(v, list) and len(v) >= 1
           and all(m in METHODS for m in v), f"must be a non-empty list drawn from {list(METHODS)}")
    _field(cfg, "seeds", lambda v: isinstance(v, list) and len(v) >= 1
           and all(isinstance(s, int) for s in v), "must be a non-empty list of integers")
    _field(cfg, "topk", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    if "dims" in cfg:
        _field(cfg, "dims", lambda v: len(v) >= 2, "must list at least two modalities")
        _field(cfg, "separations", lambda v: len(v) == len(cfg["dims"]),
               "must have one entry per modality")
    try:
        ReshapeConfig(float(cfg["alpha"]), float(cfg["beta"]),
                      float(cfg["eps_beta"]), float(cfg["eps_div"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg, **over):
    c = {**cfg, **over}
    w = c["unimodal_weights"]
    return TrainConfig(
        method=c["method"],
        fusion=c["fusion"],
        epochs=int(c["epochs"]),
        batch_size=int(c["batch_size"]),
        lr=float(c["lr"]),
        seed=int(c["seed"]),
        reshape=ReshapeConfig(float(c["alpha"]), float(c["beta"]),
                              float(c["eps_beta"]), float(c["eps_div"])),
        unimodal_weights=None if w is None else tuple(float(x) for x in w),
        smoothing=float(c["smoothing"]),
        hidden=tuple(int(h) for h in c["hidden"]),
    )


def build_dataset(cfg, seed):
    if cfg.get("data_path") is not None:
        return data_mod.load(cfg["data_path"])
    spec = data_mod.SyntheticSpec(
        n_classes=int(cfg["n_classes"]),
        samples_per_class=int(cfg["samples_per_class"]),
        dims=tuple(cfg["dims"]),
        separations=tuple(cfg["separations"]),
        exclusive_fraction=float(cfg["exclusive_fraction"]),
        label_noise=float(cfg["label_noise"]),
        seed=int(seed if cfg["data_seed"] is None else cfg["data_seed"]),
    )
    return data_mod.generate(spec)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunOutcome:
    record: object
    out: Path
    error: str | None = None


def run_one(cfg, out, **over):
    """Train once and write every per-run artifact into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg, **over, "out": str(out)}
    _write_json(out / "config.echo.json", resolved)
    tcfg = train_config(resolved)
    dataset = build_dataset(resolved, tcfg.seed)

    diag = None
    hook = None
    if resolved.get("dump_reshape"):
        diag = (out / "reshape_diagnostics.csv").open("w", newline="")
        writer = csv.writer(diag, lineterminator="\n")
        writer.writerow(["epoch", "sample", "modality", "lambda", "xi", "temperature", "active"])

        def dump(epoch, idx, rb):
            for i, sample in enumerate(idx):
                for u in range(rb.lam.shape[1]):
                    writer.writerow([epoch, int(sample), u, metrics.fmt6(rb.lam[i, u]),
                                     metrics.fmt6(rb.xi[i, u]), metrics.fmt6(rb.temperature[i, u]),
                                     int(rb.active[i, u])])
        hook = dump

    error = None
    try:
        record = train(tcfg, dataset, on_reshape=hook)
    except TrainingAborted as exc:
        record, error = exc.record, str(exc)
    finally:
        if diag is not None:
            diag.close()

    metrics.export(record.rows, out / "metrics.csv", "csv", n_modalities=len(dataset.dims))
    metrics.export(record.rows, out / "metrics.json", "json")
    summary = {
        "config": resolved,
        "seed": tcfg.seed,
        "wall_time_s": record.wall_time,
        "epochs_completed": len(record.rows),
        "aborted": error,
    }
    last = record.last
    if last is not None:
        summary["final"] = {
            "acc_fused": last.acc_fused,
            "acc_modality": last.acc_modality,
            "ratio_m0_over_m1": last.ratio,
            "reshape_counts": last.reshape_counts,
        }
    _write_json(out / "summary.json", summary)
    if error is None:
        record.model.save(out / "checkpoint.json")
        k = min(int(resolved["topk"]), dataset.n_classes)
        test = dataset.test()
        for u, p in enumerate(record.final.unimodal_probs):
            metrics.export_topk(metrics.topk_class_frequency(p, test.labels, k),
                                out / f"topk_m{u}.csv")
        if resolved.get("plots") and record.rows:
            plotting.plot_training_curves(record.rows, out / "curves.png",
                                          title=f"{tcfg.method} / {tcfg.fusion} / seed {tcfg.seed}")
    return RunOutcome(record, out, error)


def _summary_line(kind, outcome, **extra):
    last = outcome.record.last
    fields = [f"{k}={v}" for k, v in extra.items()]
    if last is not None:
        fields += [f"epoch={last.epoch}", f"acc={last.acc_fused:.4f}"]
        fields += [f"acc_m{u}={a:.4f}" for u, a in enumerate(last.acc_modality)]
        fields += [f"ratio={metrics.format_ratio(last.ratio)}"]
        fields += [f"reshaped={'/'.join(str(c) for c in last.reshape_counts)}"]
    if outcome.error:
        fields.append(f"aborted={outcome.error!r}")
    return PREFIX + kind + " " + " ".join(fields)


def cmd_train(args):
    overrides = {
        "seed": args.seed, "method": args.method, "fusion": args.fusion,
        "alpha": args.alpha, "beta": args.beta, "epochs": args.epochs,
        "batch_size": args.batch_size, "lr": args.lr, "out": args.out,
    }
    cfg = load_config(args.config, overrides)
    outcome = run_one(cfg, cfg["out"])
    print(_summary_line("train", outcome, method=cfg["method"], seed=cfg["seed"]))
    return EXIT_RUNTIME if outcome.error else EXIT_OK


def cmd_compare(args):
    cfg = load_config(args.config, {"out": args.out})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.echo.json", cfg)
    seeds = cfg["seeds"]
    table, failed = {}, False
    for method in cfg["methods"]:
        finals = []
        for seed in seeds:
            try:
                oc = run_one(cfg, out / "runs" / f"{method}_seed{seed}", method=method, seed=seed)
                err = oc.error
            except Exception as exc:  # one broken run must not stop the table
                log.exception("run %s seed %s failed", method, seed)
                oc, err = None, f"{type(exc).__name__}: {exc}"
            if oc is not None:
                print(_summary_line("run", oc, method=method, seed=seed))
            if err or oc is None or oc.record.last is None:
                failed = True
                finals.append(None)
            else:
                finals.append(oc.record.last)
        table[method] = finals

    M = next((len(r.acc_modality) for rows in table.values() for r in rows if r), 2)
    header = (["method"] + [f"acc_seed{s}" for s in seeds] + ["mean_acc_fused"]
              + [f"mean_acc_m{u}" for u in range(M)] + ["mean_ratio_m0_over_m1", "failed_runs"])
    summary = {}
    with (out / "compare.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for method, rows in table.items():
            ok = [r for r in rows if r is not None]
            fails = len(rows) - len(ok)
            if ok:
                acc = float(np.mean([r.acc_fused for r in ok]))
                acc_u = [float(np.mean([r.acc_modality[u] for r in ok])) for u in range(M)]
                ratios = [r.ratio for r in ok if r.ratio is not None]
                ratio = float(np.mean(ratios)) if ratios else None
                summary[method] = {"acc_fused": acc, "acc_modality": acc_u}
            else:
                acc, acc_u, ratio = None, [None] * M, None
            w.writerow([method] + [metrics.fmt6(r.acc_fused) if r else "failed" for r in rows]
                       + [metrics.fmt6(acc)] + [metrics.fmt6(a) for a in acc_u]
                       + [metrics.fmt6(ratio), fails])
            print(f"{PREFIX}compare method={method} mean_acc={metrics.fmt6(acc)} "
                  f"mean_ratio={metrics.format_ratio(ratio)} failed={fails}")
    if cfg["plots"] and summary:
        plotting.plot_comparison(summary, out / "compare.png")
    return EXIT_RUNTIME if failed else EXIT_OK


def sweep_points(cfg):
    """(alpha, beta) grid from the config, duplicates removed in order."""
    if cfg["sweep_grid"] is not None:
        raw = [(float(a), float(b)) for a, b in cfg["sweep_grid"]]
    elif cfg["sweep_alpha"] is not None and cfg["sweep_beta"] is not None:
        raw = [(float(a), float(b)) for a in cfg["sweep_alpha"] for b in cfg["sweep_beta"]]
    else:
        raise ConfigError("sweep needs sweep_grid, or both sweep_alpha and sweep_beta")
    if not raw:
        raise ConfigError("sweep grid is empty")
    seen, points = set(), []
    for p in raw:
        if p in seen:
            warnings.warn(f"duplicate sweep point alpha={p[0]:g} beta={p[1]:g} skipped",
                          stacklevel=2)
            continue
        seen.add(p)
        points.append(p)
    for a, b in points:
        if not a > 0 or not 0 <= b <= 1:
            raise ConfigError(f"sweep point alpha={a:g} beta={b:g} out of range")
    return points


def cmd_sweep(args):
    cfg = load_config(args.config, {"out": args.out})
    points = sweep_points(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.echo.json", cfg)
    results, failed = [], False
    for alpha, beta in points:
        tag = f"a{alpha:g}_b{beta:g}"
        try:
            oc = run_one(cfg, out / "runs" / tag, alpha=alpha, beta=beta)
            err = oc.error
        except Exception as exc:
            log.exception("sweep point %s failed", tag)
            oc, err = None, f"{type(exc).__name__}: {exc}"
        last = oc.record.last if oc is not None else None
        status = "ok" if err is None and last is not None else "failed"
        failed |= status != "ok"
        results.append({
            "alpha": alpha, "beta": beta, "beta_substituted": beta == 0,
            "acc_fused": last.acc_fused if last else None,
            "ratio": last.ratio if last else None, "status": status,
        })
        if oc is not None:
            print(_summary_line("sweep", oc, alpha=f"{alpha:g}", beta=f"{beta:g}"))
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "beta", "beta_substituted", "acc_fused", "ratio_m0_over_m1",
                    "status"])
        for r in results:
            w.writerow([metrics.fmt6(r["alpha"]), metrics.fmt6(r["beta"]),
                        int(r["beta_substituted"]), metrics.fmt6(r["acc_fused"]),
                        metrics.fmt6(r["ratio"]), r["status"]])
    ok = [r for r in results if r["status"] == "ok"]
    if cfg["plots"] and ok:
        plotting.plot_sweep(ok, out / "sweep.png")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gradcheck(args):
    worst_overall = None
    for seed in range(args.seed, args.seed + args.n_seeds):
        rep = run_gradcheck(seed)
        worst = rep.worst
        print(f"{PREFIX}gradcheck seed={seed} checks={len(rep.entries)} "
              f"max_rel_err={rep.max_error:.3e} worst={worst[0]}:{worst[1]}:{worst[2]}")
        if worst_overall is None or worst[3] > worst_overall[3]:
            worst_overall = worst
    if worst_overall[3] >= TOLERANCE:
        print(f"{PREFIX}gradcheck FAILED worst offender {worst_overall[0]} head={worst_overall[1]} "
              f"param={worst_overall[2]} rel_err={worst_overall[3]:.3e} >= {TOLERANCE:g}")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="bmlr", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--fusion", choices=FUSIONS)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    for name, func, text in (("compare", cmd_compare, "methods x seeds table"),
                             ("sweep", cmd_sweep, "alpha/beta grid")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-seeds", type=int, default=1)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{PREFIX}error {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DatasetFormatError, OSError) as exc:
        print(f"{PREFIX}error {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.exception("run aborted")
        print(f"{PREFIX}aborted {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
