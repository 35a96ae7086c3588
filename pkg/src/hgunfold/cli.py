"""Command line entry point.

Subcommands: ``synth`` (dataset generation), ``train``, ``eval``, ``trace``
(energy/accuracy versus propagation depth), ``exact`` (closed-form reference
solve), ``gradcheck`` (gradient verification), and ``bound`` (step-size
bound report). Report paths write machine-readable CSV/JSON plus rendered
PNG figures. Exit codes: 0 success, 1 configuration or data error,
2 numeric runtime failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .diff import grad_check
from .energy import EnergyConfig, ParamSet, base_embed, energy_value, exact_solution
from .hetgraph import DatasetError, HeteroGraph, load_graph
from .linalg import SingularSystemError, SizeCapError
from .synth import PRESETS, SynthConfigError, config_from_dict, generate, preset_config
from .training import (
    TrainConfig,
    _accuracy,
    evaluate,
    init_params,
    load_params,
    save_params,
    train,
)
from .unfolding import (
    NonConvergenceError,
    NonFiniteError,
    UnfoldConfig,
    step_bound_report,
    unfold,
    unfold_step,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_VERIFY = 3


class ConfigError(ValueError):
    pass


CONFIG_DEFAULTS: dict = {
    "hidden": 32,
    "learning_rate": 1e-2,
    "weight_decay": 1e-4,
    "epochs": 100,
    "optimizer": "adam",
    "seed": 0,
    "dropout_rate": 0.0,
    "patience": 0,
    "unfold_steps": 16,
    "lambda": 1.0,
    "alpha": "auto",
    "prox": True,
    "fixed_identity_h": False,
    "identity_readout": False,
    "mlp_base": False,
}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})")
    unknown = set(raw) - set(CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"{p}: unknown config keys {sorted(unknown)}")
    return raw


def _merged_config(args: argparse.Namespace) -> dict:
    cfg = dict(CONFIG_DEFAULTS)
    cfg.update(_read_config_file(getattr(args, "config", None)))
    overrides = {
        "hidden": getattr(args, "hidden", None),
        "learning_rate": getattr(args, "lr", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "epochs": getattr(args, "epochs", None),
        "optimizer": getattr(args, "optimizer", None),
        "seed": getattr(args, "seed", None),
        "dropout_rate": getattr(args, "dropout", None),
        "patience": getattr(args, "patience", None),
        "unfold_steps": getattr(args, "k", None),
        "lambda": getattr(args, "lam", None),
        "alpha": getattr(args, "alpha", None),
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    if getattr(args, "no_prox", False):
        cfg["prox"] = False
    if getattr(args, "fixed_identity_h", False):
        cfg["fixed_identity_h"] = True
    if getattr(args, "identity_readout", False):
        cfg["identity_readout"] = True
    if getattr(args, "mlp_base", False):
        cfg["mlp_base"] = True
    return cfg


def _parse_alpha(value) -> float | None:
    if value in (None, "auto"):
        return None
    try:
        alpha = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"alpha must be a number or 'auto', got {value!r}")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    return alpha


def _unfold_config(cfg: dict, steps: int | None = None) -> UnfoldConfig:
    try:
        return UnfoldConfig(
            alpha=_parse_alpha(cfg["alpha"]),
            steps=int(cfg["unfold_steps"] if steps is None else steps),
            lam=float(cfg["lambda"]),
            prox=bool(cfg["prox"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=int(cfg["epochs"]),
            optimizer=str(cfg["optimizer"]),
            learning_rate=float(cfg["learning_rate"]),
            weight_decay=float(cfg["weight_decay"]),
            seed=int(cfg["seed"]),
            dropout_rate=float(cfg["dropout_rate"]),
            patience=int(cfg["patience"]),
            hidden=int(cfg["hidden"]),
            fixed_identity_h=bool(cfg["fixed_identity_h"]),
            identity_readout=bool(cfg["identity_readout"]),
            mlp_base=bool(cfg["mlp_base"]),
            unfold=_unfold_config(cfg),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def _prepare_params(graph: HeteroGraph, cfg: dict, params_path: str | None) -> ParamSet:
    if params_path is not None:
        return load_params(params_path)
    rng = np.random.default_rng(int(cfg["seed"]))
    return init_params(
        graph,
        int(cfg["hidden"]),
        rng,
        fixed_identity_h=bool(cfg["fixed_identity_h"]),
        identity_readout=bool(cfg["identity_readout"]),
        mlp_base=bool(cfg["mlp_base"]),
    )


def _resolve_alpha_with_warning(graph, params, cfg: dict) -> tuple[float, dict]:
    report = step_bound_report(graph, params, float(cfg["lambda"]))
    alpha = _parse_alpha(cfg["alpha"])
    if alpha is None:
        alpha = 0.99 * report.bound
    elif alpha >= report.bound:
        print(
            f"warning: configured alpha {alpha:g} exceeds the step bound "
            f"{report.bound:.6g}; the energy trace may not be monotone",
            file=sys.stderr,
        )
    return alpha, report.as_dict()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args: argparse.Namespace) -> int:
    graph = load_graph(args.data)
    cfg = _merged_config(args)
    tcfg = _train_config(cfg)
    params, metrics, history, run_info = train(graph, tcfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,loss,train_acc,val_acc,energy"]
    for r in history:
        lines.append(
            f"{r.epoch},{_fmt(r.loss)},{_fmt(r.train_acc)},{_fmt(r.val_acc)},{_fmt(r.energy)}"
        )
    (out / "history.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "metrics.json", metrics.as_dict())
    save_params(params, out / "params.bin")
    _write_json(
        out / "run_meta.json",
        {
            "config": cfg,
            "seed": tcfg.seed,
            "ablations": {
                "fixed_identity_h": tcfg.fixed_identity_h,
                "prox": tcfg.unfold.prox,
                "identity_readout": tcfg.identity_readout,
            },
            **run_info,
        },
    )
    if run_info.get("alpha_exceeds_bound"):
        print(
            "warning: configured alpha exceeds the step bound; the inner "
            "iteration is not covered by the monotone convergence guarantee",
            file=sys.stderr,
        )
    from . import figures

    figures.render_history(history, out / "history.png")
    print(f"run written to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    graph = load_graph(args.data)
    cfg = _merged_config(args)
    params = load_params(args.params)
    ucfg = _unfold_config(cfg)
    requested = ["train", "val", "test"] if args.split == "all" else [args.split]
    splits_payload = {}
    for split in requested:
        try:
            metrics = evaluate(graph, params, ucfg, split)
        except ValueError:
            continue
        sm = metrics.splits[split]
        splits_payload[split] = {"per_type": sm.per_type, "overall": sm.overall}
    if not splits_payload:
        raise ConfigError(f"no labeled nodes in requested split(s) {requested}")
    payload = {"splits": splits_payload}
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", payload)
    return EXIT_OK


def _trace_accuracy(graph, params, y, split) -> float:
    try:
        _, overall = _accuracy(graph, params, y, split)
        return overall
    except ValueError:
        return float("nan")


def cmd_trace(args: argparse.Namespace) -> int:
    graph = load_graph(args.data)
    cfg = _merged_config(args)
    params = _prepare_params(graph, cfg, args.params)
    alpha, bound_info = _resolve_alpha_with_warning(graph, params, cfg)
    k_max = int(args.k_max if args.k_max is not None else cfg["unfold_steps"])
    prox = bool(cfg["prox"])
    lam = float(cfg["lambda"])
    step_cfg = UnfoldConfig(alpha=alpha, steps=1, lam=lam, prox=prox)
    ecfg = EnergyConfig(lam=lam)

    base = base_embed(graph, params)
    y = dict(base)
    rows = [
        {
            "step": 0,
            "energy": energy_value(graph, params, y, ecfg, base=base),
            "train_acc": _trace_accuracy(graph, params, y, "train"),
            "val_acc": _trace_accuracy(graph, params, y, "val"),
        }
    ]
    for k in range(1, k_max + 1):
        y_bar = unfold_step(graph, params, y, step_cfg, base=base)
        y = {s: np.maximum(v, 0.0) for s, v in y_bar.items()} if prox else y_bar
        rows.append(
            {
                "step": k,
                "energy": energy_value(graph, params, y, ecfg, base=base),
                "train_acc": _trace_accuracy(graph, params, y, "train"),
                "val_acc": _trace_accuracy(graph, params, y, "val"),
            }
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["step,energy,train_acc,val_acc"]
    for r in rows:
        lines.append(
            f"{r['step']},{_fmt(r['energy'])},{_fmt(r['train_acc'])},{_fmt(r['val_acc'])}"
        )
    (out / "trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_json(out / "trace_meta.json", {"alpha": alpha, "prox": prox, "step_bound": bound_info})
    from . import figures

    figures.render_trace(rows, out / "trace.png")
    print(f"trace written to {out}")
    return EXIT_OK


def cmd_exact(args: argparse.Namespace) -> int:
    graph = load_graph(args.data)
    cfg = _merged_config(args)
    params = _prepare_params(graph, cfg, args.params)
    lam = float(cfg["lambda"])
    ecfg = EnergyConfig(lam=lam)
    y_star = exact_solution(graph, params, ecfg)
    energy_star = energy_value(graph, params, y_star, ecfg)

    alpha, bound_info = _resolve_alpha_with_warning(graph, params, cfg)
    steps = int(args.k if args.k is not None else 500)
    # the gap is measured against the unconstrained minimizer, so prox is off
    result = unfold(
        graph, params, UnfoldConfig(alpha=alpha, steps=steps, lam=lam, prox=False)
    )
    num = 0.0
    den = 0.0
    for s, v in y_star.items():
        diff = result.y_final[s] - v
        num += float(np.sum(diff * diff))
        den += float(np.sum(v * v))
    gap = float(np.sqrt(num) / max(np.sqrt(den), 1e-300))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, v in y_star.items():
        lines = ["\t".join(_fmt(x) for x in row) for row in v]
        (out / f"exact.{s}.tsv").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
        )
    _write_json(
        out / "exact_summary.json",
        {
            "energy": energy_star,
            "relative_gap": gap,
            "steps": steps,
            "alpha": alpha,
            "lambda": lam,
            "step_bound": bound_info,
        },
    )
    print(f"relative gap after {steps} steps: {_fmt(gap)}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    graph = load_graph(args.data)
    cfg = _merged_config(args)
    params = _prepare_params(graph, cfg, args.params)
    ucfg = _unfold_config(cfg)
    report = grad_check(
        graph,
        params,
        ucfg,
        n_probes=args.probes,
        fd_step=args.fd_step,
        seed=int(cfg["seed"]),
    )
    payload = report.as_dict()
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", payload)
    if report.worst_overall > args.threshold:
        print(
            f"gradient check failed: worst relative error {report.worst_overall:.3e} "
            f"exceeds threshold {args.threshold:.3e}",
            file=sys.stderr,
        )
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    if args.preset and args.synth_config:
        raise ConfigError("--preset and --synth-config are mutually exclusive")
    if args.preset:
        cfg = preset_config(
            args.preset, seed=args.seed or 0, paper_classes=args.paper_classes
        )
    elif args.synth_config:
        raw = json.loads(Path(args.synth_config).read_text(encoding="utf-8"))
        cfg = config_from_dict(raw)
        if args.seed is not None:
            cfg.seed = args.seed
    else:
        raise ConfigError("one of --preset or --synth-config is required")
    out = generate(cfg, args.out)
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    graph = load_graph(args.data)
    cfg = _merged_config(args)
    params = _prepare_params(graph, cfg, args.params)
    report = step_bound_report(graph, params, float(cfg["lambda"]))
    payload = report.as_dict()
    payload["auto_alpha"] = 0.99 * report.bound
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "bound.json", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through the config exit code
        raise ConfigError(message)


def _add_model_args(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON config file with full-key names")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--hidden", type=int, default=None)
    sp.add_argument("--k", type=int, default=None, help="number of unfolding steps")
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp.add_argument("--alpha", default=None, help="step size, or 'auto'")
    sp.add_argument("--no-prox", action="store_true", help="disable the proximal (relu) step")
    sp.add_argument(
        "--fixed-identity-H",
        dest="fixed_identity_h",
        action="store_true",
        help="freeze all compatibility matrices to the identity",
    )
    sp.add_argument("--identity-readout", action="store_true")
    sp.add_argument("--mlp-base", action="store_true", help="two-layer base transform")


def _build_parser() -> _Parser:
    parser = _Parser(prog="hgunfold", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_args(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--out", default=None)
    _add_model_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="energy/accuracy versus propagation steps")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--k-max", type=int, default=None)
    _add_model_args(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("exact", help="closed-form solve and gap to the unfolded iterate")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--k", type=int, default=None)
    _add_model_args(p)
    p.set_defaults(func=cmd_exact)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--probes", type=int, default=12)
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    _add_model_args(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=list(PRESETS), default=None)
    p.add_argument("--synth-config", default=None, help="JSON generator config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--paper-classes", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bound", help="report the step-size bound")
    p.add_argument("--data", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--out", default=None)
    _add_model_args(p)
    p.set_defaults(func=cmd_bound)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (NonFiniteError, SingularSystemError, NonConvergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ConfigError, SynthConfigError, SizeCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
