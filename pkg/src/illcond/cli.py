"""Command-line harness: train, attack, evaluate, spectral, experiment, plot."""

import argparse
import os
import sys

import numpy as np

from . import attacks as ak
from . import harness as hz
from . import models as md
from . import spectral as sp
from .defense import HmcConfig, run_adaptive_attack

_DISTANCE_ALIASES = {"l2": "l2", "cos": "cosine", "cosine": "cosine",
                     "wass": "wasserstein", "wasserstein": "wasserstein"}


def _add_dataset_flags(p):
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or a directory of PGM images")
    p.add_argument("--count", type=int, default=200, help="synthetic sample count")
    p.add_argument("--side", type=int, default=16, help="image side length")


def _add_hmc_flags(p):
    p.add_argument("--defended", action="store_true",
                   help="attack/evaluate through the HMC defense")
    p.add_argument("--hmc-steps", type=int, default=5)
    p.add_argument("--hmc-eps", type=float, default=0.05)
    p.add_argument("--hmc-chain", type=int, default=10)
    p.add_argument("--hmc-noise", type=float, default=0.5)
    p.add_argument("--hmc-seed", type=int, default=0)


def _hmc_from_args(args):
    return HmcConfig(leapfrog_steps=args.hmc_steps, step_size=args.hmc_eps,
                     chain_length=args.hmc_chain, noise_scale=args.hmc_noise,
                     seed=args.hmc_seed)


def _add_attack_flags(p):
    p.add_argument("--strategy", default="oa",
                   choices=["oa", "la", "lgr", "grill", "grill-sum"])
    p.add_argument("--distance", default="l2", choices=sorted(_DISTANCE_ALIASES))
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--norm", default="inf", choices=["inf", "l2"])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--layer-fraction", type=float, default=1.0)
    p.add_argument("--weighting", default="equal",
                   choices=["equal", "random", "invkappa"])


def _attack_config(args):
    return ak.AttackConfig(
        strategy=args.strategy, distance=_DISTANCE_ALIASES[args.distance],
        eps=args.eps, norm=args.norm, steps=args.steps, step_size=args.lr,
        batch_size=args.batch, seed=args.seed,
        layer_fraction=args.layer_fraction, weighting=args.weighting)


def _load_dataset(args):
    if args.dataset == "synthetic":
        return hz.generate_synthetic_dataset(args.seed, args.count, args.side)
    return hz.load_image_dir(args.dataset, args.side)


def _parse_inject(text):
    parts = dict(p.split(":", 1) for p in text.split(","))
    return hz.InjectSpec(int(parts["layer"]), float(parts["floor"]), int(parts["count"]))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="illcond",
        description="attacks, conditioning diagnostics and an HMC defense "
                    "for desk-scale autoencoders")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a dataset and save it")
    p.add_argument("--out", default="model.illcond", help="model file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--widths", default="256,128,32,8,32,128,256")
    p.add_argument("--latent-index", type=int, default=3)
    p.add_argument("--activations", default=None,
                   help="comma list, e.g. tanh,tanh,identity,tanh,tanh,sigmoid")
    p.add_argument("--variational", action="store_true")
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--inject", action="append", default=[],
                   help="layer:I,floor:F,count:C (repeatable, applied after training)")
    _add_dataset_flags(p)

    p = sub.add_parser("attack", help="optimize a universal perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default="attack_out")
    p.add_argument("--seed", type=int, default=0)
    _add_attack_flags(p)
    _add_dataset_flags(p)
    _add_hmc_flags(p)

    p = sub.add_parser("evaluate", help="evaluate a saved perturbation")
    p.add_argument("--model", required=True)
    p.add_argument("--rho", required=True)
    p.add_argument("--out", default=None, help="directory for per_sample.csv")
    p.add_argument("--seed", type=int, default=0)
    _add_dataset_flags(p)
    _add_hmc_flags(p)

    p = sub.add_parser("spectral", help="per-layer singular value report")
    p.add_argument("--model", required=True)
    p.add_argument("--out", default=None, help="CSV path (stdout when absent)")

    p = sub.add_parser("experiment", help="run a full experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's out dir")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")

    p = sub.add_parser("plot", help="box plot from an experiment's outputs")
    p.add_argument("--out", required=True, help="experiment output directory")
    p.add_argument("--path", default=None, help="SVG destination")
    return parser


def cmd_train(args):
    data = _load_dataset(args)
    widths = [int(w) for w in args.widths.split(",")]
    activations = args.activations.split(",") if args.activations else None
    model = md.random_autoencoder(widths, args.latent_index, seed=args.seed,
                                  activations=activations,
                                  variational=args.variational, beta=args.beta)
    model, curve = md.train(model, data,
                            md.TrainConfig(epochs=args.epochs, lr=args.lr,
                                           batch_size=args.batch, seed=args.seed))
    for spec_text in args.inject:
        inj = _parse_inject(spec_text)
        model = md.inject_ill_conditioning(model, inj.layer, inj.floor, inj.count)
    md.save_model(model, args.out)
    final = curve[-1] if curve else float("nan")
    print(f"trained {model!r}; final loss {final:.6f}; saved to {args.out}")
    return 0


def cmd_attack(args):
    model = md.load_model(args.model)
    data = _load_dataset(args)
    cfg = _attack_config(args)
    if args.defended:
        pert, trace = run_adaptive_attack(model, _hmc_from_args(args), data, cfg)
    else:
        pert, trace = ak.run_universal_attack(model, data, cfg)
    os.makedirs(args.out, exist_ok=True)
    hz.save_perturbation(pert, os.path.join(args.out, "rho.txt"))
    row = hz.ResultRow(0, cfg.strategy, cfg.distance, cfg.eps, cfg.norm,
                       args.defended, cfg.seed, per_sample=None, trace=trace)
    hz._write_convergence_csv([row], os.path.join(args.out, "convergence.csv"))
    hz._write_gradient_hist_csv([row], os.path.join(args.out, "gradient_hist.csv"))
    final_dist = trace.eval_distortions[-1] if trace.eval_distortions else float("nan")
    print(f"{cfg.strategy}-{cfg.distance} eps={cfg.eps:g}: "
          f"final mean distortion {final_dist:.6f}; outputs in {args.out}")
    return 0


def cmd_evaluate(args):
    model = md.load_model(args.model)
    data = _load_dataset(args)
    rho = hz.load_perturbation(args.rho)
    defense = _hmc_from_args(args) if args.defended else None
    result = ak.evaluate_attack(model, data, rho, defense=defense)
    print(f"n={len(result.per_sample)} mean={result.mean:.6f} std={result.std:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        row = hz.ResultRow(0, "eval", "l2", 0.0, "inf", args.defended, args.seed,
                           per_sample=result.per_sample)
        hz._write_per_sample_csv([row], os.path.join(args.out, "per_sample.csv"))
    return 0


def cmd_spectral(args):
    model = md.load_model(args.model)
    report = sp.model_conditioning_report(model)
    if args.out:
        sp.report_to_csv(report, args.out)
        print(f"wrote {args.out}")
    else:
        print("layer_index,rows,cols,sigma_max,sigma_min,kappa,kappa_infinite_flag")
        for r in report:
            kappa = "inf" if r.kappa_infinite else repr(r.kappa)
            print(f"{r.layer_index},{r.rows},{r.cols},{r.sigma_max!r},"
                  f"{r.sigma_min!r},{kappa},{int(r.kappa_infinite)}")
    return 0


def cmd_experiment(args):
    cfg = hz.parse_experiment_config(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    rows = hz.run_experiment(cfg)
    failed = [r for r in rows if r.status != "ok"]
    for row in rows:
        if row.status == "ok":
            s = row.stats()
            print(f"row {row.row_id}: {row.strategy}-{row.distance} eps={row.eps:g} "
                  f"defended={int(row.defended)} mean={s['mean']:.6f} std={s['std']:.6f} "
                  f"({row.runtime_seconds:.1f}s)")
        else:
            print(f"row {row.row_id}: {row.strategy}-{row.distance} FAILED: {row.message}")
    print(f"outputs in {cfg.out_dir}")
    return 1 if failed else 0


def cmd_plot(args):
    path = hz.boxplot_from_results(args.out, args.path)
    print(f"wrote {path}")
    return 0


_COMMANDS = {"train": cmd_train, "attack": cmd_attack, "evaluate": cmd_evaluate,
             "spectral": cmd_spectral, "experiment": cmd_experiment, "plot": cmd_plot}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (hz.HarnessError, md.ModelError, ak.AttackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
