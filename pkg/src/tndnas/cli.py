"""Command line driver: search, ablations, standalone evaluation, reward surface."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigFileError, bundled_configs, load_config
from .data import IdxFormatError, generate_synthetic, iterate_batches, read_idx, split
from .engine import CheckpointError, ConfigError, Search, reference_params, write_metrics_csv
from .objectives import MetricVector, RewardSpec, reward_surface_grid, scalarize, write_reward_surface_csv
from .searchspace import (
    CELL_TYPES,
    CellSpec,
    Genotype,
    GenotypeFormatError,
    InvalidGenotypeError,
    SuperNetwork,
    count_parameters,
    full_candidates,
    to_dot,
    validate_genotype,
)
from .searchspace.network import NetworkConfig

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# reward overrides per ablation mode: (penalty exponent, accuracy factor)
ABLATIONS = {
    "reinforce_acc": (0.0, True),
    "max_params": (1.0, False),
    "min_params": (-1.0, False),
}
COMPARE_BETAS = (0.0, -0.25)
ABLATION_MODES = tuple(ABLATIONS) + ("compress_compare",)


class UsageError(Exception):
    pass


def load_datasets(spec):
    if spec.kind == "idx":
        ds = read_idx(spec.images, spec.labels)
    else:
        ds = generate_synthetic(spec.classes, spec.per_class, spec.size, spec.channels, spec.noise_sigma, spec.seed)
    return split(ds, spec.train_fraction, spec.split_seed)


def _progress(rec):
    print(
        f"stage {rec.stage} iter {rec.iteration:5d}  params {rec.mean_sampled_params:10.1f}  "
        f"max_acc {rec.max_sampled_accuracy:.3f}  argmax_acc {rec.argmax_genotype_accuracy:.3f}  "
        f"reward {rec.reward_mean:.4f}  baseline {rec.baseline:.4f}",
        flush=True,
    )


def _search_kwargs(cfg, beta, use_accuracy, quiet):
    kw = dict(use_baseline=cfg.use_baseline, workers=cfg.workers, progress=None if quiet else _progress)
    if cfg.reference_params is not None:
        kw["reward_spec"] = RewardSpec(cfg.reference_params, beta, use_accuracy)
    else:
        kw.update(penalty_exponent=beta, use_accuracy=use_accuracy)
    return kw


def write_genotype(genotype, path):
    Path(path).write_text(genotype.to_json() + "\n")


def write_search_outputs(out, search):
    from .plotting import plot_history

    res = search.result()
    write_genotype(res.genotype, out / "genotype.json")
    write_metrics_csv(res.history, out / "metrics.csv")
    steps = search.cell.num_intermediate_nodes
    for ct in CELL_TYPES:
        (out / f"cells_{ct}.dot").write_text(to_dot(res.genotype, ct, steps))
    summary = {
        "final_params": res.final_params,
        "final_accuracy": res.final_accuracy,
        "layers": res.network_config.layers,
        "channels": res.network_config.channels,
        "candidates": {ct: [list(c) for c in res.candidates[ct]] for ct in CELL_TYPES},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    if res.history:
        plot_history(res.history, out / "history.png")
    return res


def run_one(cfg, out, beta, use_accuracy, seed, quiet=False, resume=None, max_steps=None, train_val=None):
    """Run (or resume) one search writing every artifact to ``out``. Returns the result or None when paused."""
    train, val = train_val or load_datasets(cfg.dataset)
    kw = _search_kwargs(cfg, beta, use_accuracy, quiet)
    spec = kw.pop("reward_spec", None)
    if resume:
        search = Search.load(resume, train, val, spec, **kw)
        if search.stages != cfg.stages:
            raise UsageError(f"{resume}: checkpoint stage schedule differs from {cfg.path}")
    else:
        search = Search(cfg.stages, train, val, spec, seed=seed, **kw)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"
    epochs_done = [0]

    def on_epoch_end(s):
        epochs_done[0] += 1
        if epochs_done[0] % cfg.checkpoint_every_epochs == 0:
            s.save(ckpt)

    search.run(max_steps=max_steps, on_epoch_end=on_epoch_end)
    search.save(ckpt)
    if not search.done:
        print(f"paused; resume with --resume {ckpt}")
        return None
    res = write_search_outputs(out, search)
    print(f"final genotype params {res.final_params}  accuracy {res.final_accuracy:.4f}  -> {out}")
    return res


# ------------------------------------------------------------------ commands


def cmd_search(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    data = load_datasets(cfg.dataset)
    run_one(
        cfg, Path(args.out), cfg.penalty_exponent, True, seed, args.quiet, args.resume, args.max_steps, data
    )
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    data = load_datasets(cfg.dataset)
    out = Path(args.out)
    if args.mode in ABLATIONS:
        beta, use_acc = ABLATIONS[args.mode]
        run_one(cfg, out, beta, use_acc, seed, args.quiet, train_val=data)
        return EXIT_OK
    from .plotting import plot_compare

    results = {}
    for beta in COMPARE_BETAS:
        sub = out / f"beta_{beta:g}"
        print(f"-- penalty exponent {beta:g}")
        results[beta] = run_one(cfg, sub, beta, True, seed, args.quiet, train_val=data)
    with open(out / "compare.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["penalty_exponent", "final_params", "final_accuracy"])
        for beta, res in results.items():
            w.writerow([f"{beta:g}", res.final_params, repr(res.final_accuracy)])
    plot_compare({f"beta={b:g}": r.history for b, r in results.items()}, out / "compare.png")
    return EXIT_OK


def standalone_network(genotype, config, seed):
    """Network holding exactly the operations ``genotype`` uses."""
    edges = config.cell.edges
    cands = {ct: [(genotype.op(ct, e),) for e in edges] for ct in CELL_TYPES}
    return SuperNetwork(config, cands, seed)


def cmd_eval(args):
    cfg = load_config(args.config)
    try:
        genotype = Genotype.from_json(Path(args.genotype).read_bytes())
    except OSError as e:
        raise UsageError(f"cannot read genotype: {e}") from e
    seed = cfg.seed if args.seed is None else args.seed
    cell = CellSpec()
    validate_genotype(genotype, full_candidates(edges=cell.edges), cell.edges)
    train, val = load_datasets(cfg.dataset)
    ev, last = cfg.eval, cfg.stages[-1]
    config = NetworkConfig(
        ev.layers or last.layers, ev.channels or last.channels, train.channels, train.class_count, cell=cell
    )
    net = standalone_network(genotype, config, seed)
    params = count_parameters(genotype, config)
    instantiated = sum(p.data.size for p in net.op_parameters(genotype))
    if params != instantiated:
        raise RuntimeError(f"parameter count mismatch: formula {params}, instantiated {instantiated}")
    rng = np.random.default_rng(seed)
    opt = T.SGD(net.op_parameters(genotype), ev.lr, ev.momentum, ev.weight_decay, grad_clip=5.0)
    for epoch in range(ev.epochs):
        for x, y in iterate_batches(train, ev.batch_size, rng.permutation(len(train))):
            T.backward(T.softmax_cross_entropy(net.discrete_forward(x, genotype, mode="train"), y))
            # an unread cell input leaves its preprocessing without gradient
            opt.step(skip_missing=True)
    correct = 0
    with T.no_grad():
        for x, y in iterate_batches(val, 256):
            correct += int((net.discrete_forward(x, genotype, mode="eval").data.argmax(1) == y).sum())
    acc = correct / len(val)
    ref = cfg.reference_params or reference_params(config)
    reward = scalarize(MetricVector(acc, params), RewardSpec(ref, cfg.penalty_exponent))
    print(f"accuracy {acc:.4f}")
    print(f"params {params}")
    print(f"reward {reward:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"accuracy": acc, "params": params, "reward": reward, "reference_params": ref}
        (out / "eval.json").write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK


def cmd_reward_surface(args):
    from .plotting import plot_reward_surface

    ref = args.reference_params
    beta = args.beta
    if args.config:
        cfg = load_config(args.config)
        if ref is None:
            ref = cfg.reference_params
        if beta is None:
            beta = cfg.penalty_exponent
    if ref is None:
        raise UsageError("--reference-params is required (or set reward.reference_params in --config)")
    if ref <= 0:
        raise UsageError(f"--reference-params must be positive, got {ref}")
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    spec = RewardSpec(ref, -0.25 if beta is None else beta)
    grid = reward_surface_grid(spec, resolution=args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reward_surface_csv(grid, out / "reward_surface.csv")
    plot_reward_surface(grid, out / "reward_surface.png", title=f"P={ref:g}, beta={spec.penalty_exponent:g}")
    print(f"wrote {len(grid)} rows to {out / 'reward_surface.csv'}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="tndnas", description="Policy-gradient search over a weight-sharing supernetwork.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required,
                        help=f"TOML config path or bundled name ({', '.join(bundled_configs())})")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--quiet", action="store_true", help="no per-update progress lines")

    s = sub.add_parser("search", help="run the staged search")
    common(s)
    s.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint.npz")
    s.add_argument("--max-steps", type=int, default=None, help="pause after this many weight steps")
    s.set_defaults(func=cmd_search)

    a = sub.add_parser("ablate", help="run one reward ablation")
    common(a)
    a.add_argument("--mode", required=True, choices=ABLATION_MODES)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="train a saved genotype from scratch and report its metrics")
    common(e)
    e.add_argument("--genotype", required=True, help="genotype.json")
    e.set_defaults(func=cmd_eval, out=None)

    r = sub.add_parser("reward-surface", help="tabulate and plot the reward over (accuracy, params)")
    common(r, config_required=False)
    r.add_argument("--reference-params", type=float, default=None)
    r.add_argument("--beta", type=float, default=None, help="penalty exponent (default -0.25)")
    r.add_argument("--resolution", type=int, default=21)
    r.set_defaults(func=cmd_reward_surface)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "max_steps", None) is not None and args.max_steps < 1:
        print("error: --max-steps must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ConfigFileError, UsageError, GenotypeFormatError, InvalidGenotypeError,
            IdxFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
