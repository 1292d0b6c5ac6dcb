"""Command-line entry point.

Every command that produces results writes its resolved configuration to
``<out_dir>/config.json``; passing that file back with ``--config``
reproduces the outputs bit for bit.  Failures print a single line
``error: <Kind>: <message>`` on stderr and exit with status 1; usage errors
exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import fold_checkpoint, load_checkpoint, save_checkpoint
from .config import resolve, save_config
from .data import Dataset, SynthSpec, load_idx_dataset, synth_dataset
from .errors import ConfigurationError
from .fewshot import (
    FewshotConfig, MetaConfig, dynamic_fewshot, episode_stream, mean_ci, meta_setup, meta_test,
    meta_train, sample_episode, static_fewshot, write_results,
)
from .functional import conv2d
from .gns import DiagonalMask, best_lns_residual, conv_as_matrix, flatten_map, gns_forward, self_attention_forward
from .gradflow import (
    initial_state, integrate, random_problem, stability_threshold, write_trajectory,
)
from .network import Network, NetworkSpec, PredictorConfig
from .presets import build_preset
from .suite import run_suite
from .training import TrainConfig, evaluate, pretrained_recipe, train, write_trace


# helpers ----------------------------------------------------------------


def load_data(cfg: dict, seed: int) -> tuple[Dataset, Dataset]:
    """Training and test sets described by a ``data`` config section."""
    if cfg["source"] == "synth":
        try:
            spec = SynthSpec(**{**cfg["synth"], "patterns": tuple(cfg["synth"]["patterns"])})
        except TypeError as exc:
            raise ConfigurationError(f"data.synth: {exc}") from None
        test = SynthSpec(**{**spec.to_dict(), "patterns": spec.patterns, "per_class": cfg["test_per_class"]})
        return synth_dataset(spec, seed), synth_dataset(test, seed + 1)
    if cfg["source"] == "idx":
        paths = [cfg[k] for k in ("train_images", "train_labels", "test_images", "test_labels")]
        if None in paths:
            raise ConfigurationError("idx data needs train_images, train_labels, test_images and test_labels")
        return load_idx_dataset(*paths[:2]), load_idx_dataset(*paths[2:])
    raise ConfigurationError(f"data.source must be 'synth' or 'idx', got {cfg['source']!r}")


def build_spec(model: dict, input_shape, num_classes: int) -> NetworkSpec:
    if model["spec"] is not None:
        return NetworkSpec.from_dict(model["spec"])
    if model["preset"] is None:
        raise ConfigurationError("model needs either a preset or a spec")
    try:
        pred = PredictorConfig(**model["predictor"])
    except TypeError as exc:
        raise ConfigurationError(f"model.predictor: {exc}") from None
    return build_preset(model["preset"], num_classes, tuple(input_shape), model["similarity"], model["mode"], pred)


def _train_config(d: dict) -> TrainConfig:
    return TrainConfig.from_dict(d)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args, command: str) -> dict:
    return resolve(command, args.config, args.set, seed=args.seed, out_dir=args.out_dir)


# commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args, "train")
    out = Path(cfg["out_dir"])
    save_config(cfg, out)
    train_set, test_set = load_data(cfg["data"], cfg["seed"])
    spec = build_spec(cfg["model"], train_set.shape, int(train_set.labels.max()) + 1)
    net = Network(spec, cfg["seed"])
    if cfg["pretrained"] is not None:
        net.load_matching(load_checkpoint(cfg["pretrained"]).state)
    tc = _train_config(cfg["train"])
    if cfg["recipe"] == "joint":
        result = train(net, train_set, tc, test_set)
        trace, optimizer = result.trace, result.optimizer
    elif cfg["recipe"] == "similarity_first":
        phase2 = None if cfg["phase2"] is None else _train_config(cfg["phase2"])
        traces = pretrained_recipe(net, train_set, tc, phase2, test_set)
        trace, optimizer = [row for t in traces for row in t], None
    else:
        raise ConfigurationError(f"recipe must be 'joint' or 'similarity_first', got {cfg['recipe']!r}")
    write_trace(out / "trace.csv", trace)
    save_checkpoint(out / "model.ckpt", net, optimizer, {"seed": cfg["seed"]})
    metrics = {"train_error": evaluate(net, train_set), "test_error": evaluate(net, test_set),
               "iterations": len(trace), "parameters": net.num_parameters()}
    _write_json(out / "metrics.json", metrics)
    print(f"train_error={metrics['train_error']!r} test_error={metrics['test_error']!r} "
          f"iterations={metrics['iterations']} out={out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, "eval")
    _, test_set = load_data(cfg["data"], cfg["seed"])
    net = load_checkpoint(args.checkpoint).build()
    err = evaluate(net, test_set)
    print(f"error_rate={err!r} n={len(test_set)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.size, args.tol)
    for name, err in results.items():
        print(f"{name:26s} {err:.3e} {'ok' if err <= args.tol else 'FAIL'}")
    worst = max(results.values())
    print(f"worst={worst:.3e} tol={args.tol:.0e}")
    return 0 if worst <= args.tol else 1


def _pretrain_static(cfg, base: Dataset, seed: int) -> Network:
    """Plain backbone trained on the base classes, loaded into an identity-initialized static network."""
    spec = build_spec(cfg["model"], base.shape, int(base.labels.max()) + 1)
    if spec.plain().to_dict() == spec.to_dict():
        raise ConfigurationError("few-shot needs model.similarity other than 'none'")
    plain = Network(spec.plain(), seed)
    train(plain, base, _train_config(cfg["pretrain"]))
    net = Network(spec.with_similarity(cfg["model"]["similarity"], "static"), seed)
    net.load_matching(plain.state())
    return net


def cmd_fewshot(args) -> int:
    cfg = _config(args, "fewshot")
    out = Path(cfg["out_dir"])
    save_config(cfg, out)
    seed = cfg["seed"]
    data, _ = load_data(cfg["data"], seed)
    base = data.where(range(cfg["base_classes"]))
    novel = data.where(range(cfg["base_classes"], int(data.labels.max()) + 1))
    ft = FewshotConfig(**cfg["finetune"])
    N, K, Q = cfg["ways"], cfg["shots"], cfg["queries"]
    strategy = cfg["strategy"]
    if strategy == "static":
        net = _pretrain_static(cfg, base, seed)
        score = lambda ep: static_fewshot(net, ep, ft).accuracy
    elif strategy == "dynamic":
        spec = build_spec({**cfg["model"], "mode": "dynamic"}, base.shape, cfg["base_classes"])
        net = Network(spec, seed)
        train(net, base, _train_config(cfg["pretrain"]))
        score = lambda ep: dynamic_fewshot(net, ep, ft).accuracy
    elif strategy == "meta":
        mc = MetaConfig.from_dict(cfg["meta"])
        net = meta_setup(_pretrain_static(cfg, base, seed), N)
        state = meta_train(net, episode_stream(base, N, K, Q, seed), mc)
        score = lambda ep: meta_test(state, ep).accuracy
    else:
        raise ConfigurationError(f"strategy must be static, dynamic or meta, got {strategy!r}")
    rng = np.random.default_rng([seed, 1])
    rows = []
    for i in range(cfg["episodes"]):
        rows.append({"episode_id": i, "strategy": strategy, "accuracy": score(sample_episode(novel, N, K, Q, rng))})
    write_results(out / "results.csv", rows)
    mean, half = mean_ci([r["accuracy"] for r in rows])
    _write_json(out / "summary.json", {"strategy": strategy, "episodes": len(rows), "mean": mean, "ci95": half})
    print(f"strategy={strategy} accuracy={mean:.4f} ci95={half:.4f} episodes={len(rows)} out={out}")
    return 0


def cmd_gradflow(args) -> int:
    cfg = _config(args, "gradflow")
    out = Path(cfg["out_dir"])
    save_config(cfg, out)
    problem = random_problem(cfg["n"], cfg["m"], cfg["samples"], cfg["seed"], cfg["consistent"])
    state = initial_state(problem, cfg["mode"], cfg["seed"], cfg["init_std"])
    traj = integrate(state, problem, cfg["dt"], cfg["steps"], cfg["stop_tol"], cfg["retries"])
    write_trajectory(out / "trajectory.csv", traj.rows)
    last = traj.rows[-1]
    summary = {"mode": cfg["mode"], "dt": traj.dt, "retries": traj.retries, "steps": len(traj.rows) - 1,
               "stability_threshold": stability_threshold(problem, state), **last}
    _write_json(out / "summary.json", summary)
    print(f"mode={cfg['mode']} t={last['t']!r} loss={last['loss']!r} nuclear_norm={last['nuclear_norm']!r} "
          f"distance_to_min_norm={last['distance_to_min_norm']!r} out={out}")
    return 0


def cmd_fold(args) -> int:
    folded = fold_checkpoint(load_checkpoint(args.input))
    Path(args.output).write_bytes(folded.to_bytes())
    print(f"folded parameters={sum(int(np.size(v)) for k, v in folded.state.items() if ':' not in k)} "
          f"out={args.output}")
    return 0


def attention_checks(seed: int = 0, trials: int = 20) -> dict[str, float]:
    """Worst discrepancy of each global-similarity identity over random instances."""
    rng = np.random.default_rng(seed)
    worst = {"conv_as_matrix": 0.0, "diagonal_mask": 0.0, "attention": 0.0, "lns_m1": 0.0}
    for _ in range(trials):
        m, c = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        k = int(rng.choice([k for k in (1, 3, 5) if k <= 2 * m - 1]))
        W, X = rng.normal(size=(k, k, c)), rng.normal(size=(m, m, c))
        ref = conv2d(X.transpose(2, 0, 1)[None], W.transpose(2, 0, 1)[None], 1, k // 2).data.ravel()
        got = conv_as_matrix(W, m).apply(flatten_map(X)).data
        worst["conv_as_matrix"] = max(worst["conv_as_matrix"], np.abs(got - ref).max())
        mask = rng.normal(size=m * m)
        masked = X * mask.reshape(m, m, 1)
        ref = conv2d(masked.transpose(2, 0, 1)[None], W.transpose(2, 0, 1)[None], 1, k // 2).data.ravel()
        got = gns_forward(conv_as_matrix(W, m), DiagonalMask(mask, m, c), X).data
        worst["diagonal_mask"] = max(worst["diagonal_mask"], np.abs(got - ref).max())
        G1, G2 = rng.normal(size=(c, c)), rng.normal(size=(c, c))
        flat = X.reshape(m * m, c)
        mixed = ((flat @ G1.T) @ (flat @ G2.T).T @ flat).reshape(m, m, c)
        ref = conv2d(mixed.transpose(2, 0, 1)[None], W.transpose(2, 0, 1)[None], 1, k // 2).data.ravel()
        got = self_attention_forward(W, G1, G2, X).data.ravel()
        worst["attention"] = max(worst["attention"], np.abs(got - ref).max())
        worst["lns_m1"] = max(worst["lns_m1"], best_lns_residual(rng.normal(size=(1, 1, c)), rng.normal(size=1),
                                                                  rng.normal(size=(1, 1, c))))
    W2 = np.random.default_rng(seed + 1).normal(size=(4, 3, 3, 2))
    worst["lns_m2_gap"] = best_lns_residual(W2, np.array([1.0, -1.0, 2.0, 0.5]),
                                            np.random.default_rng(seed + 2).normal(size=(2, 2, 2)))
    return {k: float(v) for k, v in worst.items()}


def cmd_attn_demo(args) -> int:
    res = attention_checks(args.seed, args.trials)
    ok = all(res[k] <= 1e-10 for k in ("conv_as_matrix", "diagonal_mask", "attention", "lns_m1"))
    ok = ok and res["lns_m2_gap"] > 1e-6
    for k, v in res.items():
        print(f"{k:16s} {v:.3e}")
    print("all identities hold" if ok else "identity check failed")
    return 0 if ok else 1


# parser -----------------------------------------------------------------


def _add_run_options(p) -> None:
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.epochs=3 (value parsed as JSON)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out-dir", help="output directory (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsl", description="Neural similarity learning experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    p = sub.add_parser("train", help="train a network (plain, static or dynamic similarity)")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="error rate of a checkpoint on the configured test set")
    p.add_argument("checkpoint")
    _add_run_options(p)
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--size", choices=["small", "medium"], default="small")
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    p = sub.add_parser("fewshot", help="episodic few-shot evaluation (static, dynamic or meta)")
    _add_run_options(p)
    p.set_defaults(func=cmd_fewshot)
    p = sub.add_parser("gradflow", help="least-squares gradient-flow trajectory")
    _add_run_options(p)
    p.set_defaults(func=cmd_gradflow)
    p = sub.add_parser("fold", help="fold static similarities into plain kernels")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_fold)
    p = sub.add_parser("attn-demo", help="global similarity and self-attention identity checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_attn_demo)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, RuntimeError, ArithmeticError, OSError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
