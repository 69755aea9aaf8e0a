"""Command-line entry point.

Subcommands:
  train      train the configured methods and write checkpoints
  eval       sample + score the evaluation cells of a config (needs checkpoints)
  run        train and eval in one go, from a config file or a named preset
  sample     draw sequences from a trained checkpoint into an ndjson file
  gradcheck  finite-difference check of the full loss path, exit 0 iff < 1e-4
  oracle     print the analytic pair-dependence KL table

Exit codes: 0 success, 1 a stage failed (diagnostics on stderr), 2 bad usage
(unknown flag, unknown preset, malformed config).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np


def _load_raw(path: str, seed, out) -> dict:
    with open(path) as f:
        raw = json.load(f)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out_dir"] = out
    return raw


def _finish(manifest: dict) -> int:
    if manifest["status"] == "ok":
        return 0
    for stage in manifest.get("stages", []):
        if stage["status"] != "ok":
            print(f"stage {stage['stage']}: {stage['status']}"
                  + (f" ({stage['error']})" if "error" in stage else ""),
                  file=sys.stderr)
    return 1


def _cmd_train(args) -> int:
    from .experiments import config_from_dict, run_experiment
    cfg = config_from_dict(_load_raw(args.config, args.seed, args.out))
    return _finish(run_experiment(cfg, stages=("train",), progress=args.progress))


def _cmd_eval(args) -> int:
    from .experiments import config_from_dict, run_experiment
    cfg = config_from_dict(_load_raw(args.config, args.seed, args.out))
    return _finish(run_experiment(cfg, stages=("eval",)))


def _cmd_run(args) -> int:
    from .experiments import config_from_dict, run_experiment, run_preset
    if (args.preset is None) == (args.config is None):
        print("run: give exactly one of --preset or --config", file=sys.stderr)
        return 2
    if args.preset is not None:
        out_root = args.out if args.out is not None else "runs"
        seed = args.seed if args.seed is not None else 0
        combined = run_preset(args.preset, seed, out_root, progress=args.progress)
        print(open(combined["table_path"]).read(), end="")
        return 0 if combined["status"] == "ok" else 1
    cfg = config_from_dict(_load_raw(args.config, args.seed, args.out))
    manifest = run_experiment(cfg, progress=args.progress)
    if manifest["table_path"]:
        print(open(manifest["table_path"]).read(), end="")
    return _finish(manifest)


def _cmd_sample(args) -> int:
    from .backbone import model_from_checkpoint
    from .experiments import config_from_dict
    from .sampler import SampleConfig, dump_samples, sample_block_vmd
    import os

    cfg = config_from_dict(_load_raw(args.config, args.seed, None))
    model = model_from_checkpoint(
        os.path.join(cfg.out_dir, args.method, f"ckpt_{args.method}"))
    scfg = SampleConfig(nfe=args.nfe, strategy=args.strategy, seed=cfg.seed,
                        num_samples=args.num_samples,
                        value_sampling=args.value_sampling)
    samples = sample_block_vmd(model, scfg)
    out = args.out or os.path.join(cfg.out_dir, f"samples_{args.method}.ndjson")
    dump_samples(out, samples, scfg)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .autodiff import gradcheck
    from .backbone import BackboneConfig, VMDModel
    from .diffusion import block_vmd_loss

    cfg = BackboneConfig(vocab_size=6, seq_len=4, block_len=2, hidden_dim=8,
                         decoder_layers=1, encoder_layers=1, num_heads=2,
                         latent_dim=4, latent_enabled=True)
    model = VMDModel(cfg, np.random.default_rng(0))
    for p in model.parameters().values():
        p.value = p.value.astype(np.float64)
    x0 = np.random.default_rng(1).integers(0, 6, size=(2, 4))

    def loss_fn():
        return block_vmd_loss(model, x0, np.random.default_rng(3),
                              np.random.default_rng(4))[0]

    err = gradcheck(loss_fn, list(model.parameters().values()),
                    max_elems_per_param=args.max_elems,
                    rng=np.random.default_rng(9))
    ok = err < 1e-4
    print(f"max relative gradient error: {err:.3e} "
          f"({'PASS' if ok else 'FAIL'}, tolerance 1e-4)")
    return 0 if ok else 1


def _cmd_oracle(args) -> int:
    from .evaluation import analytic_product_kl
    print(f"{'p':<6}{'KL(pair || independent marginals)':<34}")
    for p in (0.3, 0.5, 0.7, 1.0):
        print(f"{p:<6}{analytic_product_kl(p, args.vocab):.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .experiments import PRESETS

    parser = argparse.ArgumentParser(prog="vmdlab",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to an experiment config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None,
                       help="override the config output directory")

    p = sub.add_parser("train", help="train the configured methods")
    common(p)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate trained checkpoints")
    common(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("run", help="train + eval from a config or preset")
    common(p, config_required=False)
    p.add_argument("--preset", choices=PRESETS, default=None)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sample", help="draw sequences from a checkpoint")
    common(p)
    p.add_argument("--method", choices=("mdm", "vmd"), default="vmd")
    p.add_argument("--nfe", type=int, default=1)
    p.add_argument("--strategy", default="top_prob")
    p.add_argument("--num-samples", type=int, default=16)
    p.add_argument("--value-sampling", choices=("argmax", "categorical"),
                   default="argmax")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--max-elems", type=int, default=48,
                   help="coordinates checked per parameter tensor")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("oracle", help="analytic KL values for the pair dataset")
    p.add_argument("--vocab", type=int, default=10)
    p.set_defaults(fn=_cmd_oracle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.fn(args)
    except (ValueError, TypeError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
