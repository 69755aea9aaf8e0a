"""Experiment orchestration: strict JSON configs, presets, runs, reports.

A config names a dataset, a backbone, per-method training settings, and a
grid of evaluation cells (NFE x strategy x sample count). `run_experiment`
trains the latent-free baseline and/or the latent model, samples every cell,
and writes metrics.jsonl, heatmap CSVs, checkpoints, a human-readable table,
and a manifest recording how far the run got.

Everything derives from one root seed through named streams, and both
methods share the data and evaluation seeds so comparisons are paired.
Metric files contain no wall-clock values, so re-running the same config
reproduces them byte for byte (float32 math, order-dependent BLAS noted in
the manifest).
"""

from __future__ import annotations

import json
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .backbone import BackboneConfig, VMDModel, model_from_checkpoint
from .datasets import (
    DatasetSpec,
    dataset_spec,
    exact_distribution,
    sample_batch,
    sudoku_prompt_mask,
)
from .diffusion import TrainConfig, train
from .evaluation import (
    EmpiricalDist,
    Heatmap,
    default_eps,
    joint_heatmap,
    kl_truth_vs_model,
)
from .rng import split_streams
from .sampler import SampleConfig, dump_samples, sample_block_vmd

SCHEMA_VERSION = 1
METHODS = ("mdm", "vmd")
EVAL_TOKEN_BUDGET = 20_000  # rows*seq_len per sampler shard; a forward graph
                            # at this size peaks around 2-3 GB. Shard
                            # boundaries feed the per-chunk seeds, so this is
                            # a frozen constant, not a tunable.
MATH_MODE = "float32 forward/backward, float64 reductions in oracles; numpy BLAS"

_TOP_KEYS = {"schema_version", "experiment", "seed", "out_dir", "dataset",
             "methods", "backbone", "train", "train_overrides", "eval_cells"}
_DATASET_KEYS = {"name", "p", "vocab", "block_len", "givens"}
_BACKBONE_KEYS = {"hidden_dim", "decoder_layers", "encoder_layers", "num_heads",
                  "latent_dim", "kl_weight", "latent_into_pos", "latent_adaln",
                  "adaln_shared", "mlp_ratio"}
_TRAIN_KEYS = {"batch_size", "num_steps", "lr", "t_min", "kl_weight",
               "kl_in_t_weight", "kl_warmup_steps", "log_every",
               "checkpoint_every"}
_CELL_KEYS = {"nfe", "strategy", "num_samples", "value_sampling"}


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass
class ExperimentConfig:
    experiment: str
    spec: DatasetSpec
    methods: tuple
    backbone: dict
    train: dict                 # method -> TrainConfig
    cells: list
    out_dir: str
    seed: int
    snapshot: dict = field(repr=False)


def config_from_dict(raw: dict) -> ExperimentConfig:
    _check_keys(raw, _TOP_KEYS, "config")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    for key in ("experiment", "seed", "out_dir", "dataset", "train", "eval_cells"):
        if key not in raw:
            raise ValueError(f"config is missing required key {key!r}")

    ds = dict(raw["dataset"])
    _check_keys(ds, _DATASET_KEYS, "config.dataset")
    if "name" not in ds:
        raise ValueError("config.dataset needs a name")
    spec = dataset_spec(ds["name"], p=ds.get("p"), vocab=ds.get("vocab", 10),
                        block_len=ds.get("block_len"), givens=ds.get("givens"))

    methods = tuple(raw.get("methods", list(METHODS)))
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected subset of {METHODS}")
    if not methods:
        raise ValueError("config.methods must not be empty")

    backbone = dict(raw.get("backbone", {}))
    _check_keys(backbone, _BACKBONE_KEYS, "config.backbone")

    base_train = dict(raw["train"])
    _check_keys(base_train, _TRAIN_KEYS, "config.train")
    overrides = dict(raw.get("train_overrides", {}))
    _check_keys(overrides, set(METHODS), "config.train_overrides")
    trains = {}
    for m in methods:
        merged = dict(base_train)
        per_method = dict(overrides.get(m, {}))
        _check_keys(per_method, _TRAIN_KEYS, f"config.train_overrides.{m}")
        merged.update(per_method)
        trains[m] = TrainConfig(**merged)

    cells = []
    for i, cell in enumerate(raw["eval_cells"]):
        cell = dict(cell)
        _check_keys(cell, _CELL_KEYS, f"config.eval_cells[{i}]")
        for key in ("nfe", "num_samples"):
            if key not in cell:
                raise ValueError(f"config.eval_cells[{i}] is missing {key!r}")
        cell.setdefault("strategy", "top_prob")
        cells.append(cell)
    if not cells:
        raise ValueError("config.eval_cells must not be empty")

    return ExperimentConfig(
        experiment=raw["experiment"], spec=spec, methods=methods,
        backbone=backbone, train=trains, cells=cells,
        out_dir=raw["out_dir"], seed=int(raw["seed"]), snapshot=raw,
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def build_model(config: ExperimentConfig, method: str,
                rng: np.random.Generator) -> VMDModel:
    cfg = BackboneConfig(vocab_size=config.spec.vocab_size,
                         seq_len=config.spec.seq_len,
                         block_len=config.spec.block_len,
                         latent_enabled=(method == "vmd"),
                         **config.backbone)
    return VMDModel(cfg, rng)


# ---------------------------------------------------------------------------
# evaluation cells
# ---------------------------------------------------------------------------

def _cell_value_sampling(cell: dict, method: str) -> str:
    # argmax decoding of a factorized baseline is degenerate, so the
    # latent-free method samples token values unless told otherwise
    return cell.get("value_sampling", "argmax" if method == "vmd" else "categorical")


def _sudoku_prompts(spec: DatasetSpec, rng: np.random.Generator, n: int,
                    mask_id: int) -> np.ndarray:
    full = sample_batch(spec, rng, n)
    prompt = full.copy()
    prompt[:, ~sudoku_prompt_mask()] = mask_id
    return prompt


def run_cell(model: VMDModel, config: ExperimentConfig, method: str,
             cell: dict) -> dict:
    """Sample one (method, NFE, strategy) cell and reduce it to a metrics row."""
    spec = config.spec
    total = int(cell["num_samples"])
    strategy = cell["strategy"]
    nfe = int(cell["nfe"])
    dist = exact_distribution(spec)
    n_valid = 0
    emp = None
    heat_counts = None
    done = 0
    chunk_idx = 0
    shard = max(1, EVAL_TOKEN_BUDGET // spec.seq_len)
    while done < total:
        n = min(shard, total - done)
        seq = np.random.SeedSequence([config.seed, hash_cell(cell), chunk_idx])
        chunk_rng = np.random.default_rng(seq)
        prompt = None
        if spec.name == "minisudoku":
            prompt = _sudoku_prompts(spec, chunk_rng, n, model.cfg.mask_id)
        scfg = SampleConfig(nfe=nfe, strategy=strategy, seed=config.seed,
                            prompt=prompt, num_samples=n,
                            value_sampling=_cell_value_sampling(cell, method))
        out = sample_block_vmd(model, scfg, chunk_rng)
        n_valid += int(sum(bool(dist.validity(row)) for row in out))
        if dist.enumerable:
            part = EmpiricalDist.from_samples(out)
            emp = part if emp is None else emp.merge(part)
        if spec.seq_len == 2:
            h = joint_heatmap(out, spec.vocab_size)
            heat_counts = h.counts if heat_counts is None else heat_counts + h.counts
        done += n
        chunk_idx += 1
    row = {
        "experiment": config.experiment,
        "method": method,
        "nfe": nfe * spec.num_blocks,
        "nfe_per_block": nfe,
        "strategy": strategy,
        "accuracy": round(n_valid / total, 6),
        "kl": None,
        "eps": None,
        "n_samples": total,
        "seed": config.seed,
    }
    if dist.enumerable:
        eps = default_eps(total)
        row["kl"] = round(kl_truth_vs_model(dist, emp, eps), 6)
        row["eps"] = eps
    heat = None
    if heat_counts is not None:
        heat = Heatmap(counts=heat_counts, total=total)
    return {"row": row, "heatmap": heat}


def hash_cell(cell: dict) -> int:
    """Stable small integer identifying a cell (not Python's salted hash)."""
    key = f"{cell['nfe']}|{cell['strategy']}|{cell['num_samples']}"
    return zlib.crc32(key.encode())


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------

def _ckpt_base(config: ExperimentConfig, method: str) -> str:
    return os.path.join(config.out_dir, method, f"ckpt_{method}")


def run_experiment(config: ExperimentConfig, stages=("train", "eval"),
                   progress: bool = False) -> dict:
    """Run the configured pipeline; always writes and returns the manifest."""
    os.makedirs(config.out_dir, exist_ok=True)
    t_start = time.perf_counter()
    stage_log = []
    models = {}
    rows = []
    heatmap_paths = []
    failed_methods = set()

    for method in config.methods:
        if "train" not in stages:
            continue
        stage = {"stage": f"train_{method}", "status": "ok"}
        t0 = time.perf_counter()
        try:
            method_dir = os.path.join(config.out_dir, method)
            os.makedirs(method_dir, exist_ok=True)
            streams = split_streams(config.seed)
            model = build_model(config, method, streams["init"])
            train(model, config.spec, config.train[method], streams,
                  out_dir=method_dir, ckpt_tag=method, progress=progress)
            models[method] = model
        except Exception as e:                               # noqa: BLE001
            stage.update(status="failed", error=f"{type(e).__name__}: {e}")
            failed_methods.add(method)
        stage["seconds"] = round(time.perf_counter() - t0, 3)
        stage_log.append(stage)

    if "eval" in stages:
        for method in config.methods:
            stage = {"stage": f"eval_{method}", "status": "ok"}
            t0 = time.perf_counter()
            if method in failed_methods:
                stage["status"] = f"skipped (train_{method} failed)"
                stage_log.append(stage)
                continue
            try:
                model = models.get(method)
                if model is None:
                    model = model_from_checkpoint(_ckpt_base(config, method))
                for cell in config.cells:
                    result = run_cell(model, config, method, cell)
                    rows.append(result["row"])
                    if result["heatmap"] is not None:
                        tag = f"{method}_nfe{result['row']['nfe']}_{cell['strategy']}"
                        path = os.path.join(config.out_dir, f"heatmap_{tag}.csv")
                        result["heatmap"].to_csv(path)
                        heatmap_paths.append(path)
            except Exception as e:                           # noqa: BLE001
                stage.update(status="failed", error=f"{type(e).__name__}: {e}")
            stage["seconds"] = round(time.perf_counter() - t0, 3)
            stage_log.append(stage)

        metrics_path = os.path.join(config.out_dir, "metrics.jsonl")
        with open(metrics_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        table_path = os.path.join(config.out_dir, "table.txt")
        with open(table_path, "w") as f:
            f.write(render_rows(config.experiment, rows))
    else:
        metrics_path = table_path = None

    status = "ok" if all(s["status"] == "ok" for s in stage_log) else "partial"
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "experiment": config.experiment,
        "status": status,
        "config": config.snapshot,
        "code_version": __version__,
        "math_mode": MATH_MODE,
        "seed": config.seed,
        "stages": stage_log,
        "checkpoints": {m: _ckpt_base(config, m) for m in config.methods
                        if m not in failed_methods},
        "metrics_path": metrics_path,
        "table_path": table_path,
        "heatmaps": heatmap_paths,
        "wall_seconds": round(time.perf_counter() - t_start, 3),
    }
    with open(os.path.join(config.out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _fmt(value, width=10):
    if value is None:
        return "-".ljust(width)
    return f"{value:.4f}".ljust(width)


def render_rows(title: str, rows: list) -> str:
    lines = [title,
             f"{'method':<10}{'NFE':<6}{'strategy':<12}{'accuracy':<10}{'KL':<10}"]
    for r in rows:
        lines.append(f"{r['method']:<10}{r['nfe']:<6}{r['strategy']:<12}"
                     f"{_fmt(r['accuracy'])}{_fmt(r['kl'])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# presets (budgets are config values; tuned for a commodity CPU)
# ---------------------------------------------------------------------------

SMALL_BACKBONE = {"hidden_dim": 32, "decoder_layers": 4, "encoder_layers": 2,
                  "num_heads": 2, "latent_dim": 16}

# the latent needs a KL ramp or the penalty shuts the encoder off before the
# reconstruction pathway forms, and a long full-strength tail calibrates how
# much prior mass each mode's z-region gets; the baseline has no KL and
# trains shorter
VMD_TRAIN_2TOK = {"batch_size": 256, "num_steps": 3600, "lr": 3e-3,
                  "kl_weight": 1.0, "kl_warmup_steps": 1800, "log_every": 100}
MDM_TRAIN_2TOK = {"num_steps": 700, "kl_weight": 0.0, "kl_warmup_steps": 0}

EVAL_N = 100_000


def _cells_2tok(seq_len: int):
    return [
        {"nfe": 1, "strategy": "top_prob", "num_samples": EVAL_N},
        {"nfe": seq_len, "strategy": "top_prob", "num_samples": EVAL_N},
    ]


def preset_configs(name: str, seed: int, out_root: str) -> list:
    """Expand a preset into experiment configs (one per trained dataset)."""
    if name in ("table1-det", "table1-nonuni"):
        ds = "det2" if name == "table1-det" else "nonuni2"
        raw = {
            "schema_version": SCHEMA_VERSION,
            "experiment": name,
            "seed": seed,
            "out_dir": os.path.join(out_root, name),
            "dataset": {"name": ds},
            "methods": ["mdm", "vmd"],
            "backbone": dict(SMALL_BACKBONE, latent_dim=32),
            "train": dict(VMD_TRAIN_2TOK),
            "train_overrides": {"mdm": dict(MDM_TRAIN_2TOK)},
            "eval_cells": _cells_2tok(2),
        }
        return [config_from_dict(raw)]

    if name == "table2":
        configs = []
        for p in (0.3, 0.5, 0.7, 1.0):
            raw = {
                "schema_version": SCHEMA_VERSION,
                "experiment": f"table2-p{p:g}",
                "seed": seed,
                "out_dir": os.path.join(out_root, f"table2-p{p:g}"),
                "dataset": {"name": "varp2", "p": p},
                "methods": ["mdm", "vmd"],
                "backbone": dict(SMALL_BACKBONE, latent_dim=32),
                "train": dict(VMD_TRAIN_2TOK),
                "train_overrides": {"mdm": dict(MDM_TRAIN_2TOK)},
                "eval_cells": [{"nfe": 1, "strategy": "top_prob",
                                "num_samples": EVAL_N}],
            }
            configs.append(config_from_dict(raw))
        return configs

    if name == "table3":
        # a single global latent must cover 100 modes on d2/B=1, which forms
        # much more slowly than the per-block cases: bigger latent, longer ramp
        vmd_budget = {
            ("d1", 4): {"latent_dim": 16, "num_steps": 1800, "kl_warmup_steps": 1400},
            ("d1", 2): {"latent_dim": 16, "num_steps": 1800, "kl_warmup_steps": 1400},
            ("d2", 4): {"latent_dim": 32, "num_steps": 4200, "kl_warmup_steps": 3600},
            ("d2", 2): {"latent_dim": 16, "num_steps": 1800, "kl_warmup_steps": 1400},
        }
        configs = []
        for ds in ("d1", "d2"):
            for block_len in (4, 2):          # B=1 and B=2
                B = 4 // block_len
                budget = vmd_budget[(ds, block_len)]
                backbone = dict(SMALL_BACKBONE, latent_dim=budget["latent_dim"])
                raw = {
                    "schema_version": SCHEMA_VERSION,
                    "experiment": f"table3-{ds}-B{B}",
                    "seed": seed,
                    "out_dir": os.path.join(out_root, f"table3-{ds}-B{B}"),
                    "dataset": {"name": ds, "block_len": block_len},
                    "methods": ["mdm", "vmd"],
                    "backbone": backbone,
                    "train": {"batch_size": 128, "lr": 3e-3, "kl_weight": 1.0,
                              "num_steps": budget["num_steps"],
                              "kl_warmup_steps": budget["kl_warmup_steps"],
                              "log_every": 100},
                    "train_overrides": {"mdm": {"num_steps": 800,
                                                "kl_weight": 0.0,
                                                "kl_warmup_steps": 0}},
                    "eval_cells": [
                        {"nfe": 1, "strategy": "top_prob", "num_samples": 20_000},
                        {"nfe": block_len, "strategy": "top_prob",
                         "num_samples": 20_000},
                    ],
                }
                configs.append(config_from_dict(raw))
        return configs

    if name == "minisudoku":
        raw = {
            "schema_version": SCHEMA_VERSION,
            "experiment": "minisudoku",
            "seed": seed,
            "out_dir": os.path.join(out_root, "minisudoku"),
            "dataset": {"name": "minisudoku"},
            "methods": ["mdm", "vmd"],
            "backbone": {"hidden_dim": 32, "decoder_layers": 4,
                         "encoder_layers": 2, "num_heads": 2, "latent_dim": 16},
            "train": {"batch_size": 128, "num_steps": 3000, "lr": 3e-3,
                      "kl_weight": 1.0, "kl_warmup_steps": 1200,
                      "log_every": 100},
            "train_overrides": {"mdm": {"num_steps": 2000, "kl_weight": 0.0,
                                        "kl_warmup_steps": 0}},
            "eval_cells": [
                {"nfe": n, "strategy": "top_margin", "num_samples": 2000}
                for n in (2, 4, 8)
            ],
        }
        return [config_from_dict(raw)]

    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("table1-det", "table1-nonuni", "table2", "table3", "minisudoku")


def run_preset(name: str, seed: int, out_root: str, progress: bool = False) -> dict:
    configs = preset_configs(name, seed, out_root)
    manifests = [run_experiment(c, progress=progress) for c in configs]
    all_rows = []
    for c in configs:
        with open(os.path.join(c.out_dir, "metrics.jsonl")) as f:
            all_rows.extend(json.loads(line) for line in f)
    table = render_preset_table(name, all_rows)
    table_path = os.path.join(out_root, f"{name}.table.txt")
    os.makedirs(out_root, exist_ok=True)
    with open(table_path, "w") as f:
        f.write(table)
    combined = {
        "schema_version": SCHEMA_VERSION,
        "preset": name,
        "seed": seed,
        "status": ("ok" if all(m["status"] == "ok" for m in manifests)
                   else "partial"),
        "experiments": [m["experiment"] for m in manifests],
        "manifests": [os.path.join(c.out_dir, "manifest.json") for c in configs],
        "table_path": table_path,
    }
    with open(os.path.join(out_root, f"{name}.manifest.json"), "w") as f:
        json.dump(combined, f, indent=1)
    return combined


def render_preset_table(name: str, rows: list) -> str:
    if name == "table2":
        lines = ["varp2: one-step KL by dependence strength p",
                 f"{'p':<6}{'analytic':<10}{'MDM':<10}{'VMD':<10}"]
        from .evaluation import analytic_product_kl
        for p in (0.3, 0.5, 0.7, 1.0):
            exp = f"table2-p{p:g}"
            cells = {r["method"]: r["kl"] for r in rows
                     if r["experiment"] == exp and r["nfe"] == 1}
            lines.append(f"{p:<6}{_fmt(analytic_product_kl(p, 10))}"
                         f"{_fmt(cells.get('mdm'))}{_fmt(cells.get('vmd'))}")
        return "\n".join(lines) + "\n"

    if name == "minisudoku":
        lines = ["mini-sudoku: solved rate by NFE (top_margin)",
                 f"{'NFE':<6}{'MDM':<10}{'VMD':<10}"]
        for nfe in (2, 4, 8):
            cells = {r["method"]: r["accuracy"] for r in rows if r["nfe"] == nfe}
            lines.append(f"{nfe:<6}{_fmt(cells.get('mdm'))}{_fmt(cells.get('vmd'))}")
        return "\n".join(lines) + "\n"

    if name == "table3":
        lines = ["D1/D2: accuracy by block count and NFE",
                 f"{'dataset':<9}{'B':<4}{'NFE':<6}{'method':<8}{'accuracy':<10}{'KL':<10}"]
        for r in rows:
            ds, b = r["experiment"].rsplit("-", 2)[1:]
            lines.append(f"{ds:<9}{b[1]:<4}{r['nfe']:<6}{r['method']:<8}"
                         f"{_fmt(r['accuracy'])}{_fmt(r['kl'])}")
        return "\n".join(lines) + "\n"

    # table1 family: method x {one-step, token-by-token}
    lines = [f"{name}: accuracy and KL, one-step vs token-by-token",
             f"{'method':<10}{'NFE':<6}{'accuracy':<10}{'KL':<10}"]
    for r in rows:
        lines.append(f"{r['method']:<10}{r['nfe']:<6}"
                     f"{_fmt(r['accuracy'])}{_fmt(r['kl'])}")
    return "\n".join(lines) + "\n"
