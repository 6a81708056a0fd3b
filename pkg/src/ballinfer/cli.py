"""Command line entry point: generate, train, pretrain, finetune, eval, ablate.

Every option is also a key of an optional JSON config file (``--config``),
with dashes replaced by underscores; flags given on the command line override
the file. Each command prints its effective configuration as one JSON line
prefixed with ``# config:`` before doing any work.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 training divergence. Relative data paths are looked up under
``$BALLINFER_DATA_DIR`` when they do not exist in the working directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DATA_ENV = "BALLINFER_DATA_DIR"


class UsageError(Exception):
    pass


def data_path(p: str | None, for_writing: bool = False) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    base = os.environ.get(DATA_ENV)
    if path.is_absolute() or not base:
        return path
    if for_writing or not path.exists():
        return Path(base) / path
    return path


# option tables -----------------------------------------------------------
# (key, type, default, help); type "list" is a comma separated string list,
# "bool" accepts true/false.

def _gen_options():
    from .synthgen import GenParams
    out = []
    for f in fields(GenParams):
        default = getattr(GenParams(), f.name)
        typ = "pair" if isinstance(default, tuple) else type(default).__name__
        out.append((f.name, typ, default, f"generator {f.name}"))
    return out


MODEL_OPTIONS = [
    ("d", "int", 64, "latent width"),
    ("n_heads", "int", 4, "attention heads"),
    ("d_ff", "int", 128, "feedforward width"),
    ("n_max", "int", 22, "agent slots (padded); raised to the data's agent count if smaller"),
    ("dropout", "float", 0.0, "dropout probability"),
    ("fusion_depth", "int", 2, "fused layers after concatenation"),
    ("head_depth", "int", 2, "linear layers per head"),
    ("positional_encoding", "bool", True, "add sinusoidal temporal encoding"),
]

TRAIN_OPTIONS = [
    ("steps", "int", 2000, "optimizer steps"),
    ("batch_size", "int", 32, "sequences per batch"),
    ("lr", "float", 3e-4, "peak learning rate"),
    ("weight_decay", "float", 1e-4, "decoupled weight decay"),
    ("clip_norm", "float", 1.0, "gradient clip norm (0 disables)"),
    ("warmup_steps", "int", 0, "linear warmup steps before cosine decay"),
    ("seed", "int", 0, "seed for init, batch order, dropout"),
    ("eval_interval", "int", 200, "steps between validation passes"),
    ("w_ball", "float", 1.0, "ball loss weight"),
    ("w_state", "float", 3.0, "state loss weight"),
    ("w_poss", "float", 3.0, "possessor loss weight"),
    ("eval_occlusion", "float", 0.0, "fraction of validation players whose crops are hidden"),
    ("dtype", "str", "float32", "float32 or float64"),
    ("modalities", "list", ["traj", "types", "crops"], "input modalities"),
]

MASK_OPTIONS = [
    ("mask_pattern", "str", "all_frames", "all_frames or random_frames"),
    ("mask_modalities", "str", "crops", "crops, traj or both"),
    ("mask_ratio", "float", 0.5, "masking ratio"),
    ("placeholder_crop", "float", -1.0, "value written into masked crops"),
    ("placeholder_traj", "pair", (-2.0, -2.0), "value written into masked positions"),
    ("mask_seed", "int", None, "masking seed (defaults to --seed)"),
]

DATA_OPTIONS = [
    ("train_data", "str", None, "training sequence file"),
    ("val_data", "str", None, "validation sequence file"),
    ("out_dir", "str", "runs/train", "output directory for checkpoint and log"),
]

COMMANDS = {
    "generate": [("count", "int", None, "number of sequences (single-file mode)"),
                 ("splits", "list", None, "train,val,test counts (directory mode)"),
                 ("out", "str", "data", "output file, or directory in --splits mode"),
                 ("start_id", "int", 0, "first sequence id (single-file mode)"),
                 ("format", "str", "bin", "bin or jsonl")],
    "train": DATA_OPTIONS + TRAIN_OPTIONS + MODEL_OPTIONS,
    "pretrain": DATA_OPTIONS + TRAIN_OPTIONS + MODEL_OPTIONS + MASK_OPTIONS,
    "finetune": DATA_OPTIONS + [o for o in TRAIN_OPTIONS if o[0] != "modalities"]
                + [("init_checkpoint", "str", None, "checkpoint to start from")],
    "eval": [("checkpoint", "str", None, "model checkpoint"),
             ("data", "str", None, "sequence file to evaluate"),
             ("split", "str", "test", "split label written into the CSV"),
             ("csv", "str", "eval.csv", "report CSV path"),
             ("dump_trajectories", "str", None, "per-frame prediction dump path"),
             ("occlude_crops", "float", 0.0, "fraction of players whose crops are hidden"),
             ("aggregation", "str", "pooled", "pooled or per_sequence accuracies"),
             ("baselines", "bool", True, "append oracle-input baseline rows")],
    "ablate": [("grid", "str", "masking", "masking, modality or both"),
               ("train_data", "str", None, "training sequence file"),
               ("val_data", "str", None, "validation sequence file"),
               ("test_data", "str", None, "test sequence file (optional)"),
               ("seeds", "int", 3, "number of training seeds"),
               ("jobs", "int", 1, "concurrent runs"),
               ("pretrain_fraction", "float", 0.5, "share of steps spent in masked pre-training"),
               ("out_dir", "str", "runs/ablate", "output directory")]
              + [o for o in TRAIN_OPTIONS if o[0] != "modalities"] + MODEL_OPTIONS
              + [o for o in MASK_OPTIONS if o[0] == "mask_ratio"],
}


def _parse_value(typ: str, raw):
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    if typ == "bool":
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes"):
            return True
        if str(raw).lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ == "list":
        return [s for s in raw.split(",") if s] if isinstance(raw, str) else list(raw)
    if typ == "pair":
        vals = [float(s) for s in raw.split(",")] if isinstance(raw, str) else [float(v) for v in raw]
        if len(vals) != 2:
            raise ValueError(f"expected two comma separated numbers, got {raw!r}")
        return tuple(vals)
    return raw


def options_for(command: str):
    opts = list(COMMANDS[command])
    if command == "generate":
        opts += _gen_options()
    return opts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ballinfer", description="Ball trajectory, state and possessor inference.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file of flat option keys")
        for key, typ, default, help_ in options_for(name):
            shown = default if not isinstance(default, (list, tuple)) else ",".join(map(str, default))
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS,
                           help=f"{help_} (default: {shown})")
    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = {k: (t, d) for k, t, d, _ in options_for(command)}
    cfg = {k: d for k, (t, d) in opts.items()}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            from_file = json.load(fh)
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {unknown}")
        cfg.update(from_file)
    for k in opts:
        if hasattr(args, k):
            cfg[k] = getattr(args, k)
    try:
        return {k: (None if v is None else _parse_value(opts[k][0], v)) for k, v in cfg.items()}
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def print_header(command: str, cfg: dict) -> None:
    printable = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    print(f"# config: {json.dumps({'command': command, **printable}, sort_keys=True)}", flush=True)


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# builders ------------------------------------------------------------------

def gen_params(cfg: dict):
    from .synthgen import GenParams
    return GenParams(**{f.name: cfg[f.name] for f in fields(GenParams)})


def model_config(cfg: dict):
    from .model import ModelConfig
    return ModelConfig(**{k: cfg[k] for k, *_ in MODEL_OPTIONS})


def train_config(cfg: dict, phase: str, mask=None):
    from .losses import LossWeights
    from .training import TrainConfig
    keys = [k for k, *_ in TRAIN_OPTIONS if not k.startswith("w_") and k in cfg]
    kw = {k: cfg[k] for k in keys}
    if "modalities" in kw:
        kw["modalities"] = tuple(kw["modalities"])
    return TrainConfig(phase=phase, mask=mask, weights=LossWeights(cfg["w_ball"], cfg["w_state"], cfg["w_poss"]),
                       init_checkpoint=cfg.get("init_checkpoint"), **kw)


def mask_spec(cfg: dict):
    from .masking import MaskSpec
    seed = cfg["mask_seed"] if cfg.get("mask_seed") is not None else cfg["seed"]
    return MaskSpec(cfg["mask_pattern"], cfg["mask_modalities"], cfg["mask_ratio"], cfg["placeholder_crop"],
                    cfg["placeholder_traj"], seed)


def load(path: str):
    from .seqio import read_sequences
    return read_sequences(data_path(path))


# commands -----------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    from .seqio import write_sequences, write_sequences_jsonl
    from .synthgen import generate_dataset, split_datasets, summarize
    params = gen_params(cfg)
    writer = {"bin": write_sequences, "jsonl": write_sequences_jsonl}.get(cfg["format"])
    if writer is None:
        raise UsageError("--format must be bin or jsonl")
    if (cfg["count"] is None) == (cfg["splits"] is None):
        raise UsageError("give exactly one of --count or --splits")
    out = data_path(cfg["out"], for_writing=True)
    if cfg["count"] is not None:
        if cfg["count"] < 1:
            raise UsageError("--count must be at least 1")
        parts = {"": generate_dataset(params, cfg["count"], cfg["start_id"])}
        out.parent.mkdir(parents=True, exist_ok=True)
        targets = {"": out}
    else:
        counts = [int(c) for c in cfg["splits"]]
        if len(counts) != 3 or min(counts) < 1:
            raise UsageError("--splits needs three positive counts: train,val,test")
        out.mkdir(parents=True, exist_ok=True)
        parts = split_datasets(params, *counts)
        targets = {k: out / f"{k}.{cfg['format']}" for k in parts}
    for k, seqs in parts.items():
        writer(targets[k], seqs)
        summary = summarize(seqs)
        label = f"{k} " if k else ""
        print(f"{label}{targets[k]}: {summary['sequences']} sequences, {summary['frames']} frames")
        for name, frac in summary["state_fractions"].items():
            print(f"  {name:<13} {frac * 100:6.2f}% of frames")
    return EXIT_OK


def cmd_train(cfg: dict, phase: str) -> int:
    from .checkpoint import load_checkpoint
    from .training import train
    _require(cfg, "train_data", "val_data")
    init_model, mask, mcfg = None, None, None
    if phase == "finetune":
        _require(cfg, "init_checkpoint")
        init_model, _ = load_checkpoint(data_path(cfg["init_checkpoint"]))
        cfg = {**cfg, "modalities": list(init_model.cfg.modalities)}
    else:
        mcfg = model_config(cfg)
    if phase == "pretrain":
        mask = mask_spec(cfg)
    tcfg = train_config(cfg, phase, mask)
    train_seqs, val_seqs = load(cfg["train_data"]), load(cfg["val_data"])

    def show(rec):
        v = rec["val"]
        print(f"step {rec['step']:>6}  val_loss {rec['val_loss']['total']:.4f}  ade {v['ade']:.3f} m  "
              f"state {v['state_acc']:.2f}%  poss {v['poss_acc']:.2f}%", flush=True)

    res = train(tcfg, train_seqs, val_seqs, mcfg, init_model=init_model, out_dir=cfg["out_dir"], log_fn=show)
    print(f"best step {res.best_step}  val_loss {res.best_val_loss:.4f}  checkpoint {res.checkpoint}")
    return EXIT_OK


def trajectory_rows(seqs, preds, half):
    """Per-frame rows of (seq_id, t, predicted and ground-truth ball, state, possessor)."""
    from .losses import argmax_lowest
    ball = preds.ball.double().numpy() * half
    states = argmax_lowest(preds.state_logits.double().numpy())
    poss = argmax_lowest(preds.poss_logits.double().numpy())
    for b, s in enumerate(seqs):
        gt = s.ball_positions * half
        for t in range(s.n_frames):
            yield (s.seq_id, t, ball[b, t, 0], ball[b, t, 1], gt[t, 0], gt[t, 1], int(states[b, t]),
                   int(s.ball_states[t]), int(poss[b, t]), int(s.possessor[t]))


DUMP_COLUMNS = ["seq_id", "t", "pred_x", "pred_y", "gt_x", "gt_y", "pred_state", "gt_state", "pred_possessor",
                "gt_possessor"]


def cmd_eval(cfg: dict) -> int:
    from .baselines import ball_centroid_baseline, nearest_player_possessor
    from .checkpoint import load_checkpoint
    from .datamodel import denormalize_sequence, pad_to
    from .losses import EvalReport, evaluate, write_reports_csv
    from .model import predict
    from .training import occlude, prepare
    _require(cfg, "checkpoint", "data")
    model, _ = load_checkpoint(data_path(cfg["checkpoint"]))
    loaded = load(cfg["data"])
    n = max(s.n_agents for s in loaded)
    raw = [pad_to(denormalize_sequence(s) if s.normalized else s, n) for s in loaded]
    seqs = occlude(prepare(raw), cfg["occlude_crops"])
    preds = predict(model, seqs)
    half = np.array(seqs[0].pitch.half_extent)
    gt_ball = np.stack([s.ball_positions for s in raw])
    states = np.stack([s.ball_states for s in raw])
    poss = np.stack([s.possessor for s in raw])
    report = evaluate(preds.ball.double().numpy() * half, preds.state_logits.double().numpy(),
                      preds.poss_logits.double().numpy()[..., :n], gt_ball, states, poss, split=cfg["split"],
                      aggregation=cfg["aggregation"])
    reports = [report]
    extra = [{"predictor": "model", "occlude_crops": cfg["occlude_crops"]}]
    if cfg["baselines"]:
        # ball at the player centroid, possessor nearest to the true ball; state is not predicted
        cen = np.stack([ball_centroid_baseline(s.positions, s.agent_valid) for s in raw])
        near = np.stack([nearest_player_possessor(s.positions, s.ball_positions, s.agent_valid) for s in raw])
        b = evaluate(cen, np.zeros(states.shape + (3,)), np.eye(n)[near], gt_ball, states, poss,
                     split=cfg["split"], aggregation=cfg["aggregation"], oracle_input=True)
        reports.append(EvalReport(b.split, b.ade, b.max_err, float("nan"), b.poss_acc, [float("nan")] * 3, True))
        extra.append({"predictor": "centroid+nearest", "occlude_crops": cfg["occlude_crops"]})
    csv_path = Path(cfg["csv"])
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_reports_csv(csv_path, reports, extra)
    print(f"ade {report.ade:.3f} m  maxerr {report.max_err:.3f} m  state {report.state_acc:.2f}%  "
          f"poss {report.poss_acc:.2f}%  -> {csv_path}")
    if cfg["dump_trajectories"]:
        dump = Path(cfg["dump_trajectories"])
        dump.parent.mkdir(parents=True, exist_ok=True)
        with open(dump, "w") as fh:
            fh.write(" ".join(DUMP_COLUMNS) + "\n")
            for row in trajectory_rows(seqs, preds, half):
                fh.write("%d %d %.4f %.4f %.4f %.4f %d %d %d %d\n" % row)
        print(f"trajectories -> {dump}")
    return EXIT_OK


def cmd_ablate(cfg: dict) -> int:
    from .ablation import BASELINES, GRIDS, RESULT_COLUMNS, SEED_COLUMNS, run_ablation_grid, write_rows
    _require(cfg, "train_data", "val_data")
    names = ["masking", "modality"] if cfg["grid"] == "both" else [cfg["grid"]]
    if any(n not in GRIDS for n in names):
        raise UsageError("--grid must be masking, modality or both")
    if cfg["seeds"] < 1 or cfg["jobs"] < 1:
        raise UsageError("--seeds and --jobs must be positive")
    train_seqs, val_seqs = load(cfg["train_data"]), load(cfg["val_data"])
    test_seqs = load(cfg["test_data"]) if cfg.get("test_data") else []
    base = train_config({**cfg, "modalities": ["traj", "types", "crops"]}, "scratch")
    mcfg = model_config(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    seeds = list(range(cfg["seed"], cfg["seed"] + cfg["seeds"]))

    def show(rec):
        print(f"{rec['config']:<22} seed {rec['seed']}  val ade {rec['val_ade_m']:.3f} m  "
              f"state {rec['val_state_acc']:.2f}%  poss {rec['val_poss_acc']:.2f}%", flush=True)

    for name in names:
        entries = GRIDS[name](cfg["mask_ratio"]) if name == "masking" else GRIDS[name]()
        summary, per_seed = run_ablation_grid(entries, base, mcfg, train_seqs, val_seqs, test_seqs, seeds,
                                              BASELINES[name], cfg["jobs"], out, cfg["pretrain_fraction"], cache,
                                              log_fn=show)
        write_rows(out / f"{name}_results.csv", summary, RESULT_COLUMNS)
        write_rows(out / f"{name}_per_seed.csv", per_seed, SEED_COLUMNS)
        print(f"{name} grid -> {out / f'{name}_results.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .cropfeat import FeatureDimensionError
    from .datamodel import SequenceError
    from .model import ShapeMismatchError
    from .seqio import ContainerError
    from .training import TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args.command, args)
        print_header(args.command, cfg)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command in ("train", "pretrain", "finetune"):
            return cmd_train(cfg, "scratch" if args.command == "train" else args.command)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_ablate(cfg)
    except TrainingDiverged as exc:
        print(f"error: training diverged at step {exc.step}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContainerError, SequenceError, FeatureDimensionError, ShapeMismatchError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError, TypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
