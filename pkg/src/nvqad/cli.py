"""``nvqad`` command line: data generation, teacher training, PTQ, QAD/QAT and reports.

Every subcommand reads an optional JSON run config (``--config``), applies
flag overrides, writes the resolved config to ``<out>/config.json`` and puts
all artifacts under ``--out``. Errors are reported on stderr as one JSON
object and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from nvqad import blockquant as bq
from nvqad import data as D
from nvqad.distill import TrainConfig, TrainingDiverged, evaluate, lr_sweep, train
from nvqad.engine import file_sha256, load_checkpoint, save_checkpoint
from nvqad.model import ModelConfig, QuantPolicy, ToyTransformer, count_quantized_layers

log = logging.getLogger("nvqad")

DATA_SOURCES = ("ground_truth", "teacher_bos", "teacher_prompts", "random", "mix")

DEFAULTS = {
    "seed": 0,
    "model": {},
    "quant": {"format": "nvfp4"},
    "policy": {},
    "train": {},
    "data": {
        "source": "ground_truth",
        "synthetic": {},
        "n_tokens": 1_000_000,
        "val_tokens": 16_640,
        "data_seed": 1,
        "temperature": 1.0,
        "top_p": 1.0,
        "n_prompts": 64,
        "prompt_len": 8,
        "mixture": {},
    },
    "teacher": None,
    "student": None,
    "calibration_batches": 8,
    "lrs": [1e-4, 1e-5, 5e-6, 1e-6],
    "mode": "qad",
}


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


# -- config -------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as f:
                user = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError("bad_config", f"cannot read config {args.config}: {e}")
        if not isinstance(user, dict):
            raise CliError("bad_config", "config must be a JSON object")
        user.pop("command", None)  # stored configs carry the subcommand name
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise CliError("bad_config", f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "lr", None) is not None:
        cfg["train"]["learning_rate"] = args.lr
    if getattr(args, "steps", None) is not None:
        cfg["train"]["steps"] = args.steps
    if getattr(args, "loss", None) is not None:
        cfg["train"]["loss"] = args.loss
    if args.format is not None:
        cfg["quant"]["format"] = args.format
    if args.data_source is not None:
        cfg["data"]["source"] = args.data_source
    if args.mix_weights is not None:
        cfg["data"]["mixture"] = _parse_weights(args.mix_weights)
    if args.n_tokens is not None:
        cfg["data"]["n_tokens"] = args.n_tokens
    if args.teacher is not None:
        cfg["teacher"] = os.path.abspath(args.teacher)
    if getattr(args, "student", None) is not None:
        cfg["student"] = os.path.abspath(args.student)
    if getattr(args, "lrs", None):
        cfg["lrs"] = [float(x) for x in args.lrs.split(",")]
    if getattr(args, "mode", None):
        cfg["mode"] = args.mode
    if cfg["data"]["source"] not in DATA_SOURCES:
        raise CliError("bad_config", f"unknown data source {cfg['data']['source']!r}")
    return cfg


def _parse_weights(text: str) -> dict:
    out = {}
    for part in text.split(","):
        name, _, w = part.partition("=")
        if name not in DATA_SOURCES or name == "mix" or not w:
            raise CliError("bad_config", f"bad mixture entry {part!r} (expected source=weight)")
        out[name] = float(w)
    return out


def _model_config(cfg) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as e:
        raise CliError("bad_config", f"model: {e}")


def _quant(cfg) -> bq.QuantConfig:
    try:
        return bq.QuantConfig.from_name(cfg["quant"]["format"])
    except (KeyError, ValueError) as e:
        raise CliError("bad_config", f"quant: {e}")


def _policy(cfg) -> QuantPolicy:
    try:
        return QuantPolicy.from_dict(cfg["policy"])
    except (TypeError, ValueError) as e:
        raise CliError("bad_config", f"policy: {e}")


def _train_config(cfg, mode: str, **extra) -> TrainConfig:
    t = dict(cfg["train"])
    t.update(extra)
    t["mode"] = mode
    if mode in ("qat", "pretrain"):
        t["loss"] = "ce"
    elif t.get("loss", "kl") == "ce":
        raise CliError("bad_config", "qad needs a distillation loss (kl or mse)")
    t.setdefault("seed", cfg["seed"])
    t.setdefault("seq_len", _model_config(cfg).max_seq_len)
    try:
        return TrainConfig(**t)
    except (TypeError, ValueError) as e:
        raise CliError("bad_config", f"train: {e}")


# -- I/O helpers --------------------------------------------------------------


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _prepare_out(args, cfg) -> str:
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "config.json"), {"command": args.command, **cfg})
    return out


def _load_model(path, cfg, policy=None, quant=None, kind="checkpoint") -> ToyTransformer:
    if not path:
        raise CliError("missing_checkpoint", f"no {kind} given")
    if not os.path.exists(path):
        raise CliError("missing_checkpoint", f"{kind} not found: {path}", code=3)
    try:
        state = load_checkpoint(path)
    except ValueError as e:
        raise CliError("bad_checkpoint", f"{path}: {e}", code=3)
    mc = _model_config(cfg)
    vocab = state.get("tok_emb", np.zeros((0, 0))).shape[0]
    if vocab != mc.vocab_size:
        raise CliError("vocab_mismatch", f"{kind} vocab {vocab} does not match model vocab {mc.vocab_size}")
    try:
        return ToyTransformer.from_state_dict(mc, state, policy=policy, quant=quant)
    except (KeyError, ValueError) as e:
        raise CliError("bad_checkpoint", f"{path}: {e}", code=3)


def _teacher(cfg) -> ToyTransformer:
    t = _load_model(cfg["teacher"], cfg, kind="teacher")
    t.freeze()
    return t


def _source(cfg) -> D.SyntheticSource:
    mc = _model_config(cfg)
    try:
        return D.SyntheticSource(**{"vocab_size": mc.vocab_size, **cfg["data"]["synthetic"]})
    except (TypeError, ValueError) as e:
        raise CliError("bad_config", f"data.synthetic: {e}")


def _prompts(cfg) -> list:
    """Prompt prefixes drawn from held-out-disjoint ground-truth sequences."""
    d = cfg["data"]
    src = _source(cfg)
    ds = D.gen_ground_truth(src, d["n_prompts"] * d["prompt_len"], seed=d["data_seed"] + 1, seq_len=d["prompt_len"])
    return [list(map(int, row)) for row in ds.tokens]


def build_train_data(cfg, source: str | None = None, teacher=None) -> D.Dataset:
    d = cfg["data"]
    mc = _model_config(cfg)
    seq = mc.max_seq_len + 1
    source = source or d["source"]
    n = int(d["n_tokens"])
    if "train_path" in d:
        try:
            return D.load_dataset(d["train_path"])
        except (OSError, ValueError) as e:
            raise CliError("bad_config", f"data.train_path: {e}")
    if source == "ground_truth":
        return D.gen_ground_truth(_source(cfg), n, seed=d["data_seed"], seq_len=seq)
    if source == "random":
        return D.gen_random(n, seed=d["data_seed"], vocab_size=mc.vocab_size, seq_len=seq)
    if source in ("teacher_bos", "teacher_prompts"):
        teacher = teacher or _teacher(cfg)
        mode = "bos_only" if source == "teacher_bos" else "prefix_set"
        return D.gen_from_teacher(
            teacher,
            n,
            prompt_mode=mode,
            seq_len=seq,
            temperature=d["temperature"],
            top_p=d["top_p"],
            seed=d["data_seed"],
            prompts=_prompts(cfg) if mode == "prefix_set" else None,
        )
    weights = d["mixture"]
    if not weights:
        raise CliError("bad_config", "data source 'mix' needs mixture weights")
    names = sorted(weights)
    parts = [build_train_data(cfg, name, teacher) for name in names]
    return D.mix_datasets(parts, [weights[k] for k in names], n_windows=-(-n // seq), seed=d["data_seed"])


def build_val_data(cfg) -> D.Dataset:
    d = cfg["data"]
    if "val_path" in d:
        try:
            return D.load_dataset(d["val_path"], split="val")
        except (OSError, ValueError) as e:
            raise CliError("bad_config", f"data.val_path: {e}")
    mc = _model_config(cfg)
    return D.gen_ground_truth(_source(cfg), int(d["val_tokens"]), seed=d["data_seed"], seq_len=mc.max_seq_len + 1, split="val")


def _jsonl_logger(out):
    path = os.path.join(out, "metrics.jsonl")
    open(path, "w").close()

    def on_record(rec):
        with open(path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")

    return on_record


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg):
    out = _prepare_out(args, cfg)
    train_ds = build_train_data(cfg)
    val_ds = build_val_data(cfg)
    D.save_dataset(os.path.join(out, "train.nvds"), train_ds)
    D.save_dataset(os.path.join(out, "val.nvds"), val_ds)
    summary = {
        "provenance": train_ds.provenance,
        "train_windows": len(train_ds),
        "val_windows": len(val_ds),
        "seq_len": train_ds.seq_len,
        "vocab_size": train_ds.vocab_size,
        "train_sha256": file_sha256(os.path.join(out, "train.nvds")),
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_train_teacher(args, cfg):
    out = _prepare_out(args, cfg)
    mc = _model_config(cfg)
    tc = _train_config(cfg, "pretrain")
    model = ToyTransformer(mc, seed=cfg["seed"])
    data = build_train_data(cfg, "ground_truth")
    best, report = train(model, data, tc, heldout=build_val_data(cfg), on_record=_jsonl_logger(out))
    path = os.path.join(out, "teacher.ckpt")
    save_checkpoint(path, best)
    summary = {**report.summary, "checkpoint": path, "checkpoint_sha256": file_sha256(path), "n_params": model.n_params()}
    _write_json(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_calibrate(args, cfg):
    out = _prepare_out(args, cfg)
    teacher = _teacher(cfg)
    student = teacher.copy(policy=_policy(cfg), quant=_quant(cfg))
    ds = build_train_data(cfg, teacher=teacher)
    bs = cfg["train"].get("batch_size", TrainConfig.batch_size)
    n = int(cfg["calibration_batches"])
    batches = [ds.tokens[i * bs : (i + 1) * bs, :-1] for i in range(n) if i * bs < len(ds)]
    amax = student.calibrate(batches)
    path = os.path.join(out, "calibrated.ckpt")
    save_checkpoint(path, student.state_dict())
    summary = {"act_amax": amax, "batches": len(batches), "checkpoint": path, "checkpoint_sha256": file_sha256(path)}
    _write_json(os.path.join(out, "summary.json"), summary)
    return summary


def _student(cfg, teacher) -> ToyTransformer:
    if cfg["student"]:
        return _load_model(cfg["student"], cfg, policy=_policy(cfg), quant=_quant(cfg), kind="student")
    return teacher.copy(policy=_policy(cfg), quant=_quant(cfg))


def cmd_ptq_eval(args, cfg):
    out = _prepare_out(args, cfg)
    teacher = _teacher(cfg)
    student = _student(cfg, teacher)
    val = build_val_data(cfg)
    bs = cfg["train"].get("eval_batch_size", 64)
    ref = evaluate(teacher, teacher, val, bs)
    ev = evaluate(student, teacher, val, bs)
    summary = {"ptq": ev, "teacher": ref, "format": student.quant.format.value, "layers": count_quantized_layers(student)}
    _write_json(os.path.join(out, "summary.json"), summary)
    return {"ptq": ev, "teacher": ref}


def _run_training(cfg, out, mode, lr=None):
    teacher = _teacher(cfg)
    student = _student(cfg, teacher)
    extra = {"learning_rate": lr} if lr is not None else {}
    tc = _train_config(cfg, mode, **extra)
    data = build_train_data(cfg, teacher=teacher)
    val = build_val_data(cfg)
    teacher_eval = evaluate(teacher, teacher, val, tc.eval_batch_size)
    os.makedirs(out, exist_ok=True)
    best, report = train(student, data, tc, teacher=teacher, heldout=val, on_record=_jsonl_logger(out))
    path = os.path.join(out, "student.ckpt")
    save_checkpoint(path, best)
    save_checkpoint(os.path.join(out, "final.ckpt"), student.state_dict())
    summary = {
        **report.summary,
        "teacher": teacher_eval,
        "format": student.quant.format.value,
        "checkpoint": path,
        "checkpoint_sha256": file_sha256(path),
        "nonfinite_loss": False,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_qad(args, cfg):
    return _run_training(cfg, _prepare_out(args, cfg), "qad")


def cmd_qat(args, cfg):
    return _run_training(cfg, _prepare_out(args, cfg), "qat")


def cmd_eval(args, cfg):
    out = _prepare_out(args, cfg)
    teacher = _teacher(cfg)
    student = _load_model(cfg["student"], cfg, policy=_policy(cfg), quant=_quant(cfg), kind="student")
    ev = evaluate(student, teacher, build_val_data(cfg), cfg["train"].get("eval_batch_size", 64))
    _write_json(os.path.join(out, "summary.json"), ev)
    return ev


def cmd_lr_sweep(args, cfg):
    out = _prepare_out(args, cfg)
    mode = cfg["mode"]
    if mode not in ("qad", "qat"):
        raise CliError("bad_config", "lr-sweep mode must be qad or qat")

    def runner(lr):
        return _run_training(cfg, os.path.join(out, f"lr_{lr:g}"), mode, lr=lr)

    rows = lr_sweep(runner, cfg["lrs"])
    _write_json(os.path.join(out, "summary.json"), {"mode": mode, "rows": rows})
    print(_table(["learning_rate", "kl_vs_teacher", "ce_vs_labels"], [[f"{r['learning_rate']:g}", r["kl_vs_teacher"], r["ce_vs_labels"]] for r in rows]))
    return {"rows": rows}


def cmd_quant_stats(args, cfg):
    out = _prepare_out(args, cfg)
    path = cfg["student"] or cfg["teacher"]
    model = _load_model(path, cfg, policy=_policy(cfg), quant=_quant(cfg))
    q = model.quant
    rows = []
    for layer in count_quantized_layers(model):
        w = model.params[layer["name"]].data
        ts = bq.tensor_scale_from_amax(float(np.abs(w).max()), q)
        st = bq.error_stats(w, bq.fake_quantize(w, q, ts), q, ts)
        rows.append({**layer, **st.as_dict()})
    summary = {"format": q.format.value, "checkpoint": path, "layers": rows}
    _write_json(os.path.join(out, "summary.json"), summary)
    print(_table(["name", "quantized", "mse", "sqnr_db", "clip_fraction"],
                 [[r["name"], r["quantized"], f"{r['mse']:.3e}", f"{r['sqnr_db']:.2f}", f"{r['clip_fraction']:.4f}"] for r in rows]))
    return {"format": q.format.value, "n_layers": len(rows)}


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def build_report(run_dirs) -> dict:
    """Teacher / PTQ / per-run rows with held-out CE and KL vs the teacher."""
    rows = []
    for d in run_dirs:
        path = os.path.join(d, "summary.json")
        if not os.path.exists(path):
            raise CliError("missing_run", f"no summary.json in {d}", code=3)
        with open(path) as f:
            s = json.load(f)
        if "final" not in s or "start" not in s:
            raise CliError("bad_run", f"{d} is not a qad/qat run")
        if not rows:
            rows.append({"method": "teacher", "ce_vs_labels": s["teacher"]["ce_vs_labels"], "kl_vs_teacher": s["teacher"]["kl_vs_teacher"]})
            rows.append({"method": "ptq", "ce_vs_labels": s["start"]["ce_vs_labels"], "kl_vs_teacher": s["start"]["kl_vs_teacher"]})
        rows.append(
            {
                "method": s["mode"],
                "run": os.path.basename(os.path.normpath(d)),
                "loss": s["loss"],
                "provenance": s["provenance"],
                "ce_vs_labels": s["final"]["ce_vs_labels"],
                "kl_vs_teacher": s["final"]["kl_vs_teacher"],
            }
        )
    return {"rows": rows}


def cmd_report(args, cfg):
    rep = build_report(args.runs)
    text = _table(
        ["method", "run", "data", "ce_vs_labels", "kl_vs_teacher"],
        [[r["method"], r.get("run", ""), r.get("provenance", ""), f"{r['ce_vs_labels']:.4f}", f"{r['kl_vs_teacher']:.4f}"] for r in rep["rows"]],
    )
    print(text)
    if args.out:
        out = os.path.abspath(args.out)
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "report.json"), rep)
        with open(os.path.join(out, "report.txt"), "w") as f:
            f.write(text + "\n")
    return rep


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "calibrate": cmd_calibrate,
    "ptq-eval": cmd_ptq_eval,
    "qad": cmd_qad,
    "qat": cmd_qat,
    "eval": cmd_eval,
    "lr-sweep": cmd_lr_sweep,
    "quant-stats": cmd_quant_stats,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvqad", description="NVFP4 quantization, QAD and QAT experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run config JSON")
        s.add_argument("--out", required=name != "report", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--format", choices=["nvfp4", "mxfp4"])
        s.add_argument("--data-source", choices=DATA_SOURCES)
        s.add_argument("--mix-weights", help="e.g. ground_truth=0.5,teacher_bos=0.5")
        s.add_argument("--n-tokens", type=int)
        s.add_argument("--teacher", help="teacher checkpoint")
        if name in ("train-teacher", "qad", "qat", "lr-sweep"):
            s.add_argument("--lr", type=float)
            s.add_argument("--steps", type=int)
        if name in ("qad", "lr-sweep"):
            s.add_argument("--loss", choices=["kl", "ce", "mse"])
        if name in ("ptq-eval", "qad", "qat", "eval", "lr-sweep", "quant-stats"):
            s.add_argument("--student", help="student initial checkpoint (default: the teacher)")
        if name == "lr-sweep":
            s.add_argument("--lrs", help="comma separated learning rates")
            s.add_argument("--mode", choices=["qad", "qat"])
        if name == "report":
            s.add_argument("runs", nargs="+", help="run directories")
    return p


def _thread_limit():
    n = os.environ.get("NVQAD_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise CliError("bad_config", f"NVQAD_THREADS must be an integer, got {n!r}")
    if count < 1:
        raise CliError("bad_config", "NVQAD_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=count)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            cfg = resolve_config(args)
            result = COMMANDS[args.command](args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except CliError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        return e.code
    except TrainingDiverged as e:
        print(json.dumps({"error": "non_finite_loss", "message": str(e), "step": e.step}), file=sys.stderr)
        return 4
    except (ValueError, KeyError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    if args.command not in ("report", "lr-sweep", "quant-stats"):
        print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
