"""Command-line entry point: ``hybvit <command> [--config FILE] [--key value ...]``.

Commands: train, sample, eval, ood, attack, nll, inspect. Every key may come
from the flat config file or a ``--key value`` flag (flags win); unknown keys
are errors. Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric failure.
"""

from __future__ import annotations

import logging
import os
import sys
from dataclasses import fields

import numpy as np

from .autodiff import ContractError, NumericError
from .checkpoint import (CheckpointError, atomic_write, checkpoint_from_state,
                         load_checkpoint, model_from_checkpoint, save_checkpoint,
                         state_from_checkpoint)
from .config import UsageError, parse_bool, read_config
from .data import DataFormatError, Dataset, load_cifar_binary, make_interpolation, make_synthetic
from .diffusion import bits_per_dim, make_schedule, vlb_terms
from .evaluation import EvalConfig, EvalReport, evaluate, logpx_proxy
from .imageio import save_samples
from .sampling import SampleRequest, sample
from .training import TrainConfig, Trainer, new_state
from .vit import ViT, ViTConfig

log = logging.getLogger("hybvit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _csv_floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _csv(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


_VIT_KEYS = {f.name: (f.type if f.type in ("int", "float") else "str", f.default) for f in fields(ViTConfig)}
_TRAIN_KEYS = {f.name: (f.type if f.type in ("int", "float") else "str", f.default) for f in fields(TrainConfig)}
_CONVERT = {"int": int, "float": float, "str": str, "bool": parse_bool, "floats": _csv_floats, "list": _csv}

_DATA = {"data": ("str", None), "data_n": ("int", 256), "data_seed": ("int", 1)}
_EVAL_COMMON = {**_DATA, "checkpoint": ("str", None), "report": ("str", ""), "seed": ("int", 0),
                "threads": ("int", 1), "vlb_draws": ("int", 32)}
_ATTACK = {"norms": ("list", "linf,l2"), "pgd_steps": ("int", 40), "pgd_step_frac": ("float", 0.1),
           "linf_eps": ("floats", "1,2,4,8,12,16,22,30"),
           "l2_eps": ("floats", "50,100,150,200,250,300,350,400")}

SCHEMAS = {
    "train": {**_VIT_KEYS, **_TRAIN_KEYS, "data": ("str", None), "data_n": ("int", 64),
              "data_seed": ("int", 0), "out_dir": ("str", None), "checkpoint_every": ("int", 0),
              "resume": ("str", ""), "max_steps": ("int", 0), "threads": ("int", 1),
              "dtype": ("str", "float32")},
    "sample": {"checkpoint": ("str", None), "out_dir": ("str", None), "count": ("int", 16),
               "seed": ("int", 0), "clip_x0": ("bool", "false"), "grid": ("bool", "true"),
               "threads": ("int", 1)},
    "eval": {**_EVAL_COMMON, **_ATTACK, "ood": ("list", ""), "n_bins": ("int", 20),
             "bpd": ("bool", "true"), "robustness": ("bool", "true")},
    "ood": {**_EVAL_COMMON, "ood": ("list", None)},
    "attack": {**_EVAL_COMMON, **_ATTACK},
    "nll": {**_EVAL_COMMON, "mode": ("str", "estimate")},
    "inspect": {"checkpoint": ("str", None)},
}

USAGE = """usage: hybvit <command> [--config FILE] [--key value ...]
commands: train, sample, eval, ood, attack, nll, inspect
use `hybvit <command> --help` to list the keys of a command"""


def parse_args(argv: list[str]):
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError(USAGE)
    cmd, rest = argv[0], argv[1:]
    if cmd not in SCHEMAS:
        raise UsageError(f"unknown command {cmd!r}\n{USAGE}")
    schema = SCHEMAS[cmd]
    flags, config_path, given = {}, None, set()
    i = 0
    while i < len(rest):
        tok = rest[i]
        if tok in ("-h", "--help"):
            keys = "\n".join(f"  --{k} (default: {d})" for k, (_, d) in schema.items())
            raise UsageError(f"keys for {cmd}:\n  --config FILE\n{keys}")
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if not eq:
            if i + 1 >= len(rest):
                raise UsageError(f"flag --{key} needs a value")
            value = rest[i + 1]
            i += 1
        i += 1
        if key == "config":
            config_path = value
            continue
        if key not in schema:
            raise UsageError(f"unknown flag --{key} for command {cmd}")
        flags[key] = value
    values = {}
    if config_path:
        for key, value in read_config(config_path).items():
            key = key.replace("-", "_")
            if key not in schema:
                raise UsageError(f"{config_path}: unknown key {key!r} for command {cmd}")
            values[key] = value
    values.update(flags)
    given = set(values)
    out = {}
    for key, (kind, default) in schema.items():
        raw = values.get(key, default)
        if raw is None:
            raise UsageError(f"{cmd}: missing required key --{key}")
        try:
            out[key] = _CONVERT[kind](raw) if isinstance(raw, str) else raw
        except ValueError as err:
            raise UsageError(f"bad value for --{key}: {raw!r} ({err})") from err
    return cmd, out, given


# ------------------------------------------------------------------ helpers

def load_dataset(spec: str, n: int, seed: int, vit_config: ViTConfig, split: str = "train") -> Dataset:
    if spec.startswith("synthetic:"):
        kind = spec.split(":", 1)[1]
        ds = make_synthetic(kind, n, seed, vit_config.image_size, vit_config.channels,
                            vit_config.num_classes)
    else:
        parts = [load_cifar_binary(p, max(vit_config.num_classes - 1, 9)) for p in spec.split(",")]
        ds = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                     provenance=spec, num_classes=parts[0].num_classes)
    ds.split = split
    expected = (vit_config.image_size, vit_config.image_size, vit_config.channels)
    if ds.image_shape != expected:
        raise DataFormatError(f"{spec}: images are {ds.image_shape}, model expects {expected}")
    return ds


def _ckpt_and_model(path):
    ckpt = load_checkpoint(path)
    return ckpt, model_from_checkpoint(ckpt), make_schedule(ckpt.schedule_kind, ckpt.timesteps)


def _write_report(path, report: EvalReport):
    text = report.to_text()
    if path:
        atomic_write(path, text)
        log.info("report written to %s", path)
    else:
        sys.stdout.write(text)


def _eval_config(opts) -> EvalConfig:
    return EvalConfig(
        n_bins=opts.get("n_bins", 20), pgd_steps=opts.get("pgd_steps", 40),
        pgd_step_frac=opts.get("pgd_step_frac", 0.1), norms=opts.get("norms", ("linf", "l2")),
        linf_eps=tuple(e / 255 for e in opts.get("linf_eps", ())),
        l2_eps=tuple(e / 255 for e in opts.get("l2_eps", ())),
        vlb_draws=opts["vlb_draws"], seed=opts["seed"], threads=opts["threads"],
        compute_bpd=opts.get("bpd", False), compute_robustness=opts.get("robustness", False),
    )


def _ood_sets(names, test: Dataset, opts, vit_config) -> dict:
    out = {}
    for i, name in enumerate(names):
        if name == "interp":
            out[name] = make_interpolation(test, len(test), opts["seed"])
        else:
            out[name] = load_dataset(name, opts["data_n"], opts["data_seed"] + 1000 + i, vit_config, "ood")
    return out


# ----------------------------------------------------------------- commands

def cmd_train(opts, given):
    if "warmup_epochs" not in given:
        opts["warmup_epochs"] = min(opts["warmup_epochs"], opts["epochs"])
    try:
        vit_config = ViTConfig(**{k: opts[k] for k in _VIT_KEYS})
        config = TrainConfig(**{k: opts[k] for k in _TRAIN_KEYS})
    except ContractError as err:
        raise UsageError(str(err)) from err
    dtype = {"float32": np.float32, "float64": np.float64}.get(opts["dtype"])
    if dtype is None:
        raise UsageError(f"dtype must be float32 or float64, got {opts['dtype']!r}")
    dataset = load_dataset(opts["data"], opts["data_n"], opts["data_seed"], vit_config)
    out_dir = opts["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    if opts["resume"]:
        ckpt = load_checkpoint(opts["resume"])
        if ckpt.vit_config != vit_config:
            raise CheckpointError(f"{opts['resume']}: model config differs from the requested one")
        state = state_from_checkpoint(ckpt, config)
    else:
        state = new_state(ViT(vit_config, seed=config.seed, dtype=dtype), config)
    trainer = Trainer(state, dataset)
    max_steps = opts["max_steps"] or None
    log_path = os.path.join(out_dir, "train.log")
    log.info("training %s: %d params, %d steps/epoch, %d steps total", config.mode,
             state.model.num_params(), trainer.steps_per_epoch, trainer.total_steps)
    for st in trainer.run(max_steps=max_steps, checkpoint_every=opts["checkpoint_every"], log_path=log_path):
        ckpt = checkpoint_from_state(st)
        save_checkpoint(os.path.join(out_dir, f"ckpt_{st.step:08d}.hvit"), ckpt)
        save_checkpoint(os.path.join(out_dir, "latest.hvit"), ckpt)
        log.info("step %d: checkpoint saved (running ce %.4g, noise %.4g)", st.step,
                 st.running["ce"], st.running["noise"])
    return EXIT_OK


def cmd_sample(opts, given):
    ckpt, model, schedule = _ckpt_and_model(opts["checkpoint"])
    req = SampleRequest(count=opts["count"], seed=opts["seed"], clip_x0=opts["clip_x0"],
                        threads=opts["threads"])
    images = sample(model, schedule, req)
    paths = save_samples(opts["out_dir"], images, opts["seed"], grid=opts["grid"])
    log.info("wrote %d files to %s", len(paths), opts["out_dir"])
    return EXIT_OK


def _test_set(opts, ckpt):
    return load_dataset(opts["data"], opts["data_n"], opts["data_seed"], ckpt.vit_config, "test")


def cmd_eval(opts, given):
    ckpt, model, schedule = _ckpt_and_model(opts["checkpoint"])
    test = _test_set(opts, ckpt)
    ood = _ood_sets(opts["ood"], test, opts, ckpt.vit_config)
    report = evaluate(model, {"test": test, "ood": ood}, _eval_config(opts), schedule)
    _write_report(opts["report"], report)
    return EXIT_OK


def cmd_ood(opts, given):
    ckpt, model, schedule = _ckpt_and_model(opts["checkpoint"])
    test = _test_set(opts, ckpt)
    cfg = _eval_config(opts)
    cfg.compute_bpd = cfg.compute_robustness = False
    ood = _ood_sets(opts["ood"], test, opts, ckpt.vit_config)
    _write_report(opts["report"], evaluate(model, {"test": test, "ood": ood}, cfg, schedule))
    return EXIT_OK


def cmd_attack(opts, given):
    ckpt, model, _ = _ckpt_and_model(opts["checkpoint"])
    test = _test_set(opts, ckpt)
    cfg = _eval_config(opts)
    cfg.compute_bpd, cfg.compute_robustness = False, True
    _write_report(opts["report"], evaluate(model, {"test": test}, cfg))
    return EXIT_OK


def cmd_nll(opts, given):
    ckpt, model, schedule = _ckpt_and_model(opts["checkpoint"])
    test = _test_set(opts, ckpt)
    x = test.model_scale(dtype=np.float64)
    report = EvalReport(accuracy=float((model.predict_logits(x).argmax(axis=1) == test.labels).mean())
                        if test.labels is not None else float("nan"))
    if opts["mode"] == "exact":
        terms = vlb_terms(schedule, model, x, np.random.default_rng(opts["seed"]))
        report.bits_per_dim = float(terms.bits_per_dim.mean())
        report.extra.update(L0=float(terms.L0.mean()), LT=float(terms.LT.mean()),
                            Lt_sum=float(terms.Lt.sum(axis=1).mean()))
    elif opts["mode"] == "estimate":
        cfg = _eval_config(opts)
        nats = -logpx_proxy(model, schedule, x, cfg.seed, cfg.vlb_draws)
        report.bits_per_dim = float(bits_per_dim(nats, int(np.prod(x.shape[1:]))).mean())
    else:
        raise UsageError(f"nll mode must be 'exact' or 'estimate', got {opts['mode']!r}")
    _write_report(opts["report"], report)
    return EXIT_OK


def cmd_inspect(opts, given):
    ckpt = load_checkpoint(opts["checkpoint"])
    out = [f"checkpoint: {opts['checkpoint']}", f"step: {ckpt.step}  epoch: {ckpt.epoch}",
           f"schedule: {ckpt.schedule_kind}  T={ckpt.timesteps}", "model:"]
    out += [f"  {k} = {v}" for k, v in ckpt.vit_config.to_dict().items()]
    if ckpt.train_config is not None:
        out.append(f"training (digest {ckpt.train_config.digest()[:12]}):")
        out += [f"  {k} = {v}" for k, v in ckpt.train_config.to_dict().items()]
    total = 0
    out.append("parameters:")
    for name, arr in ckpt.params.items():
        total += arr.size
        out.append(f"  {name:<28} {str(arr.shape):<14} {arr.dtype}  |w|={np.abs(arr).mean():.4g}")
    out.append(f"total parameters: {total}")
    print("\n".join(out))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "ood": cmd_ood,
            "attack": cmd_attack, "nll": cmd_nll, "inspect": cmd_inspect}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cmd, opts, given = parse_args(argv)
        return COMMANDS[cmd](opts, given)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, CheckpointError, ContractError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
