"""``cmmd`` command line: synth, train, eval, generate, collapse, gradcheck.

Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autograd
from .autograd import CheckpointError
from .config import ConfigError, RunConfig
from .data import (
    DataFormatError, Dataset, ModalityConfig, SynthConfig, gen_synth_multimodal, load_dataset,
    save_dataset, standardize_dataset, write_matrix,
)
from .diagnostics import CollapseConfig, collapse_report, evaluate
from .mmd import KernelConfig
from .model import Batch, CmmdModel, ModalityPartition
from .objective import OMEGA_GRID, ObjectiveConfig, cmmd_loss
from .trainer import (
    TERMS, TrainConfig, TrainHistory, TrainingError, fit, load_checkpoint, save_checkpoint, two_stage_fit,
)

log = logging.getLogger("cmmd")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CONFIG_NAME = "resolved_config.cfg"


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.apply_overrides(getattr(args, "set", None))
    cfg.apply_env()
    return cfg


def _echo(cfg: RunConfig, out_dir: Path, sections=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(cfg.dump(sections), encoding="utf-8")


# ---------------------------------------------------------------------------
# builders

def synth_config(s: dict, rows: int) -> SynthConfig:
    hetero = set(s["hetero_modalities"])
    if hetero and s["noise_var_range"] is None:
        raise ConfigError("synth.hetero_modalities needs synth.noise_var_range")
    mods = []
    for name, width in s["modalities"]:
        rng_range = tuple(s["noise_var_range"]) if name in hetero else None
        if rng_range is not None and len(rng_range) != 2:
            raise ConfigError("synth.noise_var_range needs two values")
        mods.append(ModalityConfig(name, int(width), s["depth"], s["noise"], rng_range))
    return SynthConfig(tuple(mods), s["classes"], s["latent_dim"], s["separation"],
                       s["label_noise"], rows, s["seed"])


def build_synth(s: dict) -> tuple[Dataset, Dataset]:
    names = [n for n, _ in s["modalities"]]
    observed = s["observed"] or names[:1]
    missing = s["missing"] or tuple(n for n in names if n not in observed)
    train = gen_synth_multimodal(synth_config(s, s["rows"]), observed, missing, stream=1)
    test = gen_synth_multimodal(synth_config(s, s["test_rows"]), observed, missing, stream=2)
    if s["standardize"]:
        standardize_dataset(train, test)
    return train, test


def build_model(cfg: RunConfig, ds: Dataset) -> CmmdModel:
    d, m = cfg.section("data"), cfg.section("model")
    observed = d["observed"] or ds.observed
    missing = d["missing"] or ds.missing or tuple(n for n in ds.x if n not in observed)
    families = dict(ds.families)
    families.update(dict(m["families"]))
    partition = ModalityPartition(ds.widths, tuple(observed), tuple(missing))
    class_mode = ds.label_mode
    num_classes = ds.num_classes if class_mode != "single-sigmoid" else 1
    return CmmdModel(partition, families, m["latent_dim"], num_classes, class_mode,
                     m["encoder_hidden"], m["prior_hidden"], m["decoder_hidden"], m["classifier_hidden"],
                     m["activation"], m["dropout"], m["prior_mode"], m["fixed_decoder_var"],
                     m["classify_from"])


def objective_config(cfg: RunConfig, omega: float | None = None) -> ObjectiveConfig:
    o = cfg.section("objective")
    kernel = KernelConfig(o["bandwidth"], o["sigma2"], o["scales"])
    return ObjectiveConfig(o["omega"] if omega is None else omega, o["alpha"], o["lambda"], kernel, o["estimator"])


def train_config(cfg: RunConfig, omega: float | None = None) -> TrainConfig:
    t = cfg.section("trainer")
    return TrainConfig(t["epochs"], t["batch_size"], t["seed"], t["lr"], objective_config(cfg, omega),
                       t["shuffle"], t["eval_every"], t["clip_norm"], t["eval_samples"])


def collapse_config(cfg: RunConfig) -> CollapseConfig:
    d = cfg.section("diagnostics")
    eps = tuple(float(e) for e in np.linspace(d["eps_min"], d["eps_max"], d["eps_points"]))
    return CollapseConfig(d["delta"], eps)


def metrics_rows(history: TrainHistory, tcfg: TrainConfig) -> tuple[list[str], list[list]]:
    obj = tcfg.objective
    extra = sorted({k for r in history.rows for k in r} - set(TERMS) - {"epoch", "wall_clock"})
    header = ["epoch", *TERMS, "omega", "kl_weight", "mmd_weight", "mmd_contribution", *extra]
    mmd_weight = (1.0 - obj.omega) * obj.lam
    rows = []
    for r in history.rows:
        rows.append([r["epoch"], *(r[k] for k in TERMS), obj.omega, obj.omega, mmd_weight,
                     mmd_weight * r["mmd_term"], *(r.get(k, "") for k in extra)])
    return header, rows


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    s = cfg.section("synth")
    out = Path(args.out)
    train, test = build_synth(s)
    _echo(cfg, out, ["synth"])
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} train and {len(test)} test rows to {out}")
    return EXIT_OK


def _run_training(cfg: RunConfig, model: CmmdModel, train: Dataset, eval_data, tcfg: TrainConfig,
                  out: Path, resume=None, unlabeled: Dataset | None = None) -> TrainHistory:
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.ckpt"
    t = cfg.section("trainer")
    if t["stage"] == "two_stage":
        if unlabeled is None:
            raise ConfigError("trainer.stage = two_stage needs --unlabeled data")
        stage1 = replace(tcfg, epochs=t["stage1_epochs"] or tcfg.epochs)
        _, history, state = two_stage_fit(model, unlabeled, train, stage1, tcfg, eval_data)
        save_checkpoint(model, state, ckpt, tcfg.epochs)
    elif t["stage"] == "single":
        state, start, history = None, 0, TrainHistory()
        if resume is not None:
            loaded, state, start = load_checkpoint(resume, train)
            if loaded.manifest() != model.manifest():
                raise ConfigError(f"{resume}: architecture differs from the configured model")
            model.params = loaded.params
            history = _read_history(out / "metrics.csv", start)
        history, _ = fit(model, train, tcfg, state, start, eval_data, ckpt, history=history)
    else:
        raise ConfigError(f"unknown trainer.stage {t['stage']!r}")
    header, rows = metrics_rows(history, tcfg)
    _write_csv(out / "metrics.csv", header, rows)
    _write_csv(out / "history.csv", ["epoch", "wall_clock"],
               [[r["epoch"], r.get("wall_clock", 0.0)] for r in history.rows])
    return history


def _read_history(path: Path, upto: int) -> TrainHistory:
    history = TrainHistory()
    if not path.exists():
        return history
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            epoch = int(rec["epoch"])
            if epoch >= upto:
                break
            row = {"epoch": epoch, **{k: float(rec[k]) for k in TERMS}}
            for k, v in rec.items():
                if ":" in k and v != "":
                    row[k] = float(v)
            history.rows.append(row)
    return history


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    train = load_dataset(args.data)
    eval_data = load_dataset(args.eval_data) if args.eval_data else None
    unlabeled = load_dataset(args.unlabeled) if args.unlabeled else None
    _echo(cfg, out)
    seed = cfg.section("trainer")["seed"]
    if not args.omega_sweep:
        model = build_model(cfg, train).init_params(np.random.default_rng(seed))
        tcfg = train_config(cfg)
        _run_training(cfg, model, train, eval_data, tcfg, out, args.resume, unlabeled)
        print(f"trained {tcfg.epochs} epochs; checkpoint in {out / 'checkpoint.ckpt'}")
        return EXIT_OK
    summary = []
    for omega in OMEGA_GRID:
        model = build_model(cfg, train).init_params(np.random.default_rng(seed))
        tcfg = train_config(cfg, omega)
        history = _run_training(cfg, model, train, eval_data, tcfg, out / f"omega_{omega:.1f}", None, unlabeled)
        last = history.rows[-1]
        row = [omega, *(last[k] for k in TERMS)]
        if eval_data is not None:
            report, _ = evaluate(model, eval_data.batch(), np.random.default_rng([seed, 1]))
            row += [";".join(f"{m}:{t}={v!r}" for m, t, v in report.rows)]
        else:
            row += [""]
        summary.append(row)
    _write_csv(out / "sweep.csv", ["omega", *TERMS, "eval"], summary)
    print(f"omega sweep over {len(OMEGA_GRID)} values written to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data)
    model, _, _ = load_checkpoint(args.checkpoint, data)
    d = cfg.section("diagnostics")
    report, _ = evaluate(model, data.batch(), np.random.default_rng(d["seed"]), d["samples"])
    out = Path(args.out)
    _echo(cfg, out, ["diagnostics"])
    _write_csv(out / "metrics.csv", ["metric", "target", "value"], report.rows)
    for m, t, v in report.rows:
        print(f"{m}\t{t}\t{v:.6f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data)
    model, _, _ = load_checkpoint(args.checkpoint, data)
    d = cfg.section("diagnostics")
    x_O = {k: data.x[k] for k in model.partition.observed}
    generated, _, _ = model.forward_test(x_O, np.random.default_rng(d["seed"]), d["samples"])
    out = Path(args.out)
    _echo(cfg, out, ["diagnostics"])
    for name, values in generated.items():
        write_matrix(out / f"{name}.mat", values)
    print(f"generated {', '.join(generated)} for {len(data)} rows")
    return EXIT_OK


def cmd_collapse(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data)
    model, _, _ = load_checkpoint(args.checkpoint, data)
    d = cfg.section("diagnostics")
    rows = collapse_report(model, data.batch(), collapse_config(cfg), np.random.default_rng(d["seed"]))
    out = Path(args.out)
    _echo(cfg, out, ["diagnostics"])
    _write_csv(out / "collapse.csv", ["pairing", "epsilon", "fraction"], rows)
    print(f"{len(rows)} collapse rows written to {out / 'collapse.csv'}")
    return EXIT_OK


def gradcheck_setup(seed: int, rows: int = 4):
    """A tiny model with a gaussian and a bernoulli missing modality, and its batch."""
    rng = np.random.default_rng([seed, 99])
    widths = (("x1", 5), ("x2", 4), ("x3", 3))
    partition = ModalityPartition(widths, ("x1",), ("x2", "x3"))
    model = CmmdModel(partition, {"x2": "gaussian", "x3": "bernoulli"}, latent_dim=3, num_classes=3,
                      encoder_hidden=(6,), prior_hidden=(6,), decoder_hidden=(5,), classifier_hidden=(4,))
    model.init_params(rng)
    labels = np.arange(rows) % 3
    y = np.zeros((rows, 3))
    y[np.arange(rows), labels] = 1.0
    batch = Batch({"x1": rng.standard_normal((rows, 5)), "x2": rng.standard_normal((rows, 4)),
                   "x3": (rng.random((rows, 3)) < 0.5).astype(float)}, y)
    return model, batch


def run_gradcheck(seed: int = 0, step: float = 1e-5, rows: int = 4,
                  objective: ObjectiveConfig | None = None) -> dict[str, float]:
    """Worst relative error per network for the full objective."""
    model, batch = gradcheck_setup(seed, rows)
    obj = objective or ObjectiveConfig(omega=0.5)

    def loss():
        return cmmd_loss(model, batch, obj, np.random.default_rng([seed, 5]), train=True).total

    per_param = autograd.grad_check_params(loss, model.params, step)
    groups: dict[str, float] = {}
    for path, err in per_param.items():
        group = path.rsplit(".layer", 1)[0]
        groups[group] = max(groups.get(group, 0.0), err)
    return groups


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    g = cfg.section("gradcheck")
    groups = run_gradcheck(g["seed"], g["step"], g["batch"], objective_config(cfg))
    worst = max(groups.values())
    for group, err in sorted(groups.items()):
        status = "ok" if err < g["tolerance"] else "FAIL"
        print(f"{group:<16} {err:.3e} {status}")
    passed = worst < g["tolerance"]
    print(f"max relative error {worst:.3e} ({'pass' if passed else 'fail'}, tolerance {g['tolerance']:g})")
    return EXIT_OK if passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmmd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="run configuration file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    sp = sub.add_parser("synth", help="generate a synthetic multi-modal dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eval-data")
    sp.add_argument("--unlabeled", help="stage-1 dataset for two-stage training")
    sp.add_argument("--out", required=True)
    sp.add_argument("--omega-sweep", action="store_true", help="train once per omega in 0, 0.1, ..., 1")
    sp.add_argument("--resume", metavar="CHECKPOINT")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "test-time metrics"),
                                 ("generate", cmd_generate, "generate missing modalities"),
                                 ("collapse", cmd_collapse, "posterior-collapse report")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataFormatError, CheckpointError, TrainingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
