"""Adam, the training loop, two-stage training and checkpoints.

Every epoch draws its randomness from ``default_rng([seed, epoch])`` so a run
resumed from an epoch-boundary checkpoint reproduces the uninterrupted run
bit for bit.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import CheckpointError, Tape, backward, init_mlp, layer_paths, read_checkpoint, write_checkpoint
from .data import Dataset, batch_indices
from .diagnostics import evaluate
from .model import CmmdModel
from .objective import NonFiniteLoss, ObjectiveConfig, cmmd_loss

log = logging.getLogger(__name__)

TERMS = ("recon_log_prob", "class_log_prob", "kl_term", "mmd_term", "total_objective")


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, clip_norm: float | None = None) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for path in params.paths():
        g = grads.get(path)
        if g is None:
            raise TrainingError(f"no gradient for parameter {path!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {path!r}")
    scale = 1.0
    if clip_norm is not None:
        norm = math.sqrt(sum(float(np.sum(grads[p] ** 2)) for p in params.paths()))
        if norm > clip_norm:
            scale = clip_norm / norm
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for path in params.paths():
        g = grads[path] * scale if scale != 1.0 else grads[path]
        p = params[path].values
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0
    lr: float = 1e-4
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    shuffle: bool = True
    eval_every: int = 0
    clip_norm: float | None = None
    eval_samples: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]


def _check_partition(model: CmmdModel, ds: Dataset, need_labels: bool) -> None:
    for name, width in model.partition.widths:
        if name not in ds.x:
            raise ValueError(f"dataset lacks modality {name!r}")
        if ds.x[name].shape[1] != width:
            raise ValueError(f"modality {name!r}: dataset width {ds.x[name].shape[1]} != model width {width}")
    if need_labels:
        if ds.y is None:
            raise ValueError("dataset has no labels")
        if ds.y.shape[1] != model.num_classes:
            raise ValueError(f"labels have {ds.y.shape[1]} columns, model expects {model.num_classes}")


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train_epoch(model: CmmdModel, ds: Dataset, cfg: TrainConfig, state: AdamState, epoch: int,
                use_labels: bool = True) -> dict[str, float]:
    rng = epoch_rng(cfg.seed, epoch)
    sums = dict.fromkeys(TERMS, 0.0)
    count = 0
    params = model.params
    for idx in batch_indices(len(ds), cfg.batch_size, cfg.shuffle, rng=rng, min_size=2):
        batch = ds.batch(idx)
        params.requires_grad_(True)
        try:
            with Tape() as tape:
                br = cmmd_loss(model, batch, cfg.objective, rng, train=True, use_labels=use_labels)
                loss = -br.total
            grads = backward(tape, loss, params)
        except NonFiniteLoss as e:
            raise TrainingError(f"epoch {epoch}: {e}") from e
        finally:
            params.requires_grad_(False)
        adam_step(params, grads, state, cfg.clip_norm)
        for k, v in br.as_floats().items():
            sums[k] += v
        count += 1
    if count == 0:
        raise TrainingError("no batch of size >= 2 in the dataset")
    return {k: v / count for k, v in sums.items()}


def fit(model: CmmdModel, ds: Dataset, cfg: TrainConfig, state: AdamState | None = None,
        start_epoch: int = 0, eval_data: Dataset | None = None, checkpoint_path=None,
        use_labels: bool = True, history: TrainHistory | None = None,
        stop_epoch: int | None = None) -> tuple[TrainHistory, AdamState]:
    """Train for epochs ``start_epoch .. cfg.epochs - 1`` (or up to ``stop_epoch``)."""
    _check_partition(model, ds, use_labels)
    state = state if state is not None else AdamState(lr=cfg.lr)
    history = history if history is not None else TrainHistory()
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, end):
        t0 = time.perf_counter()
        row = {"epoch": epoch, **train_epoch(model, ds, cfg, state, epoch, use_labels)}
        if eval_data is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            report, _ = evaluate(model, eval_data.batch(), np.random.default_rng([cfg.seed, epoch, 1]),
                                 cfg.eval_samples)
            for metric, target, value in report.rows:
                row[f"{metric}:{target}"] = value
        row["wall_clock"] = time.perf_counter() - t0
        history.rows.append(row)
        log.info("epoch %d total %.4f", epoch, row["total_objective"])
        if checkpoint_path is not None:
            save_checkpoint(model, state, checkpoint_path, epoch + 1)
    return history, state


def reinit_label_pathway(model: CmmdModel, rng: np.random.Generator) -> None:
    """Fresh random encoder weights for the label inputs and a fresh classifier."""
    spec = model.encoder_spec
    bound = math.sqrt(6.0 / (spec.layer_widths[0] + spec.layer_widths[1]))
    w_path, _ = layer_paths("encoder", 0)
    w = model.params[w_path].values
    rows = model.label_block_rows()
    w[rows] = rng.uniform(-bound, bound, size=w[rows].shape)
    init_mlp(model.classifier_spec, model.params, "classifier", rng)


def two_stage_fit(model: CmmdModel, unlabeled: Dataset, labeled: Dataset, stage1: TrainConfig,
                  stage2: TrainConfig, eval_data: Dataset | None = None):
    """Stage 1: no classifier, label block unused. Stage 2: full objective on labeled rows."""
    if unlabeled.widths != labeled.widths:
        raise ValueError(f"stage datasets disagree: {unlabeled.widths} vs {labeled.widths}")
    _check_partition(model, unlabeled, need_labels=False)
    _check_partition(model, labeled, need_labels=True)
    obj1 = replace(stage1.objective, alpha=0.0)
    h1, _ = fit(model, unlabeled, replace(stage1, objective=obj1), use_labels=False)
    reinit_label_pathway(model, np.random.default_rng([stage2.seed, 2]))
    h2, state = fit(model, labeled, stage2, eval_data=eval_data)
    return h1, h2, state


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: CmmdModel, state: AdamState | None, path, epoch: int = 0) -> None:
    tensors = {f"param/{p}": t.values for p, t in model.params.items()}
    if state is not None:
        for p in state.m:
            tensors[f"adam.m/{p}"] = state.m[p]
            tensors[f"adam.v/{p}"] = state.v[p]
        tensors["adam.t"] = np.array(float(state.t))
        tensors["adam.hyper"] = np.array([state.lr, state.beta1, state.beta2, state.eps])
    tensors["trainer.epoch"] = np.array(float(epoch))
    write_checkpoint(path, tensors, model.manifest())


def load_checkpoint(path, dataset: Dataset | None = None) -> tuple[CmmdModel, AdamState | None, int]:
    tensors, manifest = read_checkpoint(path)
    try:
        model = CmmdModel.from_manifest(manifest)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: bad architecture manifest ({e})") from None
    for key, values in tensors.items():
        if key.startswith("param/"):
            model.params[key[len("param/"):]] = values
    expected = set()
    for prefix, spec in model.networks().items():
        for i in range(spec.num_layers):
            expected.update(layer_paths(prefix, i))
    if set(model.params.paths()) != expected:
        raise CheckpointError(f"{path}: parameters do not match the architecture manifest")
    state = None
    if "adam.t" in tensors:
        lr, b1, b2, eps = tensors["adam.hyper"].tolist()
        state = AdamState(lr, b1, b2, eps, int(tensors["adam.t"].item()))
        for key, values in tensors.items():
            if key.startswith("adam.m/"):
                state.m[key[len("adam.m/"):]] = values.copy()
            elif key.startswith("adam.v/"):
                state.v[key[len("adam.v/"):]] = values.copy()
    if dataset is not None:
        try:
            _check_partition(model, dataset, need_labels=False)
        except ValueError as e:
            raise CheckpointError(f"{path}: checkpoint does not fit the dataset ({e})") from None
    return model, state, int(tensors.get("trainer.epoch", np.array(0.0)).item())
