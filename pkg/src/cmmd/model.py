"""The four-network CMMD ensemble and its train/test forward routing.

During training the decoders read ``z ~ q(z | x_O, x_M, y)`` while the
classifier always reads ``z ~ p(z | x_O)``; at test time both read the prior
sample and ``x_M`` is never touched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import MlpSpec, ParameterStore, Tensor, concat, init_mlp, layer_paths, mlp_forward
from .distributions import (
    BernoulliParams, CategoricalParams, GaussianParams, clamp_log_var, reparam_sample,
)

FAMILIES = ("gaussian", "bernoulli")


@dataclass(frozen=True)
class ModalityPartition:
    """Modalities in declaration order, split into observed and missing."""

    widths: tuple[tuple[str, int], ...]
    observed: tuple[str, ...]
    missing: tuple[str, ...]

    def __post_init__(self):
        names = [n for n, _ in self.widths]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names in {names}")
        if not self.observed:
            raise ValueError("at least one observed modality is required")
        if set(self.observed) & set(self.missing):
            raise ValueError(f"modalities both observed and missing: {set(self.observed) & set(self.missing)}")
        if set(self.observed) | set(self.missing) != set(names):
            raise ValueError(f"partition {self.observed} + {self.missing} does not cover {names}")
        # canonical: declaration order within each side
        object.__setattr__(self, "observed", tuple(n for n in names if n in self.observed))
        object.__setattr__(self, "missing", tuple(n for n in names if n in self.missing))

    def width(self, name: str) -> int:
        return dict(self.widths)[name]

    @property
    def observed_width(self) -> int:
        return sum(self.width(n) for n in self.observed)

    @property
    def missing_width(self) -> int:
        return sum(self.width(n) for n in self.missing)


@dataclass
class Batch:
    """Rows of every modality plus labels (one-hot / multi-hot / 0-1 column)."""

    x: dict[str, np.ndarray]
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(next(iter(self.x.values())))

    def take(self, index) -> "Batch":
        return Batch({k: v[index] for k, v in self.x.items()},
                     None if self.y is None else self.y[index])


@dataclass
class ForwardOutputs:
    q_params: GaussianParams
    prior_params: GaussianParams
    z_q: Tensor
    z_p: Tensor
    decoder_params: dict[str, GaussianParams | BernoulliParams]
    class_params: CategoricalParams


@dataclass
class CmmdModel:
    partition: ModalityPartition
    families: dict[str, str]
    latent_dim: int
    num_classes: int
    class_mode: str = "softmax"
    encoder_hidden: tuple[int, ...] = (64, 64)
    prior_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)
    classifier_hidden: tuple[int, ...] = (32,)
    activation: str = "softplus"
    dropout: float = 0.2
    prior_mode: str = "conditional"
    fixed_decoder_var: float | None = None
    classify_from: str = "prior"
    params: ParameterStore = field(default_factory=ParameterStore)

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.prior_hidden = tuple(self.prior_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.classifier_hidden = tuple(self.classifier_hidden)
        if self.latent_dim <= 0 or self.num_classes <= 0:
            raise ValueError("latent_dim and num_classes must be positive")
        if self.class_mode == "single-sigmoid" and self.num_classes != 1:
            raise ValueError("single-sigmoid mode uses exactly one output unit")
        if self.prior_mode not in ("conditional", "standard_normal"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")
        if self.classify_from not in ("prior", "posterior"):
            raise ValueError(f"unknown classify_from {self.classify_from!r}")
        if self.fixed_decoder_var is not None and self.fixed_decoder_var <= 0:
            raise ValueError("fixed_decoder_var must be positive")
        for name in self.partition.missing:
            if self.families.get(name) not in FAMILIES:
                raise ValueError(f"missing modality {name!r} needs a family in {FAMILIES}")

    # -- architecture ---------------------------------------------------

    def _spec(self, widths, heads) -> MlpSpec:
        return MlpSpec(tuple(widths), self.activation, self.dropout, heads)

    @property
    def encoder_spec(self) -> MlpSpec:
        p, d = self.partition, self.latent_dim
        width = p.observed_width + p.missing_width + self.num_classes
        return self._spec((width, *self.encoder_hidden, 2 * d), (("mean", d), ("log_var", d)))

    @property
    def prior_spec(self) -> MlpSpec:
        d = self.latent_dim
        return self._spec((self.partition.observed_width, *self.prior_hidden, 2 * d),
                          (("mean", d), ("log_var", d)))

    def decoder_spec(self, name: str) -> MlpSpec:
        w = self.partition.width(name)
        width_in = self.partition.observed_width + self.latent_dim
        if self.families[name] == "bernoulli":
            return self._spec((width_in, *self.decoder_hidden, w), (("logits", w),))
        if self.fixed_decoder_var is not None:
            return self._spec((width_in, *self.decoder_hidden, w), (("mean", w),))
        return self._spec((width_in, *self.decoder_hidden, 2 * w), (("mean", w), ("log_var", w)))

    @property
    def classifier_spec(self) -> MlpSpec:
        return self._spec((self.latent_dim, *self.classifier_hidden, self.num_classes),
                          (("logits", self.num_classes),))

    def networks(self) -> dict[str, MlpSpec]:
        nets = {"encoder": self.encoder_spec, "classifier": self.classifier_spec}
        if self.prior_mode == "conditional":
            nets["prior"] = self.prior_spec
        for name in self.partition.missing:
            nets[f"decoder.{name}"] = self.decoder_spec(name)
        return nets

    def init_params(self, rng: np.random.Generator) -> "CmmdModel":
        self.params = ParameterStore()
        for prefix, spec in sorted(self.networks().items()):
            init_mlp(spec, self.params, prefix, rng)
        return self

    def label_block_rows(self) -> slice:
        """Rows of the first encoder weight matrix fed by the label block."""
        start = self.partition.observed_width + self.partition.missing_width
        return slice(start, start + self.num_classes)

    # -- input assembly ---------------------------------------------------

    def _block(self, x: dict, names, n: int | None = None) -> list[np.ndarray]:
        out = []
        for name in names:
            if name not in x:
                raise ValueError(f"modality {name!r} not supplied")
            arr = np.asarray(x[name], dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.partition.width(name):
                raise ValueError(f"modality {name!r}: expected width {self.partition.width(name)}, "
                                 f"got shape {arr.shape}")
            out.append(arr)
        return out

    def _labels(self, y, n: int) -> np.ndarray:
        if y is None:
            return np.zeros((n, self.num_classes))
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (n, self.num_classes):
            raise ValueError(f"labels: expected shape {(n, self.num_classes)}, got {y.shape}")
        return y

    def _gaussian(self, heads: dict) -> GaussianParams:
        return GaussianParams(heads["mean"], clamp_log_var(heads["log_var"]))

    # -- the four networks ---------------------------------------------

    def encode(self, x_O: dict, x_M: dict, y=None, train: bool = False, rng=None) -> GaussianParams:
        obs = self._block(x_O, self.partition.observed)
        mis = self._block(x_M, self.partition.missing)
        n = len(obs[0])
        if any(len(a) != n for a in mis):
            raise ValueError("observed and missing blocks have different row counts")
        inp = np.concatenate([*obs, *mis, self._labels(y, n)], axis=1)
        heads = mlp_forward(self.encoder_spec, self.params, "encoder", Tensor(inp), train, rng)
        return self._gaussian(heads)

    def prior(self, x_O: dict, train: bool = False, rng=None) -> GaussianParams:
        obs = np.concatenate(self._block(x_O, self.partition.observed), axis=1)
        if self.prior_mode == "standard_normal":
            zeros = np.zeros((len(obs), self.latent_dim))
            return GaussianParams(Tensor(zeros), Tensor(zeros.copy()))
        heads = mlp_forward(self.prior_spec, self.params, "prior", Tensor(obs), train, rng)
        return self._gaussian(heads)

    def decode(self, x_O: dict, z: Tensor, train: bool = False, rng=None) -> dict:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"decode: z must have width {self.latent_dim}, got shape {z.shape}")
        obs = Tensor(np.concatenate(self._block(x_O, self.partition.observed), axis=1))
        inp = concat([obs, z])
        out = {}
        for name in self.partition.missing:
            heads = mlp_forward(self.decoder_spec(name), self.params, f"decoder.{name}", inp, train, rng)
            if self.families[name] == "bernoulli":
                out[name] = BernoulliParams(heads["logits"])
            elif self.fixed_decoder_var is not None:
                const = np.full(heads["mean"].shape, math.log(self.fixed_decoder_var))
                out[name] = GaussianParams(heads["mean"], Tensor(const))
            else:
                out[name] = self._gaussian(heads)
        return out

    def classify(self, z: Tensor, train: bool = False, rng=None) -> CategoricalParams:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"classify: z must have width {self.latent_dim}, got shape {z.shape}")
        heads = mlp_forward(self.classifier_spec, self.params, "classifier", z, train, rng)
        return CategoricalParams(heads["logits"], self.class_mode)

    # -- routing -------------------------------------------------------

    def forward_train(self, batch: Batch, rng: np.random.Generator, train: bool = True,
                      noise_q=None, noise_p=None, use_labels: bool = True) -> ForwardOutputs:
        x_O = {n: batch.x[n] for n in self.partition.observed}
        x_M = {n: batch.x[n] for n in self.partition.missing}
        q = self.encode(x_O, x_M, batch.y if use_labels else None, train, rng)
        if noise_q is None:
            noise_q = rng.standard_normal(q.mean.shape)
        z_q = reparam_sample(q, noise_q)
        dec = self.decode(x_O, z_q, train, rng)
        p = self.prior(x_O, train, rng)
        if noise_p is None:
            noise_p = rng.standard_normal(p.mean.shape)
        z_p = reparam_sample(p, noise_p)
        cls = self.classify(z_p if self.classify_from == "prior" else z_q, train, rng)
        return ForwardOutputs(q, p, z_q, z_p, dec, cls)

    def forward_test(self, x_O: dict, rng: np.random.Generator, samples: int = 1):
        """Generate missing modalities and class probabilities from ``x_O`` alone.

        Returns ``(generated, class_probs, z_p)``; with ``samples > 1`` the
        outputs are averaged over prior draws and ``z_p`` is the first draw.
        """
        if samples < 1:
            raise ValueError("samples must be >= 1")
        p = self.prior(x_O)
        generated: dict[str, np.ndarray] = {}
        probs = None
        first_z = None
        for _ in range(samples):
            z_p = reparam_sample(p, rng.standard_normal(p.mean.shape))
            if first_z is None:
                first_z = z_p.values
            dec = self.decode(x_O, z_p)
            for name, params in dec.items():
                val = params.probs if isinstance(params, BernoulliParams) else params.mean.values
                generated[name] = val if name not in generated else generated[name] + val
            cp = self.classify(z_p).probs
            probs = cp if probs is None else probs + cp
        if samples > 1:
            generated = {k: v / samples for k, v in generated.items()}
            probs = probs / samples
        return generated, probs, first_z

    # -- manifest --------------------------------------------------------

    def manifest(self) -> str:
        p = self.partition
        lines = [
            "modalities = " + ", ".join(f"{n}:{w}" for n, w in p.widths),
            "observed = " + ", ".join(p.observed),
            "missing = " + ", ".join(p.missing),
            "families = " + ", ".join(f"{n}:{self.families[n]}" for n in p.missing),
            f"latent_dim = {self.latent_dim}",
            f"num_classes = {self.num_classes}",
            f"class_mode = {self.class_mode}",
            "encoder_hidden = " + ",".join(map(str, self.encoder_hidden)),
            "prior_hidden = " + ",".join(map(str, self.prior_hidden)),
            "decoder_hidden = " + ",".join(map(str, self.decoder_hidden)),
            "classifier_hidden = " + ",".join(map(str, self.classifier_hidden)),
            f"activation = {self.activation}",
            f"dropout = {self.dropout!r}",
            f"prior_mode = {self.prior_mode}",
            f"fixed_decoder_var = {'none' if self.fixed_decoder_var is None else repr(self.fixed_decoder_var)}",
            f"classify_from = {self.classify_from}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "CmmdModel":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()

        def names(v):
            return tuple(s.strip() for s in v.split(",") if s.strip())

        def pairs(v):
            return tuple((a.strip(), b.strip()) for a, b in (s.split(":") for s in names(v)))

        def ints(v):
            return tuple(int(s) for s in names(v))

        fdv = kv["fixed_decoder_var"]
        return cls(
            partition=ModalityPartition(tuple((n, int(w)) for n, w in pairs(kv["modalities"])),
                                        names(kv["observed"]), names(kv["missing"])),
            families=dict(pairs(kv["families"])),
            latent_dim=int(kv["latent_dim"]),
            num_classes=int(kv["num_classes"]),
            class_mode=kv["class_mode"],
            encoder_hidden=ints(kv["encoder_hidden"]),
            prior_hidden=ints(kv["prior_hidden"]),
            decoder_hidden=ints(kv["decoder_hidden"]),
            classifier_hidden=ints(kv["classifier_hidden"]),
            activation=kv["activation"],
            dropout=float(kv["dropout"]),
            prior_mode=kv["prior_mode"],
            fixed_decoder_var=None if fdv == "none" else float(fdv),
            classify_from=kv["classify_from"],
        )

    def clone(self) -> "CmmdModel":
        return replace(self, families=dict(self.families), params=self.params.copy())


def tie_encoder_to_prior(model: CmmdModel) -> None:
    """Make q(z | x_O, x_M, y) equal p(z | x_O) for every input.

    Copies the prior weights into the encoder and zeroes the encoder rows
    reading ``x_M`` and ``y``.  Requires matching hidden widths.
    """
    if model.encoder_hidden != model.prior_hidden or model.prior_mode != "conditional":
        raise ValueError("encoder and conditional prior must share hidden widths")
    params = model.params
    n_layers = model.prior_spec.num_layers
    for i in range(n_layers):
        w_enc, b_enc = layer_paths("encoder", i)
        w_pri, b_pri = layer_paths("prior", i)
        w = params[w_pri].values.copy()
        if i == 0:
            full = np.zeros_like(params[w_enc].values)
            full[: w.shape[0]] = w
            w = full
        params[w_enc] = w
        params[b_enc] = params[b_pri].values.copy()
