"""The six parameterized networks and the modulated generator forward pass.

Pieces:

* projector: per-row MLP over a task's attribute rows, mean-pooled into a
  single task embedding (permutation invariant by construction).
* modulators: one independent head per modulated generator layer, mapping
  the task embedding to a per-dimension gain/shift pair.
* generator: MLP from (noise, attribute) to a visual feature vector.
  The input and every hidden activation are modulated; batch norm sits on
  hidden layers, the output layer is linear so synthetic features can
  match an arbitrary feature range (a flag also modulates the output).
* critic: unbounded score for (feature, attribute) pairs, no output
  nonlinearity, stabilized externally by weight clipping.
* classifier: linear logits over the seen classes.
* attr_decoder: maps features back to attribute space; its
  reconstructions drive both a training loss and data-quality scoring.

LeakyReLU (slope 0.5) activates all hidden layers; dropout (0.5) applies
to critic and attr_decoder hidden layers only.

Parameter groups follow the three-way split used by the trainer: the
critic, the generator+classifier, and the modulation path
(projector + modulators + attr_decoder).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    affine,
    batch_norm,
    concat_cols,
    dropout,
    elementwise_mul,
    leaky_relu,
    make_dropout_mask,
    reduce_mean,
    sigmoid,
    slice_cols,
    softmax,
    sub,
)


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModulationVariant:
    """One cell of the modulation-operation grid.

    The default (base on, '+', sigmoid, bias on) computes
    ``(1 + sigmoid(w)) * o + sigmoid(b)``. Without ``base`` the gain is
    just ``act(w)`` and the operator is ignored; ``activation`` may be
    sigmoid, softmax (across the dimensions of w within one task) or
    none; ``bias`` toggles the additive ``act(b)`` term.
    """

    base: bool = True
    op: str = "+"
    activation: str = "sigmoid"
    bias: bool = True

    @classmethod
    def parse(cls, text: str) -> "ModulationVariant":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"variant needs 4 fields 'base,op,activation,bias', got {text!r}")
        base_s, op, act, bias_s = parts
        if base_s not in ("base", "nobase"):
            raise ValueError(f"variant base field must be base|nobase, got {base_s!r}")
        if op not in ("+", "-"):
            raise ValueError(f"variant operator must be + or -, got {op!r}")
        if act not in ("sigmoid", "softmax", "none"):
            raise ValueError(f"variant activation must be sigmoid|softmax|none, got {act!r}")
        if bias_s not in ("bias", "nobias"):
            raise ValueError(f"variant bias field must be bias|nobias, got {bias_s!r}")
        return cls(base=base_s == "base", op=op, activation=act, bias=bias_s == "bias")

    def encode(self) -> str:
        return ",".join(
            [
                "base" if self.base else "nobase",
                self.op,
                self.activation,
                "bias" if self.bias else "nobias",
            ]
        )


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float


@dataclass
class Mlp:
    """Stack of affine layers; all but the last get the hidden activation."""

    layers: list[Dense]


@dataclass
class Generator:
    layers: list[Dense]
    norms: list[BatchNorm]  # one per hidden layer


@dataclass(frozen=True)
class NetworkConfig:
    gen_hidden: tuple[int, ...] = (512,)
    critic_hidden: tuple[int, ...] = (512,)
    decoder_hidden: tuple[int, ...] = (256,)
    projector_hidden: tuple[int, ...] = (256,)
    modulator_hidden: tuple[int, ...] = (128,)
    embed_dim: int = 128
    z_dim: int = 0  # 0 means "same as attr_dim"
    leaky_slope: float = 0.5
    dropout_rate: float = 0.5
    bn_momentum: float = 0.8
    modulate_output: bool = False


@dataclass
class ModelState:
    """All trainable state plus the dimensions needed to use it."""

    feat_dim: int
    attr_dim: int
    z_dim: int
    embed_dim: int
    seen_classes: tuple[int, ...]
    variant: ModulationVariant
    modulate_output: bool
    leaky_slope: float
    dropout_rate: float
    generator: Generator
    classifier: Mlp
    critic: Mlp
    projector: Mlp
    modulators: list[Mlp]
    attr_decoder: Mlp

    def seen_index(self, labels: np.ndarray) -> np.ndarray:
        """Map global class ids to positions in the classifier's label space."""
        lookup = {c: i for i, c in enumerate(self.seen_classes)}
        try:
            return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
        except KeyError as err:
            raise DimensionError(f"label {err.args[0]} is not a seen class") from None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _dense(rng, fan_in, fan_out) -> Dense:
    return Dense(
        weight=Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True),
        bias=Tensor(np.zeros((1, fan_out)), requires_grad=True),
    )


def _mlp(rng, dims: list[int]) -> Mlp:
    return Mlp(layers=[_dense(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)])


def _batch_norm(width: int, momentum: float) -> BatchNorm:
    return BatchNorm(
        gamma=Tensor(np.ones((1, width)), requires_grad=True),
        beta=Tensor(np.zeros((1, width)), requires_grad=True),
        running_mean=np.zeros((1, width)),
        running_var=np.ones((1, width)),
        momentum=momentum,
    )


def modulated_widths(state_or_cfg, in_dim: int, feat_dim: int, gen_hidden) -> list[int]:
    """Widths of the generator activations that receive modulation."""
    widths = [in_dim, *gen_hidden]
    if getattr(state_or_cfg, "modulate_output", False):
        widths.append(feat_dim)
    return widths


def init_model(
    cfg: NetworkConfig,
    feat_dim: int,
    attr_dim: int,
    seen_classes,
    variant: ModulationVariant,
    seed: int,
) -> ModelState:
    from .episodes import STREAM_INIT, substream

    rng = substream(seed, STREAM_INIT)
    z_dim = cfg.z_dim if cfg.z_dim > 0 else attr_dim
    in_dim = z_dim + attr_dim
    gen_dims = [in_dim, *cfg.gen_hidden, feat_dim]
    generator = Generator(
        layers=[_dense(rng, gen_dims[i], gen_dims[i + 1]) for i in range(len(gen_dims) - 1)],
        norms=[_batch_norm(w, cfg.bn_momentum) for w in cfg.gen_hidden],
    )
    seen_classes = tuple(int(c) for c in seen_classes)
    classifier = _mlp(rng, [feat_dim, len(seen_classes)])
    critic = _mlp(rng, [feat_dim + attr_dim, *cfg.critic_hidden, 1])
    projector = _mlp(rng, [attr_dim, *cfg.projector_hidden, cfg.embed_dim])
    mod_dims = modulated_widths(cfg, in_dim, feat_dim, cfg.gen_hidden)
    modulators = [
        _mlp(rng, [cfg.embed_dim, *cfg.modulator_hidden, 2 * w]) for w in mod_dims
    ]
    attr_decoder = _mlp(rng, [feat_dim, *cfg.decoder_hidden, attr_dim])
    return ModelState(
        feat_dim=feat_dim,
        attr_dim=attr_dim,
        z_dim=z_dim,
        embed_dim=cfg.embed_dim,
        seen_classes=seen_classes,
        variant=variant,
        modulate_output=cfg.modulate_output,
        leaky_slope=cfg.leaky_slope,
        dropout_rate=cfg.dropout_rate,
        generator=generator,
        classifier=classifier,
        critic=critic,
        projector=projector,
        modulators=modulators,
        attr_decoder=attr_decoder,
    )


# ---------------------------------------------------------------------------
# Parameter traversal and grouping
# ---------------------------------------------------------------------------


def _mlp_named(prefix: str, mlp: Mlp):
    for i, layer in enumerate(mlp.layers):
        yield f"{prefix}.layer{i}.weight", layer.weight
        yield f"{prefix}.layer{i}.bias", layer.bias


def named_parameters(state: ModelState) -> list[tuple[str, Tensor]]:
    out = []
    for i, layer in enumerate(state.generator.layers):
        out.append((f"generator.layer{i}.weight", layer.weight))
        out.append((f"generator.layer{i}.bias", layer.bias))
    for i, norm in enumerate(state.generator.norms):
        out.append((f"generator.norm{i}.gamma", norm.gamma))
        out.append((f"generator.norm{i}.beta", norm.beta))
    out.extend(_mlp_named("classifier", state.classifier))
    out.extend(_mlp_named("critic", state.critic))
    out.extend(_mlp_named("projector", state.projector))
    for j, head in enumerate(state.modulators):
        out.extend(_mlp_named(f"modulator{j}", head))
    out.extend(_mlp_named("attr_decoder", state.attr_decoder))
    return out


def named_buffers(state: ModelState) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, norm in enumerate(state.generator.norms):
        out.append((f"generator.norm{i}.running_mean", norm.running_mean))
        out.append((f"generator.norm{i}.running_var", norm.running_var))
    return out


def critic_params(state: ModelState) -> list[Tensor]:
    return [t for name, t in named_parameters(state) if name.startswith("critic.")]


def generator_classifier_params(state: ModelState) -> list[Tensor]:
    return [
        t
        for name, t in named_parameters(state)
        if name.startswith(("generator.", "classifier."))
    ]


def modulation_params(state: ModelState) -> list[Tensor]:
    return [
        t
        for name, t in named_parameters(state)
        if name.startswith(("projector.", "modulator", "attr_decoder."))
    ]


def all_params(state: ModelState) -> list[Tensor]:
    return [t for _, t in named_parameters(state)]


def clone_state(state: ModelState) -> ModelState:
    """Deep-copy all trainable tensors; batch-norm running buffers stay
    shared (they are meta-level statistics, never task-adapted)."""
    gen = Generator(
        layers=[Dense(l.weight.copy(), l.bias.copy()) for l in state.generator.layers],
        norms=[
            BatchNorm(n.gamma.copy(), n.beta.copy(), n.running_mean, n.running_var, n.momentum)
            for n in state.generator.norms
        ],
    )
    copy_mlp = lambda m: Mlp(layers=[Dense(l.weight.copy(), l.bias.copy()) for l in m.layers])
    return replace(
        state,
        generator=gen,
        classifier=copy_mlp(state.classifier),
        critic=copy_mlp(state.critic),
        projector=copy_mlp(state.projector),
        modulators=[copy_mlp(m) for m in state.modulators],
        attr_decoder=copy_mlp(state.attr_decoder),
    )


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def mlp_forward(
    mlp: Mlp,
    x,
    slope: float,
    dropout_rate: float = 0.0,
    train: bool = False,
    mask_rng: np.random.Generator | None = None,
) -> Tensor:
    h = x if isinstance(x, Tensor) else Tensor(x)
    for layer in mlp.layers[:-1]:
        h = leaky_relu(affine(h, layer.weight, layer.bias), slope)
        if dropout_rate > 0.0 and train:
            mask = make_dropout_mask(mask_rng, h.shape, dropout_rate)
            h = dropout(h, dropout_rate, mask, train=True)
    last = mlp.layers[-1]
    return affine(h, last.weight, last.bias)


def project_attributes(state: ModelState, attribute_rows) -> Tensor:
    """Task embedding: mean of the per-row projector outputs, 1 x embed_dim.

    Mean pooling makes the result invariant to row order, and a task of
    one attribute replicated N times embeds exactly like the single row
    (the replicated case is also short-circuited, since it is the hot
    path of single-class inference).
    """
    rows = attribute_rows.values if isinstance(attribute_rows, Tensor) else np.asarray(attribute_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    if rows.shape[0] == 0:
        raise DimensionError("project_attributes: need at least one attribute row")
    if rows.shape[1] != state.attr_dim:
        raise DimensionError(
            f"project_attributes: rows have dim {rows.shape[1]}, model expects {state.attr_dim}"
        )
    if rows.shape[0] > 1 and (rows == rows[0]).all():
        rows = rows[:1]
    per_row = mlp_forward(state.projector, Tensor(rows), state.leaky_slope)
    if per_row.rows == 1:
        return per_row
    return reduce_mean(per_row, axis=0)


def compute_modulation(state: ModelState, embedding: Tensor) -> list[tuple[Tensor, Tensor]]:
    """Per modulated layer j: (gain_j, shift_j), each 1 x dim(o_j)."""
    if embedding.shape != (1, state.embed_dim):
        raise DimensionError(
            f"compute_modulation: embedding is {embedding.shape}, expected (1, {state.embed_dim})"
        )
    params = []
    for j, head in enumerate(state.modulators):
        out = mlp_forward(head, embedding, state.leaky_slope)
        if out.cols % 2 != 0:
            raise DimensionError(f"modulator {j} must emit an even width, got {out.cols}")
        half = out.cols // 2
        params.append((slice_cols(out, 0, half), slice_cols(out, half, out.cols)))
    return params


def modulate(o, w, b, variant: ModulationVariant) -> Tensor:
    """Apply one gain/shift pair to a batch of activations."""
    o = o if isinstance(o, Tensor) else Tensor(o)
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if w.cols != o.cols or (variant.bias and b.cols != o.cols):
        raise DimensionError(
            f"modulate: activation dim {o.cols}, gain dim {w.cols}, shift dim {b.cols}"
        )
    if variant.activation == "sigmoid":
        act = sigmoid
    elif variant.activation == "softmax":
        act = softmax
    else:
        act = lambda t: t
    gain = act(w)
    if variant.base:
        one = Tensor(np.ones((1, 1)))
        gain = add(one, gain) if variant.op == "+" else sub(one, gain)
    out = elementwise_mul(o, gain)
    if variant.bias:
        out = add(out, act(b))
    return out


def generate(
    state: ModelState,
    attrs,
    noise,
    mods: list[tuple[Tensor, Tensor]] | None,
    train: bool,
    update_running: bool = False,
) -> Tensor:
    """Synthesize features from (noise, attribute) rows.

    ``mods`` holds the task's modulation parameters; pass None for the
    unmodulated baseline forward. Train mode uses batch statistics in the
    batch-norm layers (running buffers are only touched when
    ``update_running`` is set).
    """
    a = attrs if isinstance(attrs, Tensor) else Tensor(attrs)
    z = noise if isinstance(noise, Tensor) else Tensor(noise)
    if a.rows != z.rows:
        raise DimensionError(f"generate: {z.rows} noise rows vs {a.rows} attribute rows")
    if a.cols != state.attr_dim or z.cols != state.z_dim:
        raise DimensionError(
            f"generate: got (noise {z.cols}, attr {a.cols}), expected "
            f"({state.z_dim}, {state.attr_dim})"
        )
    h = concat_cols(z, a)
    if mods is not None:
        h = modulate(h, *mods[0], state.variant)
    for i, norm in enumerate(state.generator.norms):
        layer = state.generator.layers[i]
        h = affine(h, layer.weight, layer.bias)
        h = batch_norm(
            h,
            norm.gamma,
            norm.beta,
            norm.running_mean,
            norm.running_var,
            norm.momentum,
            train=train,
            update_running=update_running,
        )
        h = leaky_relu(h, state.leaky_slope)
        if mods is not None:
            h = modulate(h, *mods[i + 1], state.variant)
    last = state.generator.layers[-1]
    out = affine(h, last.weight, last.bias)
    if state.modulate_output and mods is not None:
        out = modulate(out, *mods[len(state.generator.norms) + 1], state.variant)
    return out


def discriminate(
    state: ModelState,
    features,
    attrs,
    train: bool,
    mask_rng: np.random.Generator | None = None,
) -> Tensor:
    """Unbounded critic score per (feature, attribute) row, B x 1."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    a = attrs if isinstance(attrs, Tensor) else Tensor(attrs)
    if x.rows != a.rows:
        raise DimensionError(f"discriminate: {x.rows} feature rows vs {a.rows} attribute rows")
    return mlp_forward(
        state.critic,
        concat_cols(x, a),
        state.leaky_slope,
        dropout_rate=state.dropout_rate,
        train=train,
        mask_rng=mask_rng,
    )


def classify_aux(state: ModelState, features) -> Tensor:
    """Logits over the seen-class label space, B x |seen|."""
    return mlp_forward(state.classifier, features, state.leaky_slope)


def reconstruct_attribute(
    state: ModelState,
    features,
    train: bool,
    mask_rng: np.random.Generator | None = None,
) -> Tensor:
    """Decode features back into attribute space, B x attr_dim."""
    return mlp_forward(
        state.attr_decoder,
        features,
        state.leaky_slope,
        dropout_rate=state.dropout_rate,
        train=train,
        mask_rng=mask_rng,
    )


# ---------------------------------------------------------------------------
# Checkpoints: structured-text manifest followed by one binary block per
# tensor (same container layout as the dataset files, version 2 = f64).
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ZSLF"
_CKPT_VERSION = 2
_CKPT_HEADER = struct.Struct("<4sHHII")


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> None:
    entries = named_parameters(state) + [
        (name, Tensor(buf)) for name, buf in named_buffers(state)
    ]
    lines = ["ZSLGEN-CHECKPOINT 1"]
    lines.append(f"feat_dim = {state.feat_dim}")
    lines.append(f"attr_dim = {state.attr_dim}")
    lines.append(f"z_dim = {state.z_dim}")
    lines.append(f"embed_dim = {state.embed_dim}")
    lines.append("seen_classes = " + ",".join(str(c) for c in state.seen_classes))
    lines.append(f"variant = {state.variant.encode()}")
    lines.append(f"modulate_output = {str(state.modulate_output).lower()}")
    lines.append(f"leaky_slope = {state.leaky_slope!r}")
    lines.append(f"dropout_rate = {state.dropout_rate!r}")
    lines.append(f"bn_momentum = {state.generator.norms[0].momentum!r}" if state.generator.norms else "bn_momentum = 0.8")
    for key, value in (extra or {}).items():
        lines.append(f"extra.{key} = {value}")
    lines.append(f"tensors = {len(entries)}")
    for name, t in entries:
        lines.append(f"{name} {t.rows} {t.cols}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for name, t in entries:
            fh.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION, 0, t.rows, t.cols))
            fh.write(t.values.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\nEND\n"
    end = raw.find(marker)
    if end < 0:
        raise CheckpointError(f"{path}: missing END marker")
    header_text = raw[:end].decode("utf-8")
    lines = header_text.splitlines()
    if not lines or lines[0] != "ZSLGEN-CHECKPOINT 1":
        raise CheckpointError(f"{path}: not a checkpoint file")
    fields: dict[str, str] = {}
    extra: dict[str, str] = {}
    manifest: list[tuple[str, int, int]] = []
    in_manifest = False
    for line in lines[1:]:
        if not in_manifest:
            key, sep, value = line.partition(" = ")
            if not sep:
                raise CheckpointError(f"{path}: malformed header line {line!r}")
            if key.startswith("extra."):
                extra[key[len("extra."):]] = value
            else:
                fields[key] = value
            if key == "tensors":
                in_manifest = True
        else:
            parts = line.split()
            if len(parts) != 3:
                raise CheckpointError(f"{path}: malformed manifest line {line!r}")
            manifest.append((parts[0], int(parts[1]), int(parts[2])))
    if len(manifest) != int(fields.get("tensors", -1)):
        raise CheckpointError(f"{path}: manifest length does not match tensors field")

    blobs: dict[str, np.ndarray] = {}
    offset = end + len(marker)
    for name, rows, cols in manifest:
        if offset + _CKPT_HEADER.size > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        magic, version, _r, brows, bcols = _CKPT_HEADER.unpack_from(raw, offset)
        if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: bad block header for {name}")
        if (brows, bcols) != (rows, cols):
            raise CheckpointError(
                f"{path}: manifest/shape mismatch for {name}: "
                f"manifest {rows}x{cols}, block {brows}x{bcols}"
            )
        offset += _CKPT_HEADER.size
        count = rows * cols
        blobs[name] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(rows, cols)
            .copy()
        )
        offset += count * 8
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    # Rebuild the architecture from the manifest shapes, then fill values.
    def layer_dims(prefix: str) -> list[tuple[int, int]]:
        dims = []
        i = 0
        while f"{prefix}.layer{i}.weight" in blobs:
            dims.append(blobs[f"{prefix}.layer{i}.weight"].shape)
            i += 1
        if not dims:
            raise CheckpointError(f"{path}: no layers for {prefix}")
        return dims

    def build_mlp(prefix: str) -> Mlp:
        layers = []
        for i in range(len(layer_dims(prefix))):
            layers.append(
                Dense(
                    weight=Tensor(blobs[f"{prefix}.layer{i}.weight"], requires_grad=True),
                    bias=Tensor(blobs[f"{prefix}.layer{i}.bias"], requires_grad=True),
                )
            )
        return Mlp(layers=layers)

    momentum = float(fields.get("bn_momentum", "0.8"))
    gen_layers = build_mlp("generator").layers
    norms = []
    i = 0
    while f"generator.norm{i}.gamma" in blobs:
        norms.append(
            BatchNorm(
                gamma=Tensor(blobs[f"generator.norm{i}.gamma"], requires_grad=True),
                beta=Tensor(blobs[f"generator.norm{i}.beta"], requires_grad=True),
                running_mean=blobs[f"generator.norm{i}.running_mean"],
                running_var=blobs[f"generator.norm{i}.running_var"],
                momentum=momentum,
            )
        )
        i += 1
    modulators = []
    j = 0
    while f"modulator{j}.layer0.weight" in blobs:
        modulators.append(build_mlp(f"modulator{j}"))
        j += 1
    seen = tuple(int(c) for c in fields["seen_classes"].split(",") if c.strip() != "")
    state = ModelState(
        feat_dim=int(fields["feat_dim"]),
        attr_dim=int(fields["attr_dim"]),
        z_dim=int(fields["z_dim"]),
        embed_dim=int(fields["embed_dim"]),
        seen_classes=seen,
        variant=ModulationVariant.parse(fields["variant"]),
        modulate_output=fields["modulate_output"] == "true",
        leaky_slope=float(fields["leaky_slope"]),
        dropout_rate=float(fields["dropout_rate"]),
        generator=Generator(layers=gen_layers, norms=norms),
        classifier=build_mlp("classifier"),
        critic=build_mlp("critic"),
        projector=build_mlp("projector"),
        modulators=modulators,
        attr_decoder=build_mlp("attr_decoder"),
    )
    return state, extra
