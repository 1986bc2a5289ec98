"""Episodic meta-training loop.

Per task: one (configurable) fast-adaptation cycle on the support set,
then query-set gradients evaluated at the adapted parameters and summed
over the batch into the shared meta parameters. The three parameter
groups move with their own rates and directions: the critic *ascends* its
objective, the modulation path and the generator+classifier descend
theirs. Critic weights are clipped to [-clip_c, clip_c] after every
update.

The inner cycle per step:

1. critic group: ascend the critic objective on the support instances,
   then clip.
2. modulation group (projector + modulators + decoder): descend the
   attribute-reconstruction objective. Gradients flow through the frozen
   generator into the modulation parameters.
3. generator + classifier: descend the combined objective, evaluated with
   the *updated* critic and modulation path. Critic and decoder
   parameters are frozen here (their outputs still backpropagate into the
   generated features), so their updates are not double counted.

In first-order mode (default) the query gradient at the adapted
parameters is applied directly to the meta parameters. The exact
second-order mode differentiates through the inner step per group via
double backward; it supports a single inner step and is meant for small
configurations.

Batch-norm running statistics are meta-level state: inner steps and
query evaluations use batch statistics, and only the outer
generator-classifier query pass folds the batch statistics into the
running buffers.

Noise and dropout randomness come from per-(epoch, task, objective)
substreams, so training replays exactly for a fixed seed and resuming
from a checkpoint continues the identical trajectory.
"""

from __future__ import annotations

import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import networks as nets
from .autodiff import (
    NumericError,
    Tape,
    Tensor,
    backward,
    backward_graph,
    clamp,
    add,
    clip_weights,
    scalar_mul,
    sgd_step,
    zero_grads,
)
from .datasets import Dataset, ensure_valid, subset_by_classes
from .episodes import (
    STREAM_QUERY_NOISE,
    STREAM_TASK_NOISE,
    Task,
    TaskSet,
    sample_batch,
    substream,
)
from .losses import LossReport, loss_ad, loss_d, loss_gc
from .networks import (
    ModelState,
    ModulationVariant,
    NetworkConfig,
    all_params,
    clone_state,
    critic_params,
    generator_classifier_params,
    init_model,
    load_checkpoint,
    modulation_params,
    save_checkpoint,
)


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    alpha3: float = 1e-3
    beta1: float = 1e-3
    beta2: float = 1e-5
    beta3: float = 1e-5
    sigma_train: float = 0.1
    sigma_test: float = 1.0
    n_way: int = 10
    k_sup: int = 5
    k_qry: int = 3
    tasks_per_batch: int = 10
    epochs: int = 1000
    clip_c: float = 0.01
    seed: int = 0
    modulation_variant: str = "base,+,sigmoid,bias"
    first_order: bool = True
    inner_steps: int = 1
    outer_optimizer: str = "sgd"  # sgd | adam
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    coeff_g: float = 1.0
    coeff_ad: float = 1.0
    coeff_cls: float = 1.0
    checkpoint_interval: int = 0  # 0: only the final checkpoint

    def validate(self) -> None:
        for name in ("alpha1", "alpha2", "alpha3", "beta1", "beta2", "beta3"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be > 0")
        if self.sigma_train <= 0 or self.sigma_test <= 0:
            raise TrainingError("sigma_train and sigma_test must be > 0")
        if self.clip_c <= 0:
            raise TrainingError("clip_c must be > 0")
        if self.inner_steps < 1:
            raise TrainingError("inner_steps must be >= 1")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown outer_optimizer {self.outer_optimizer!r}")
        if not self.first_order and self.inner_steps != 1:
            raise TrainingError("second-order mode supports a single inner step")
        ModulationVariant.parse(self.modulation_variant)


# Objective indices for noise substreams.
_OBJ_CRITIC, _OBJ_RECON, _OBJ_GC = 0, 1, 2


@contextmanager
def _trainable_only(state: ModelState, active: list[Tensor]):
    """Temporarily mark every parameter except ``active`` as constant, so
    tapes stay small and gradients land only where intended."""
    everything = all_params(state)
    active_ids = {id(t) for t in active}
    saved = [(t, t.requires_grad) for t in everything]
    for t in everything:
        t.requires_grad = id(t) in active_ids
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _noise(rng, n_rows: int, z_dim: int, sigma: float) -> np.ndarray:
    return rng.normal(0.0, sigma, size=(n_rows, z_dim))


def _critic_objective(state: ModelState, ts: TaskSet, cfg: TrainConfig, rng) -> Tensor:
    embedding = nets.project_attributes(state, ts.attribute_rows)
    mods = nets.compute_modulation(state, embedding)
    inst_attrs = ts.instance_attributes
    z = _noise(rng, len(ts.labels), state.z_dim, cfg.sigma_train)
    fake = nets.generate(state, inst_attrs, z, mods, train=True)
    real_scores = nets.discriminate(state, ts.features, inst_attrs, train=True, mask_rng=rng)
    fake_scores = nets.discriminate(state, fake, inst_attrs, train=True, mask_rng=rng)
    return loss_d(real_scores, fake_scores)


def _recon_objective(state: ModelState, ts: TaskSet, cfg: TrainConfig, rng) -> Tensor:
    embedding = nets.project_attributes(state, ts.attribute_rows)
    mods = nets.compute_modulation(state, embedding)
    inst_attrs = ts.instance_attributes
    z = _noise(rng, len(ts.labels), state.z_dim, cfg.sigma_train)
    fake = nets.generate(state, inst_attrs, z, mods, train=True)
    recon = nets.reconstruct_attribute(state, fake, train=True, mask_rng=rng)
    return loss_ad(inst_attrs, recon)


def _gc_objective(
    state: ModelState,
    ts: TaskSet,
    cfg: TrainConfig,
    rng,
    update_running: bool = False,
) -> tuple[Tensor, LossReport]:
    embedding = nets.project_attributes(state, ts.attribute_rows)
    mods = nets.compute_modulation(state, embedding)
    inst_attrs = ts.instance_attributes
    z = _noise(rng, len(ts.labels), state.z_dim, cfg.sigma_train)
    fake = nets.generate(state, inst_attrs, z, mods, train=True, update_running=update_running)
    fake_scores = nets.discriminate(state, fake, inst_attrs, train=True, mask_rng=rng)
    recon = nets.reconstruct_attribute(state, fake, train=True, mask_rng=rng)
    logits = nets.classify_aux(state, fake)
    labels = state.seen_index(ts.labels)
    return loss_gc(
        fake_scores, inst_attrs, recon, logits, labels,
        coeff_g=cfg.coeff_g, coeff_ad=cfg.coeff_ad, coeff_cls=cfg.coeff_cls,
    )


def _guard(objective_name: str, fn):
    try:
        return fn()
    except NumericError as err:
        raise TrainingError(f"non-finite value while evaluating {objective_name}: {err}") from err


def inner_adapt(meta: ModelState, task: Task, cfg: TrainConfig, seed_key: tuple[int, ...]) -> ModelState:
    """Fast task adaptation on the support set; returns an adapted copy,
    never mutating the meta parameters."""
    adapted = clone_state(meta)
    sup = task.support
    for step in range(cfg.inner_steps):
        rng = lambda obj: substream(cfg.seed, STREAM_TASK_NOISE, *seed_key, step, obj)

        with _trainable_only(adapted, critic_params(adapted)):
            tape = Tape()
            with tape:
                l_d = _guard("critic objective (support)", lambda: _critic_objective(adapted, sup, cfg, rng(_OBJ_CRITIC)))
            backward(tape, l_d)
        sgd_step(critic_params(adapted), cfg.alpha1, "ascend")
        clip_weights(critic_params(adapted), cfg.clip_c)
        zero_grads(all_params(adapted))

        with _trainable_only(adapted, modulation_params(adapted)):
            tape = Tape()
            with tape:
                l_ad = _guard("reconstruction objective (support)", lambda: _recon_objective(adapted, sup, cfg, rng(_OBJ_RECON)))
            backward(tape, l_ad)
        sgd_step(modulation_params(adapted), cfg.alpha2, "descend")
        zero_grads(all_params(adapted))

        with _trainable_only(adapted, generator_classifier_params(adapted)):
            tape = Tape()
            with tape:
                l_gc, _ = _guard("generator-classifier objective (support)", lambda: _gc_objective(adapted, sup, cfg, rng(_OBJ_GC)))
            backward(tape, l_gc)
        sgd_step(generator_classifier_params(adapted), cfg.alpha3, "descend")
        zero_grads(all_params(adapted))
    return adapted


@dataclass
class _AdamSlots:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


@dataclass
class OuterOptimizer:
    """Applies summed query gradients to the meta parameter groups."""

    cfg: TrainConfig
    slots: dict[str, _AdamSlots] = field(default_factory=dict)

    def apply(self, name: str, params: list[Tensor], grad_sums: list[np.ndarray], rate: float, direction: str) -> None:
        sign = 1.0 if direction == "ascend" else -1.0
        if self.cfg.outer_optimizer == "sgd":
            for p, g in zip(params, grad_sums):
                p.values += sign * rate * g
            return
        slot = self.slots.get(name)
        if slot is None:
            slot = _AdamSlots(m=[np.zeros(p.shape) for p in params], v=[np.zeros(p.shape) for p in params])
            self.slots[name] = slot
        slot.t += 1
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        for p, g, m, v in zip(params, grad_sums, slot.m, slot.v):
            eff = -sign * g  # descend the (possibly negated) objective
            m[:] = b1 * m + (1 - b1) * eff
            v[:] = b2 * v + (1 - b2) * eff * eff
            m_hat = m / (1 - b1 ** slot.t)
            v_hat = v / (1 - b2 ** slot.t)
            p.values -= rate * m_hat / (np.sqrt(v_hat) + eps)


def outer_apply(params: list[Tensor], grad_sums: list[np.ndarray], rate: float, direction: str) -> None:
    """Plain first-order meta update: p +- rate * sum of query gradients."""
    sign = 1.0 if direction == "ascend" else -1.0
    for p, g in zip(params, grad_sums):
        p.values += sign * rate * g


def _collect_grads(params: list[Tensor], sums: list[np.ndarray]) -> None:
    for p, acc in zip(params, sums):
        if p.grad is not None:
            acc += p.grad


def _zero_like(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros(p.shape) for p in params]


def outer_update(
    meta: ModelState,
    batch: list[Task],
    adapted_states: list[ModelState],
    cfg: TrainConfig,
    epoch: int,
    optimizer: OuterOptimizer,
) -> list[LossReport]:
    """First-order meta update from query losses at the adapted parameters.

    Gradients are accumulated in task-index order, so the result does not
    depend on how inner adaptation was scheduled.
    """
    if not batch:
        raise TrainingError("outer_update: empty batch")
    if len(batch) != len(adapted_states):
        raise TrainingError("outer_update: one adapted state per task required")
    sums_critic = _zero_like(critic_params(meta))
    sums_mod = _zero_like(modulation_params(meta))
    sums_gc = _zero_like(generator_classifier_params(meta))
    reports = []
    for i, (task, adapted) in enumerate(zip(batch, adapted_states)):
        rng = lambda obj: substream(cfg.seed, STREAM_QUERY_NOISE, epoch, i, obj)
        qry = task.query

        with _trainable_only(adapted, critic_params(adapted)):
            tape = Tape()
            with tape:
                l_d = _guard("critic objective (query)", lambda: _critic_objective(adapted, qry, cfg, rng(_OBJ_CRITIC)))
            backward(tape, l_d)
        _collect_grads(critic_params(adapted), sums_critic)
        zero_grads(all_params(adapted))

        with _trainable_only(adapted, modulation_params(adapted)):
            tape = Tape()
            with tape:
                l_ad = _guard("reconstruction objective (query)", lambda: _recon_objective(adapted, qry, cfg, rng(_OBJ_RECON)))
            backward(tape, l_ad)
        _collect_grads(modulation_params(adapted), sums_mod)
        zero_grads(all_params(adapted))

        with _trainable_only(adapted, generator_classifier_params(adapted)):
            tape = Tape()
            with tape:
                l_gc, report = _guard(
                    "generator-classifier objective (query)",
                    lambda: _gc_objective(adapted, qry, cfg, rng(_OBJ_GC), update_running=True),
                )
            backward(tape, l_gc)
        _collect_grads(generator_classifier_params(adapted), sums_gc)
        zero_grads(all_params(adapted))
        reports.append(replace(report, l_d=l_d.item()))

    optimizer.apply("critic", critic_params(meta), sums_critic, cfg.beta1, "ascend")
    optimizer.apply("modulation", modulation_params(meta), sums_mod, cfg.beta2, "descend")
    optimizer.apply("gen_cls", generator_classifier_params(meta), sums_gc, cfg.beta3, "descend")
    clip_weights(critic_params(meta), cfg.clip_c)
    return reports


# ---------------------------------------------------------------------------
# Exact second-order mode
# ---------------------------------------------------------------------------


def _second_order_group(
    meta: ModelState,
    adapted: ModelState,
    support_state: ModelState,
    hybridize,
    group_of,
    support_loss,
    query_loss,
    rate: float,
    direction: str,
    clip_c: float | None,
    sums: list[np.ndarray],
) -> Tensor:
    """Accumulate exact meta-gradients for one parameter group.

    Builds, on a single tape: the support loss at the meta parameters of
    the group (``support_state`` supplies the surrounding context, for the
    generator-classifier group that means the already-adapted critic and
    modulation path), the inner step as recorded ops (double backward),
    then the query loss at the stepped parameters with the other groups
    held at their adapted values. The final backward therefore
    differentiates through the inner step, including the critic's
    clipping mask.
    """
    group = group_of(meta)
    others = all_params(adapted)
    saved = [(t, t.requires_grad) for t in others]
    for t in others:
        t.requires_grad = False
    try:
        with _trainable_only(meta, group):
            tape = Tape()
            with tape:
                l_sup = support_loss(support_state)
                grads = backward_graph(tape, l_sup, group)
                sign = 1.0 if direction == "ascend" else -1.0
                stepped = [add(p, scalar_mul(g, sign * rate)) for p, g in zip(group, grads)]
                if clip_c is not None:
                    stepped = [clamp(t, -clip_c, clip_c) for t in stepped]
                hybrid = hybridize(adapted, stepped)
                l_qry = query_loss(hybrid)
            backward(tape, l_qry)
        _collect_grads(group, sums)
        zero_grads(all_params(meta))
        return l_qry
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _rebuild_mlp(tensors: list[Tensor], template: nets.Mlp) -> nets.Mlp:
    layers = []
    it = iter(tensors)
    for _ in template.layers:
        layers.append(nets.Dense(weight=next(it), bias=next(it)))
    return nets.Mlp(layers=layers)


def _hybrid_critic(adapted: ModelState, stepped: list[Tensor]) -> ModelState:
    return replace(adapted, critic=_rebuild_mlp(stepped, adapted.critic))


def _hybrid_modulation(adapted: ModelState, stepped: list[Tensor]) -> ModelState:
    it = iter(stepped)
    take = lambda m: _rebuild_mlp([next(it) for _ in range(2 * len(m.layers))], m)
    projector = take(adapted.projector)
    modulators = [take(m) for m in adapted.modulators]
    decoder = take(adapted.attr_decoder)
    return replace(adapted, projector=projector, modulators=modulators, attr_decoder=decoder)


def _hybrid_gen_cls(adapted: ModelState, stepped: list[Tensor]) -> ModelState:
    it = iter(stepped)
    layers = [
        nets.Dense(weight=next(it), bias=next(it)) for _ in adapted.generator.layers
    ]
    norms = []
    for norm in adapted.generator.norms:
        norms.append(
            nets.BatchNorm(
                gamma=next(it),
                beta=next(it),
                running_mean=norm.running_mean,
                running_var=norm.running_var,
                momentum=norm.momentum,
            )
        )
    classifier = _rebuild_mlp([next(it) for _ in range(2 * len(adapted.classifier.layers))], adapted.classifier)
    return replace(adapted, generator=nets.Generator(layers=layers, norms=norms), classifier=classifier)


def second_order_update(
    meta: ModelState,
    batch: list[Task],
    cfg: TrainConfig,
    epoch: int,
    optimizer: OuterOptimizer,
) -> list[LossReport]:
    """Meta update differentiating exactly through the single inner step."""
    sums_critic = _zero_like(critic_params(meta))
    sums_mod = _zero_like(modulation_params(meta))
    sums_gc = _zero_like(generator_classifier_params(meta))
    reports = []
    for i, task in enumerate(batch):
        seed_key = (epoch, i)
        adapted = inner_adapt(meta, task, cfg, seed_key)
        rng_sup = lambda obj: substream(cfg.seed, STREAM_TASK_NOISE, epoch, i, 0, obj)
        rng_qry = lambda obj: substream(cfg.seed, STREAM_QUERY_NOISE, epoch, i, obj)

        l_d = _second_order_group(
            meta, adapted, meta, _hybrid_critic, critic_params,
            lambda s: _critic_objective(s, task.support, cfg, rng_sup(_OBJ_CRITIC)),
            lambda s: _critic_objective(s, task.query, cfg, rng_qry(_OBJ_CRITIC)),
            cfg.alpha1, "ascend", cfg.clip_c, sums_critic,
        )
        _second_order_group(
            meta, adapted, meta, _hybrid_modulation, modulation_params,
            lambda s: _recon_objective(s, task.support, cfg, rng_sup(_OBJ_RECON)),
            lambda s: _recon_objective(s, task.query, cfg, rng_qry(_OBJ_RECON)),
            cfg.alpha2, "descend", None, sums_mod,
        )
        report_holder: list[LossReport] = []

        def gc_support(s):
            total, _ = _gc_objective(s, task.support, cfg, rng_sup(_OBJ_GC))
            return total

        def gc_query(s):
            total, rep = _gc_objective(s, task.query, cfg, rng_qry(_OBJ_GC), update_running=True)
            report_holder.append(rep)
            return total

        # support context for the generator-classifier step: the critic and
        # modulation path have already taken their inner steps.
        gc_support_state = replace(adapted, generator=meta.generator, classifier=meta.classifier)
        _second_order_group(
            meta, adapted, gc_support_state, _hybrid_gen_cls, generator_classifier_params,
            gc_support, gc_query,
            cfg.alpha3, "descend", None, sums_gc,
        )
        reports.append(replace(report_holder[0], l_d=l_d.item()))

    optimizer.apply("critic", critic_params(meta), sums_critic, cfg.beta1, "ascend")
    optimizer.apply("modulation", modulation_params(meta), sums_mod, cfg.beta2, "descend")
    optimizer.apply("gen_cls", generator_classifier_params(meta), sums_gc, cfg.beta3, "descend")
    clip_weights(critic_params(meta), cfg.clip_c)
    return reports


# ---------------------------------------------------------------------------
# The training loop
# ---------------------------------------------------------------------------


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    net_cfg: NetworkConfig | None = None,
    out_dir=None,
    config_hash: str = "",
    resume_from=None,
    log_fn=None,
) -> tuple[ModelState, list[dict]]:
    """Run the full episodic loop; returns the final state and one history
    row per epoch (mean query losses and wall time).

    With ``out_dir`` set, writes ``train.log`` (one row per epoch),
    ``tasks.log`` (one row per task) and checkpoints. Training halts with
    :class:`TrainingError` on a non-finite loss; the last written
    checkpoint stays on disk.
    """
    cfg.validate()
    ensure_valid(dataset)
    net_cfg = net_cfg or NetworkConfig()
    seen_sorted = tuple(sorted(dataset.split.seen))
    if resume_from is not None:
        state, extra = load_checkpoint(resume_from)
        start_epoch = int(extra.get("epoch", "0"))
        if config_hash and extra.get("config_hash") and extra["config_hash"] != config_hash:
            raise TrainingError(
                f"checkpoint was trained with config {extra['config_hash']}, current is {config_hash}"
            )
    else:
        state = init_model(
            net_cfg,
            feat_dim=dataset.feat_dim,
            attr_dim=dataset.attr_dim,
            seen_classes=seen_sorted,
            variant=ModulationVariant.parse(cfg.modulation_variant),
            seed=cfg.seed,
        )
        start_epoch = 0
    if state.attr_dim != dataset.attr_dim or state.feat_dim != dataset.feat_dim:
        raise TrainingError(
            f"model dims (feat {state.feat_dim}, attr {state.attr_dim}) do not match "
            f"dataset (feat {dataset.feat_dim}, attr {dataset.attr_dim})"
        )
    seen_view = subset_by_classes(dataset, dataset.split.seen)
    optimizer = OuterOptimizer(cfg)
    history: list[dict] = []

    epoch_log = task_log = None
    last_checkpoint = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        epoch_log = open(os.path.join(out_dir, "train.log"), "a", encoding="utf-8")
        task_log = open(os.path.join(out_dir, "tasks.log"), "a", encoding="utf-8")
        if start_epoch == 0:
            epoch_log.write("epoch\tl_d\tl_g\tl_ad\tl_cls\twall_time\n")
            task_log.write("epoch\ttask\tl_d\tl_g\tl_ad\tl_cls\n")

    def checkpoint(epoch: int, name: str) -> None:
        nonlocal last_checkpoint
        if out_dir is None:
            return
        path = os.path.join(out_dir, name)
        save_checkpoint(state, path, extra={"epoch": str(epoch), "config_hash": config_hash})
        last_checkpoint = path

    try:
        for epoch in range(start_epoch, cfg.epochs):
            started = time.perf_counter()
            batch = sample_batch(
                seen_view, cfg.n_way, cfg.k_sup, cfg.k_qry, cfg.tasks_per_batch, cfg.seed, epoch
            )
            if cfg.first_order:
                adapted = [
                    inner_adapt(state, task, cfg, (epoch, i)) for i, task in enumerate(batch)
                ]
                reports = outer_update(state, batch, adapted, cfg, epoch, optimizer)
            else:
                reports = second_order_update(state, batch, cfg, epoch, optimizer)
            wall = time.perf_counter() - started
            row = {
                "epoch": epoch,
                "l_d": float(np.mean([r.l_d for r in reports])),
                "l_g": float(np.mean([r.l_g for r in reports])),
                "l_ad": float(np.mean([r.l_ad for r in reports])),
                "l_cls": float(np.mean([r.l_cls for r in reports])),
                "wall_time": wall,
            }
            history.append(row)
            if epoch_log is not None:
                epoch_log.write(
                    f"{epoch}\t{row['l_d']:.6f}\t{row['l_g']:.6f}\t{row['l_ad']:.6f}"
                    f"\t{row['l_cls']:.6f}\t{wall:.3f}\n"
                )
                for i, r in enumerate(reports):
                    task_log.write(f"{epoch}\t{i}\t{r.l_d:.6f}\t{r.l_g:.6f}\t{r.l_ad:.6f}\t{r.l_cls:.6f}\n")
            if log_fn is not None:
                log_fn(row)
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                checkpoint(epoch + 1, f"checkpoint_{epoch + 1}.ckpt")
    except TrainingError as err:
        if last_checkpoint is not None:
            raise TrainingError(f"{err} (last good checkpoint: {last_checkpoint})") from err
        raise
    finally:
        if epoch_log is not None:
            epoch_log.close()
            task_log.close()
    checkpoint(cfg.epochs, "checkpoint_final.ckpt")
    return state, history
