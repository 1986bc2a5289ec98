"""Command-line entry point.

Subcommands: train, synthesize, eval-zsl, eval-gzsl, retrieve, sweep,
gradcheck, toygen. Every run writes its artifacts and the fully resolved
configuration into the output directory, and evaluation reports carry the
sha256 of the checkpoint they scored.

Exit codes: 0 success, 1 failed verification or unexpected error,
2 configuration/usage error, 3 data error, 4 numeric/training error.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import evaluation as ev
from . import networks as nets
from . import synthesis as syn
from .autodiff import NumericError, Tensor, grad_check, reduce_mean
from .config import ConfigError, ExperimentConfig, config_hash, parse_config, serialize_config
from .datasets import DataError, load_dataset, make_toy_dataset, save_dataset
from .episodes import SamplingError
from .networks import CheckpointError, ModulationVariant, NetworkConfig
from .synthesis import SynthesisError
from .training import TrainConfig, TrainingError, train


def _file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _write(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _echo_config(cfg: ExperimentConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write(os.path.join(cfg.out_dir, "config.resolved.ini"), serialize_config(cfg))


def _load_data(cfg: ExperimentConfig):
    paths = (cfg.data.features, cfg.data.attributes, cfg.data.labels, cfg.data.split)
    if not all(paths):
        raise ConfigError("[data] features, attributes, labels and split paths are all required")
    return load_dataset(*paths)


def _load_model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this command")
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    state, extra = nets.load_checkpoint(args.checkpoint)
    return state, extra, _file_sha256(args.checkpoint)


def _train_classifier(name: str, synthetic, class_ids, cfg: ExperimentConfig):
    c = cfg.classifier
    if name in ("softmax", "weighted-soft"):
        return syn.train_softmax_classifier(
            synthetic,
            class_ids,
            epochs=c.softmax_epochs,
            lr=c.softmax_lr,
            hidden=c.softmax_hidden,
            batch_size=c.softmax_batch,
            seed=cfg.train.seed,
            weighted=name == "weighted-soft",
            allow_negative_quality=c.allow_negative_quality,
        )
    weights = syn.class_weights(synthetic) if name == "weighted-svm" else None
    return syn.train_svm_classifier(
        synthetic,
        weights,
        reg_c=c.svm_reg,
        epochs=c.svm_epochs,
        lr=c.svm_lr,
        clip_negative=not c.allow_negative_quality,
    )


def cmd_toygen(cfg: ExperimentConfig, args) -> int:
    ds = make_toy_dataset(
        n_seen=args.toy_seen,
        n_unseen=args.toy_unseen,
        attr_dim=args.toy_attr_dim,
        feat_dim=args.toy_feat_dim,
        per_class=args.toy_per_class,
        noise_sigma=args.toy_noise,
        seed=cfg.train.seed,
    )
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    save_dataset(
        ds,
        os.path.join(out, "features.zslf"),
        os.path.join(out, "attributes.zsla"),
        os.path.join(out, "labels.zsll"),
        os.path.join(out, "split.txt"),
    )
    _echo_config(cfg)
    print(f"toy dataset written to {out} "
          f"({ds.n_images} images, {ds.n_classes} classes, feat {ds.feat_dim}, attr {ds.attr_dim})")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    dataset = _load_data(cfg)
    _echo_config(cfg)
    state, history = train(
        dataset,
        cfg.train,
        cfg.network,
        out_dir=cfg.out_dir,
        config_hash=config_hash(cfg),
        resume_from=args.resume,
    )
    final = os.path.join(cfg.out_dir, "checkpoint_final.ckpt")
    last = history[-1] if history else {}
    print(f"trained {len(history)} epochs; checkpoint: {final}")
    if last:
        print(
            "final losses: "
            f"l_d={last['l_d']:.4f} l_g={last['l_g']:.4f} "
            f"l_ad={last['l_ad']:.4f} l_cls={last['l_cls']:.4f}"
        )
    return 0


def _synthesize_unseen(state, dataset, cfg: ExperimentConfig, count: int):
    return syn.synthesize_classes(
        state,
        dataset,
        dataset.split.unseen,
        count,
        cfg.train.sigma_test,
        cfg.train.n_way,
        cfg.train.seed,
    )


def cmd_synthesize(cfg: ExperimentConfig, args) -> int:
    dataset = _load_data(cfg)
    state, _, sha = _load_model(args)
    synthetic = _synthesize_unseen(state, dataset, cfg, cfg.classifier.samples_per_class_zsl)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    syn.export_synthetic(
        synthetic,
        os.path.join(out, "synthetic.zslf"),
        os.path.join(out, "synthetic.zsll"),
        os.path.join(out, "synthetic.quality"),
    )
    _echo_config(cfg)
    print(f"synthesized {len(synthetic.labels)} features (checkpoint {sha}) into {out}")
    return 0


def _zsl_accuracy(state, dataset, cfg: ExperimentConfig, count: int, sigma: float | None = None):
    """Shared core of eval-zsl and sweep: synthesize unseen features, train
    the configured classifier on them, score real unseen images."""
    sigma = cfg.train.sigma_test if sigma is None else sigma
    synthetic = syn.synthesize_classes(
        state, dataset, dataset.split.unseen, count, sigma, cfg.train.n_way, cfg.train.seed
    )
    classifier = _train_classifier(cfg.classifier.classifier, synthetic, sorted(dataset.split.unseen), cfg)
    unseen_mask = np.isin(dataset.labels, sorted(dataset.split.unseen))
    preds = syn.predict(classifier, dataset.features.values[unseen_mask])
    report = ev.per_class_top1(preds, dataset.labels[unseen_mask], dataset.split.unseen)
    return ev.EvalReport(
        per_class_acc={c: 100.0 * a for c, a in report.per_class_acc.items()},
        mean_acc=100.0 * report.mean_acc,
    )


def cmd_eval_zsl(cfg: ExperimentConfig, args) -> int:
    dataset = _load_data(cfg)
    state, _, sha = _load_model(args)
    report = _zsl_accuracy(state, dataset, cfg, cfg.classifier.samples_per_class_zsl)
    text = ev.format_report(
        report,
        extra={
            "protocol": "zsl",
            "classifier": cfg.classifier.classifier,
            "samples_per_class": cfg.classifier.samples_per_class_zsl,
            "sigma_test": cfg.train.sigma_test,
            "checkpoint_sha256": sha,
        },
    )
    _echo_config(cfg)
    _write(os.path.join(cfg.out_dir, "zsl_report.txt"), text)
    print(text, end="")
    return 0


def cmd_eval_gzsl(cfg: ExperimentConfig, args) -> int:
    dataset = _load_data(cfg)
    state, _, sha = _load_model(args)
    synthetic = syn.build_gzsl_training_set(
        state,
        dataset,
        cfg.classifier.samples_per_class_gzsl,
        cfg.train.sigma_test,
        cfg.train.n_way,
        cfg.train.seed,
        seen_mode=cfg.classifier.gzsl_seen_mode,
    )
    classifier = _train_classifier(
        cfg.classifier.classifier, synthetic, range(dataset.n_classes), cfg
    )
    preds = syn.predict(classifier, dataset.features.values)
    report = ev.gzsl_report(preds, dataset.labels, dataset)
    text = ev.format_report(
        report,
        extra={
            "protocol": "gzsl",
            "classifier": cfg.classifier.classifier,
            "samples_per_class": cfg.classifier.samples_per_class_gzsl,
            "gzsl_seen_mode": cfg.classifier.gzsl_seen_mode,
            "checkpoint_sha256": sha,
        },
    )
    _echo_config(cfg)
    _write(os.path.join(cfg.out_dir, "gzsl_report.txt"), text)
    print(text, end="")
    return 0


def cmd_retrieve(cfg: ExperimentConfig, args) -> int:
    dataset = _load_data(cfg)
    state, _, sha = _load_model(args)
    report = ev.retrieval_eval(
        state,
        dataset,
        ks=cfg.eval.retrieval_ks,
        samples_per_class=cfg.classifier.samples_per_class_zsl,
        sigma=cfg.train.sigma_test,
        n_way=cfg.train.n_way,
        seed=cfg.train.seed,
        metric=cfg.eval.retrieval_metric,
        pool=cfg.eval.retrieval_pool,
    )
    text = ev.format_retrieval_report(
        report,
        extra={
            "metric": cfg.eval.retrieval_metric,
            "pool": cfg.eval.retrieval_pool,
            "checkpoint_sha256": sha,
        },
    )
    _echo_config(cfg)
    _write(os.path.join(cfg.out_dir, "retrieval_report.txt"), text)
    print(text, end="")
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    dataset = _load_data(cfg)
    state, _, sha = _load_model(args)
    _echo_config(cfg)
    summary = ["samples\tsigma\tmean_acc"]
    for count in cfg.sweep.sample_counts:
        for sigma in cfg.sweep.sigmas:
            report = _zsl_accuracy(state, dataset, cfg, count, sigma=sigma)
            name = f"sweep_s{count}_sig{_fmt_sigma(sigma)}.txt"
            text = ev.format_report(
                report,
                extra={
                    "protocol": "zsl-sweep",
                    "samples_per_class": count,
                    "sigma_test": sigma,
                    "checkpoint_sha256": sha,
                },
            )
            _write(os.path.join(cfg.out_dir, "sweep", name), text)
            summary.append(f"{count}\t{sigma}\t{report.mean_acc:.2f}")
    _write(os.path.join(cfg.out_dir, "sweep", "summary.tsv"), "\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def _fmt_sigma(sigma: float) -> str:
    return str(sigma).replace(".", "p")


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    """Finite-difference verification of the network compositions at small
    dimensions; fails the command when any check misses tolerance."""
    from zslgen import losses

    rng = np.random.default_rng(cfg.train.seed)
    net = NetworkConfig(
        gen_hidden=(6,), critic_hidden=(6,), decoder_hidden=(5,),
        projector_hidden=(5,), modulator_hidden=(5,), embed_dim=4, z_dim=3,
    )
    state = nets.init_model(net, 5, 3, (0, 1, 2), ModulationVariant.parse(cfg.train.modulation_variant), cfg.train.seed)
    attrs = rng.uniform(size=(4, 3))
    z = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, size=4)

    def full_path():
        e = nets.project_attributes(state, attrs)
        mods = nets.compute_modulation(state, e)
        fake = nets.generate(state, attrs, z, mods, train=True)
        return reduce_mean(nets.discriminate(state, fake, attrs, train=False))

    def classifier_path():
        mods = nets.compute_modulation(state, nets.project_attributes(state, attrs))
        fake = nets.generate(state, attrs, z, mods, train=True)
        from zslgen.autodiff import softmax_cross_entropy

        return softmax_cross_entropy(nets.classify_aux(state, fake), labels)

    def decoder_path():
        mods = nets.compute_modulation(state, nets.project_attributes(state, attrs))
        fake = nets.generate(state, attrs, z, mods, train=True)
        return losses.loss_ad(attrs, nets.reconstruct_attribute(state, fake, train=False))

    checks = {
        "projector-modulator-generator-critic": full_path,
        "generator-classifier": classifier_path,
        "generator-decoder": decoder_path,
    }
    lines = []
    ok = True
    for name, build in checks.items():
        report = grad_check(build, nets.all_params(state), tolerance=1e-5)
        status = "pass" if report.passed else "FAIL"
        ok &= report.passed
        lines.append(f"{name}: {status} (max rel err {report.max_rel_error:.3e}, {report.n_entries} entries)")
    text = "\n".join(lines) + "\n"
    _echo_config(cfg)
    _write(os.path.join(cfg.out_dir, "gradcheck_report.txt"), text)
    print(text, end="")
    return 0 if ok else 1


_COMMANDS = {
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "eval-zsl": cmd_eval_zsl,
    "eval-gzsl": cmd_eval_gzsl,
    "retrieve": cmd_retrieve,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "toygen": cmd_toygen,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zslgen",
        description="Attribute-conditioned feature synthesis for zero-shot classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="config file (key = value lines)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--classifier", default=None,
                       choices=["softmax", "weighted-soft", "svm", "weighted-svm"])
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--sigma-test", type=float, default=None)
        p.add_argument("--samples", type=int, default=None,
                       help="synthetic samples per class for this command")
        p.add_argument("--gzsl-seen-mode", default=None, choices=["synthetic", "real"])
        p.add_argument("--first-order", default=None, choices=["true", "false"])
        p.add_argument("--mod-variant", default=None,
                       help="modulation variant, e.g. 'base,+,sigmoid,bias'")
        if name in ("synthesize", "eval-zsl", "eval-gzsl", "retrieve", "sweep"):
            p.add_argument("--checkpoint", default=None, required=False)
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
        if name == "toygen":
            p.add_argument("--toy-seen", type=int, default=8)
            p.add_argument("--toy-unseen", type=int, default=2)
            p.add_argument("--toy-attr-dim", type=int, default=16)
            p.add_argument("--toy-feat-dim", type=int, default=64)
            p.add_argument("--toy-per-class", type=int, default=100)
            p.add_argument("--toy-noise", type=float, default=0.05)
    return parser


def _overrides_from(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    if args.sigma_test is not None:
        overrides["train.sigma_test"] = repr(args.sigma_test)
    if args.first_order is not None:
        overrides["train.first_order"] = args.first_order
    if args.mod_variant is not None:
        overrides["train.modulation_variant"] = args.mod_variant
    if args.classifier is not None:
        overrides["classifier.classifier"] = args.classifier
    if args.gzsl_seen_mode is not None:
        overrides["classifier.gzsl_seen_mode"] = args.gzsl_seen_mode
    if args.samples is not None:
        key = (
            "classifier.samples_per_class_gzsl"
            if args.command == "eval-gzsl"
            else "classifier.samples_per_class_zsl"
        )
        overrides[key] = str(args.samples)
    if args.out is not None:
        overrides["output.out_dir"] = args.out
    return overrides


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, _overrides_from(args))
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, SamplingError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (NumericError, TrainingError, SynthesisError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 4
    except ev.EvalError as err:
        print(f"evaluation error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
