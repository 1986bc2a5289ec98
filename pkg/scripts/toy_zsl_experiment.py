"""End-to-end toy benchmark: train the meta-model on the synthetic linear
dataset, synthesize unseen-class features, train the weighted softmax
classifier on them, and report unseen per-class top-1.

Run from the repo root:  python3 scripts/toy_zsl_experiment.py [epochs]
"""

import sys
import time

import numpy as np

from zslgen import evaluation as ev
from zslgen import networks as nets
from zslgen import synthesis as syn
from zslgen.datasets import make_toy_dataset
from zslgen.networks import NetworkConfig
from zslgen.training import TrainConfig, train

TOY_NET = NetworkConfig(
    gen_hidden=(96,),
    critic_hidden=(64,),
    decoder_hidden=(64,),
    projector_hidden=(64,),
    modulator_hidden=(64,),
    embed_dim=48,
    z_dim=16,
)

TOY_TRAIN = TrainConfig(
    n_way=4,
    k_sup=5,
    k_qry=3,
    tasks_per_batch=4,
    epochs=2000,
    alpha1=1e-3,
    alpha2=1e-3,
    alpha3=1e-3,
    beta1=1e-3,
    beta2=1e-3,
    beta3=1e-3,
    sigma_train=0.1,
    sigma_test=0.3,
    clip_c=0.01,
    outer_optimizer="adam",
    seed=7,
)


def run(epochs: int, seed: int = 7, log_every: int = 200):
    cfg = TrainConfig(**{**TOY_TRAIN.__dict__, "epochs": epochs, "seed": seed})
    dataset = make_toy_dataset(
        n_seen=8, n_unseen=2, attr_dim=16, feat_dim=64, per_class=100,
        noise_sigma=0.05, seed=42,
    )
    started = time.perf_counter()
    state, history = train(
        dataset, cfg, TOY_NET,
        log_fn=lambda row: (
            print(
                f"epoch {row['epoch']:5d}  l_d {row['l_d']:+.4f}  l_g {row['l_g']:+.4f}  "
                f"l_ad {row['l_ad']:.4f}  l_cls {row['l_cls']:.4f}"
            )
            if row["epoch"] % log_every == 0
            else None
        ),
    )
    train_time = time.perf_counter() - started

    synthetic = syn.synthesize_classes(
        state, dataset, dataset.split.unseen, count=100,
        sigma=cfg.sigma_test, n_way=cfg.n_way, seed=cfg.seed,
    )
    clf = syn.train_softmax_classifier(
        synthetic, sorted(dataset.split.unseen), epochs=20, seed=cfg.seed, weighted=True,
    )
    unseen_mask = np.isin(dataset.labels, dataset.split.unseen)
    preds = syn.predict(clf, dataset.features.values[unseen_mask])
    report = ev.per_class_top1(preds, dataset.labels[unseen_mask], dataset.split.unseen)
    total = time.perf_counter() - started
    print(f"\ntrain {train_time:.1f}s, total {total:.1f}s")
    print(f"mean synthetic quality: {synthetic.quality.mean():.4f}")
    print(f"per-class accuracy: { {c: round(a, 4) for c, a in report.per_class_acc.items()} }")
    print(f"unseen per-class top-1: {report.mean_acc:.4f}")
    return report.mean_acc, total


if __name__ == "__main__":
    epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 7
    run(epochs, seed)
