"""Training objectives for the adversarial meta-model.

Three pieces, combined per task:

* critic objective: mean real score minus mean fake score. The trainer
  *ascends* this for the critic and the generator *descends* its negated
  fake term, so the two sides play an exact zero-sum game on the fake
  batch.
* reconstruction objective: mean squared distance between each instance's
  true attribute vector and the decoder's reconstruction from the feature
  generated for it.
* generator-classifier objective: negated mean fake score, plus the
  reconstruction term, plus cross entropy of the auxiliary classifier,
  each scaled by a coefficient defaulting to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    reduce_mean,
    scalar_mul,
    softmax_cross_entropy,
    squared_l2,
    sub,
)


@dataclass(frozen=True)
class LossReport:
    """Scalar loss values of one evaluation (combined = l_g + l_ad + l_cls
    at unit coefficients)."""

    l_d: float
    l_g: float
    l_ad: float
    l_cls: float
    l_gc: float


def loss_ad(attrs, recon) -> Tensor:
    """(1/B) * sum of squared row distances between attributes and
    reconstructions."""
    a = attrs if isinstance(attrs, Tensor) else Tensor(attrs)
    r = recon if isinstance(recon, Tensor) else Tensor(recon)
    if a.shape != r.shape:
        raise DimensionError(f"loss_ad: {a.shape} vs {r.shape}")
    return scalar_mul(squared_l2(sub(a, r)), 1.0 / a.rows)


def loss_d(real_scores, fake_scores) -> Tensor:
    """mean(real) - mean(fake); ascended by the critic."""
    real = real_scores if isinstance(real_scores, Tensor) else Tensor(real_scores)
    fake = fake_scores if isinstance(fake_scores, Tensor) else Tensor(fake_scores)
    if real.values.size == 0 or fake.values.size == 0:
        raise DimensionError("loss_d: empty score vector")
    return sub(reduce_mean(real), reduce_mean(fake))


def loss_g(fake_scores) -> Tensor:
    """-mean(fake); the generator's adversarial term."""
    fake = fake_scores if isinstance(fake_scores, Tensor) else Tensor(fake_scores)
    if fake.values.size == 0:
        raise DimensionError("loss_g: empty score vector")
    return scalar_mul(reduce_mean(fake), -1.0)


def loss_gc(
    fake_scores,
    attrs,
    recon,
    logits,
    labels,
    coeff_g: float = 1.0,
    coeff_ad: float = 1.0,
    coeff_cls: float = 1.0,
) -> tuple[Tensor, LossReport]:
    """Combined generator-classifier objective and its term breakdown.

    Gradient flow note: callers freeze the critic and decoder parameters
    for this objective (their scores/reconstructions still backpropagate
    into the generated features); see the trainer.
    """
    term_g = loss_g(fake_scores)
    term_ad = loss_ad(attrs, recon)
    term_cls = softmax_cross_entropy(logits, labels)
    total = add(
        add(scalar_mul(term_g, coeff_g), scalar_mul(term_ad, coeff_ad)),
        scalar_mul(term_cls, coeff_cls),
    )
    report = LossReport(
        l_d=0.0,
        l_g=term_g.item(),
        l_ad=term_ad.item(),
        l_cls=term_cls.item(),
        l_gc=total.item(),
    )
    return total, report
