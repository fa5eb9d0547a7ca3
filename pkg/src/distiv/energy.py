"""Energy-score loss and energy distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import nn
from .errors import InputError, ShapeError


@dataclass(frozen=True)
class EnergyLossParts:
    """``loss = s1 - 0.5 * s2``; s1 is the prediction term, s2 the variation term."""

    s1: float
    s2: float
    loss: float


def _shape_of(x):
    return nn._val(x).shape


def _check_triplet(observed, gen_a, gen_b):
    shapes = {_shape_of(observed), _shape_of(gen_a), _shape_of(gen_b)}
    if len(shapes) != 1:
        raise ShapeError(f"observed and generated samples differ in shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) != 2:
        raise ShapeError("energy loss expects 2-D (rows x columns) inputs")
    if shape[0] == 0:
        raise InputError("energy loss needs at least one row")


def energy_terms(observed, draws):
    """Traced (s1, s2) for any number >= 2 of generator draws.

    s1 averages the distance to the observation over all draws, s2 averages
    the distance over all distinct pairs of draws.  Both operate row-wise.
    """
    if len(draws) < 2:
        raise InputError("the variation term needs at least two draws")
    s1_terms = [nn.mean(nn.row_norm(nn.sub(d, observed))) for d in draws]
    s2_terms = [
        nn.mean(nn.row_norm(nn.sub(draws[i], draws[j])))
        for i in range(len(draws))
        for j in range(i + 1, len(draws))
    ]
    return _average(s1_terms), _average(s2_terms)


def _average(terms):
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return nn.mul(total, 1.0 / len(terms))


def energy_loss_parts(observed, gen_a, gen_b) -> EnergyLossParts:
    """Empirical energy loss of two row-paired generator draws against data."""
    _check_triplet(observed, gen_a, gen_b)
    observed, gen_a, gen_b = (np.asarray(a, dtype=np.float64) for a in (observed, gen_a, gen_b))
    s1 = float(np.mean(nn.row_norm(gen_a - observed)))
    s2 = float(np.mean(nn.row_norm(gen_a - gen_b)))
    return EnergyLossParts(s1, s2, s1 - 0.5 * s2)


def energy_loss(observed, gen_a, gen_b):
    """Differentiable version of :func:`energy_loss_parts` returning ``(loss, s1, s2)``.

    Accepts tape tensors; ``s1`` and ``s2`` are returned as tensors too.
    """
    _check_triplet(observed, gen_a, gen_b)
    s1 = nn.mean(nn.row_norm(nn.sub(gen_a, observed)))
    s2 = nn.mean(nn.row_norm(nn.sub(gen_a, gen_b)))
    return nn.sub(s1, nn.mul(s2, 0.5)), s1, s2


def engression_loss(observed_y, gen_a, gen_b) -> float:
    """Negative empirical energy score of a conditional generator on outcomes."""
    return energy_loss_parts(observed_y, gen_a, gen_b).loss


def energy_distance(sample_a, sample_b, unbiased: bool = False) -> float:
    """Two-sample energy distance ``2 E|a-b| - E|a-a'| - E|b-b'|``.

    The default V-statistic averages within-sample distances over all n^2
    pairs, so it is nonnegative and exactly 0 for identical multisets.
    ``unbiased=True`` drops the self pairs (U-statistic, can go negative).
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise InputError("energy distance needs at least two rows per sample")
    cross = cdist(a, b).mean()
    da, db = (na * (na - 1), nb * (nb - 1)) if unbiased else (na * na, nb * nb)
    within_a = cdist(a, a).sum() / da
    within_b = cdist(b, b).sum() / db
    return float(2.0 * cross - within_a - within_b)
