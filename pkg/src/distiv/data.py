"""Row-aligned instrument/treatment/outcome containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError


def as_matrix(values, name="array"):
    """Coerce to a 2-D float64 array; vectors become single columns."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 1-D or 2-D, got {arr.ndim}-D")
    return arr


def _default_names(prefix, k):
    return tuple(prefix if k == 1 else f"{prefix}{i + 1}" for i in range(k))


@dataclass(frozen=True)
class Dataset:
    """Instrument ``z``, treatment ``x``, outcome ``y`` and optional covariates ``w``.

    ``hidden`` carries the simulated confounder for debugging only; no
    estimator reads it.
    """

    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray | None = None
    names: dict = field(default_factory=dict)
    hidden: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "z", as_matrix(self.z, "z"))
        object.__setattr__(self, "x", as_matrix(self.x, "x"))
        object.__setattr__(self, "y", as_matrix(self.y, "y"))
        if self.w is not None:
            object.__setattr__(self, "w", as_matrix(self.w, "w"))
        n = len(self.z)
        for role in self.roles:
            if len(getattr(self, role)) != n:
                raise ShapeError(f"column block {role!r} has {len(getattr(self, role))} rows, expected {n}")
        names = dict(self.names)
        for role in self.roles:
            k = getattr(self, role).shape[1]
            names.setdefault(role, _default_names(role, k))
            names[role] = tuple(names[role])
            if len(names[role]) != k:
                raise ShapeError(f"{role!r} has {k} columns but {len(names[role])} names")
        object.__setattr__(self, "names", names)

    @property
    def roles(self):
        return ("z", "x", "y") if self.w is None else ("z", "x", "y", "w")

    @property
    def n(self):
        return len(self.z)

    def __len__(self):
        return self.n

    def check_finite(self):
        for role in self.roles:
            block = getattr(self, role)
            bad = ~np.isfinite(block)
            if bad.any():
                row, col = np.argwhere(bad)[0]
                raise InputError(f"non-finite value in column {self.names[role][col]!r} at row {row}")

    def subset(self, rows):
        return Dataset(
            self.z[rows],
            self.x[rows],
            self.y[rows],
            None if self.w is None else self.w[rows],
            names=self.names,
            hidden=None if self.hidden is None else self.hidden[rows],
        )
