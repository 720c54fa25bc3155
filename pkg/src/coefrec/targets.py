"""Benchmark coefficient maps.

`mu_smooth` is cos(10*x1) + cos(10*x2). `mu_disk` is a piecewise constant map
with a jump of 3 across a disk of radius 0.25 centered at (0.5, 0.5):
-1.0735 outside, 1.9265 inside (the published target is only available as a
color plot; these values match its color range). `mu_inclusions` is the
elastography phantom: background 1 with a stiff disk (value 2, radius 0.15 at
(0.35, 0.65)) and a soft disk (value 0.5, radius 0.12 at (0.7, 0.3)).

Each target carries an optional analytic gradient and, for the discontinuous
maps, a signed distance to the discontinuity set so quadrature can refine the
crossing cells.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["ScalarTarget", "mu_smooth", "mu_disk", "mu_inclusions", "get_target"]


@dataclass(frozen=True)
class ScalarTarget:
    name: str
    func: Callable                      # (N, 2) points -> (N,) values
    grad: Optional[Callable] = None     # (N, 2) points -> (N, 2)
    interface: Optional[Callable] = None  # signed distance to discontinuities
    sup_norm: float = None

    def __call__(self, pts):
        return self.func(np.asarray(pts, dtype=float))


def _smooth(pts):
    return np.cos(10.0 * pts[:, 0]) + np.cos(10.0 * pts[:, 1])


def _smooth_grad(pts):
    return np.column_stack([-10.0 * np.sin(10.0 * pts[:, 0]),
                            -10.0 * np.sin(10.0 * pts[:, 1])])


mu_smooth = ScalarTarget("mu1", _smooth, grad=_smooth_grad, sup_norm=2.0)


def _disk_signed(pts, center, radius):
    return np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1]) - radius


def _disk(pts):
    return -1.0735 + 3.0 * (_disk_signed(pts, (0.5, 0.5), 0.25) < 0)


mu_disk = ScalarTarget(
    "mu2", _disk,
    interface=lambda pts: _disk_signed(pts, (0.5, 0.5), 0.25),
    sup_norm=1.9265,
)


def _inclusions(pts):
    vals = np.ones(len(pts))
    vals[_disk_signed(pts, (0.35, 0.65), 0.15) < 0] = 2.0
    vals[_disk_signed(pts, (0.70, 0.30), 0.12) < 0] = 0.5
    return vals


def _inclusions_interface(pts):
    d1 = _disk_signed(pts, (0.35, 0.65), 0.15)
    d2 = _disk_signed(pts, (0.70, 0.30), 0.12)
    return np.where(np.abs(d1) < np.abs(d2), d1, d2)


mu_inclusions = ScalarTarget("mu_exact", _inclusions,
                             interface=_inclusions_interface, sup_norm=2.0)

_REGISTRY = {"mu1": mu_smooth, "mu2": mu_disk, "mu_exact": mu_inclusions}


def get_target(name) -> ScalarTarget:
    if isinstance(name, ScalarTarget):
        return name
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown target {name!r}; choose from {sorted(_REGISTRY)}") from None
