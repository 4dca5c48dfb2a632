"""
Adaptive moment optimizer over named parameter groups.

Moments and step counts are kept per row (first axis) so that row-sparse
updates, such as the per-image noise banks of the views in a batch, get their
own bias correction.
"""

import logging
import math
from collections.abc import Iterable
from pathlib import Path

import numpy as np

from .gaussians import normalize_quaternions
from .utils import read_tensor_blob, write_tensor_blob

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-15

# Groups holding quaternions, renormalized after every step
QUATERNION_GROUPS = ("rotations",)


def exponential_decay(lr_init: float, lr_final: float, max_steps: int, step: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if max_steps <= 0 or lr_init == lr_final:
        return lr_init
    t = min(max(step / max_steps, 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(lr_init) + t * math.log(lr_final))


class AdamState:
    """First/second moments and per-row step counts for each parameter group."""

    def __init__(self, beta1: float = BETA1, beta2: float = BETA2, epsilon: float = EPSILON) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, np.ndarray] = {}

    def _ensure(self, name: str, param: np.ndarray) -> None:
        if name not in self.m or self.m[name].shape != param.shape:
            self.m[name] = np.zeros_like(param, dtype=np.float64)
            self.v[name] = np.zeros_like(param, dtype=np.float64)
            self.steps[name] = np.zeros(param.shape[0], dtype=np.int64)

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        rates: dict[str, float],
        rows: dict[str, np.ndarray] | None = None,
    ) -> None:
        """
        Update parameters in place.

        Args:
            params: Parameter arrays keyed by group name (mutated)
            grads: Gradients with the same keys and shapes
            rates: Learning rate per group; groups without a rate are skipped
            rows: Optional row indices per group; only those rows are updated
        """
        for name, param in params.items():
            if name not in rates or name not in grads:
                continue
            self._ensure(name, param)
            selected = None if rows is None else rows.get(name)
            if selected is None:
                selected = np.arange(param.shape[0])
            selected = np.unique(np.asarray(selected, dtype=np.int64))
            if selected.size == 0:
                continue
            g = np.asarray(grads[name], dtype=np.float64)[selected]
            m = self.beta1 * self.m[name][selected] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name][selected] + (1.0 - self.beta2) * (g * g)
            t = self.steps[name][selected] + 1
            shape = (-1,) + (1,) * (param.ndim - 1)
            bc1 = (1.0 - self.beta1 ** t.astype(np.float64)).reshape(shape)
            bc2 = (1.0 - self.beta2 ** t.astype(np.float64)).reshape(shape)
            update = rates[name] * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            param[selected] -= update
            self.m[name][selected] = m
            self.v[name][selected] = v
            self.steps[name][selected] = t

    def remap(self, names: Iterable[str], source_rows: np.ndarray) -> None:
        """
        Reorder moments after rows were pruned, cloned or split.

        Args:
            names: Groups whose rows changed
            source_rows: For each new row, the old row it inherits from, or -1
                for a fresh row (zero moments, step count 0)
        """
        src = np.asarray(source_rows, dtype=np.int64)
        valid = src >= 0
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = np.zeros((src.size, *old.shape[1:]))
                new[valid] = old[src[valid]]
                store[name] = new
            steps = np.zeros(src.size, dtype=np.int64)
            steps[valid] = self.steps[name][src[valid]]
            self.steps[name] = steps

    def save(self, path: Path | str) -> None:
        """Write moments and step counts as a tensor blob."""
        tensors: dict[str, np.ndarray] = {}
        for name in sorted(self.m):
            tensors[f"m/{name}"] = self.m[name]
            tensors[f"v/{name}"] = self.v[name]
            tensors[f"steps/{name}"] = self.steps[name].astype(np.float64)
        header = {"beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}
        write_tensor_blob(path, header, tensors, dtype='<f8')

    @classmethod
    def load(cls, path: Path | str) -> "AdamState":
        header, tensors = read_tensor_blob(path)
        state = cls(header["beta1"], header["beta2"], header["epsilon"])
        for key, arr in tensors.items():
            kind, name = key.split("/", 1)
            if kind == "m":
                state.m[name] = arr
            elif kind == "v":
                state.v[name] = arr
            else:
                state.steps[name] = arr.astype(np.int64)
        return state


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    rates: dict[str, float],
    rows: dict[str, np.ndarray] | None = None,
) -> None:
    """
    One bias-corrected adaptive moment step, then quaternion renormalization.

    Args:
        params: Parameter arrays keyed by group (updated in place)
        grads: Gradients keyed like params
        state: Optimizer moments (updated in place)
        rates: Learning rate per group
        rows: Optional per-group row subsets for sparse updates
    """
    state.step(params, grads, rates, rows)
    for name in QUATERNION_GROUPS:
        if name in params and name in rates:
            params[name][:] = normalize_quaternions(params[name])
