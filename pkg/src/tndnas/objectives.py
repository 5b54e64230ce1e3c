"""Architecture objectives and their scalarization into a single reward."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .searchspace import count_parameters, op_param_count


@dataclass
class MetricVector:
    accuracy: float
    params: int
    extensions: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")
        if self.params < 1:
            raise ValueError(f"params must be a positive count, got {self.params}")
        for k, v in self.extensions.items():
            if v < 0:
                raise ValueError(f"metric {k!r} must be non-negative, got {v}")


@dataclass
class RewardSpec:
    """Reward = acc * (params / reference_params) ** penalty_exponent.

    With ``use_accuracy=False`` the accuracy factor is dropped, leaving a pure
    size objective (used by the parameter ablations).
    """

    reference_params: float
    penalty_exponent: float = -0.25
    use_accuracy: bool = True

    def __post_init__(self):
        if not self.reference_params > 0:
            raise ValueError(f"reference_params must be positive, got {self.reference_params}")


def scalarize(m, spec):
    acc = m.accuracy if spec.use_accuracy else 1.0
    if spec.penalty_exponent == 0:
        return float(acc)
    return float(acc * (m.params / spec.reference_params) ** spec.penalty_exponent)


def reward_surface_grid(spec, acc_range=(0.0, 1.0), params_range=None, resolution=21):
    """Rows of (acc, params, reward) over a resolution x resolution grid, acc-major."""
    if params_range is None:
        params_range = (0.25 * spec.reference_params, 2.75 * spec.reference_params)
    if acc_range[0] < 0 or acc_range[1] > 1 or params_range[0] <= 0:
        raise ValueError("accuracy range must lie in [0, 1] and params range must be positive")
    accs = np.linspace(acc_range[0], acc_range[1], resolution)
    params = np.linspace(params_range[0], params_range[1], resolution)
    rows = []
    for a in accs:
        for p in params:
            factor = 1.0 if spec.penalty_exponent == 0 else (p / spec.reference_params) ** spec.penalty_exponent
            acc = a if spec.use_accuracy else 1.0
            rows.append((float(a), float(p), float(acc * factor)))
    return np.array(rows)


def write_reward_surface_csv(grid, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["acc", "params", "reward"])
        for a, p, r in grid:
            w.writerow([repr(float(a)), repr(float(p)), repr(float(r))])


def evaluate_accuracy(net, genotype, val_batches, mode="batch"):
    """Top-1 accuracy of the subnetwork ``genotype`` over ``(images, labels)`` batches."""
    val_batches = list(val_batches)
    if not val_batches:
        raise ValueError("evaluate_accuracy needs at least one validation batch")
    correct = total = 0
    with T.no_grad():
        for x, y in val_batches:
            logits = net.discrete_forward(x, genotype, mode=mode).data
            correct += int((logits.argmax(axis=1) == np.asarray(y)).sum())
            total += len(y)
    if total == 0:
        raise ValueError("validation batches are empty")
    return correct / total


def estimate_macs(genotype, config, image_size):
    """Rough multiply-accumulate count of the edge operations (extension metric)."""
    total = 0
    size = image_size
    for ct, _, _, _, c in config.layout():
        if ct == "reduction":
            size = -(-size // 2)
        for op in genotype.cell(ct).values():
            total += op_param_count(op, c) * size * size
    return float(total)


METRICS = {
    "params": lambda net_config, genotype, **kw: count_parameters(genotype, net_config),
    "macs": lambda net_config, genotype, image_size=16, **kw: estimate_macs(genotype, net_config, image_size),
}


def register_metric(name, fn):
    """Add an extension metric ``fn(net_config, genotype, **context) -> float``."""
    METRICS[name] = fn
