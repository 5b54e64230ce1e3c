"""Staged progressive search: weight training, policy updates, op-set shrinking."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .controller import BaselineState, SampleBatch, log_prob, policy_probs, reinforce_update, sample_genotype
from .objectives import MetricVector, RewardSpec, evaluate_accuracy, scalarize
from .searchspace import (
    CATALOGS,
    CELL_TYPES,
    AlphaTable,
    CellSpec,
    Genotype,
    SuperNetwork,
    count_parameters,
    derive_genotype,
    full_candidates,
    shrink_opset,
)
from .searchspace.network import NetworkConfig

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = (
    "iteration",
    "mean_sampled_params",
    "max_sampled_accuracy",
    "argmax_genotype_accuracy",
    "reward_mean",
    "baseline",
)
WEIGHT_TRAINING = ("mixed", "sampled")
LR_SCHEDULES = ("cosine", "constant")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class StageConfig:
    layers: int
    channels: int = 16
    keep_normal: int = 10
    keep_reduction: int = 6
    epochs: int = 25
    pretrain_epochs: int = 5
    rl_interval: int = 10
    samples_per_update: int = 4
    batch_size: int = 64
    eval_batch_size: int | None = None  # validation images per reward evaluation; None: batch_size
    lr: float = 0.025
    lr_min: float = 0.001
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float | None = 5.0
    alpha_lr: float = 0.05
    baseline_decay: float = 0.9
    weight_training: str = "mixed"

    def __post_init__(self):
        if self.layers < 3:
            raise ConfigError(f"layers must be >= 3 to place two reduction cells, got {self.layers}")
        if self.channels < 2:
            raise ConfigError(f"channels must be >= 2, got {self.channels}")
        if not 0 <= self.pretrain_epochs < self.epochs:
            raise ConfigError(
                f"pretrain_epochs ({self.pretrain_epochs}) must be >= 0 and < epochs ({self.epochs})"
            )
        for name in ("rl_interval", "samples_per_update", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.eval_batch_size is not None and self.eval_batch_size < 1:
            raise ConfigError(f"eval_batch_size must be >= 1, got {self.eval_batch_size}")
        if self.lr <= 0 or self.alpha_lr < 0:
            raise ConfigError("lr must be positive and alpha_lr non-negative")
        if not 0 <= self.momentum < 1 or not 0 <= self.baseline_decay < 1:
            raise ConfigError("momentum and baseline_decay must lie in [0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.weight_training not in WEIGHT_TRAINING:
            raise ConfigError(f"weight_training must be one of {WEIGHT_TRAINING}, got {self.weight_training!r}")

    def keep(self):
        return {"normal": self.keep_normal, "reduction": self.keep_reduction}

    def lr_at(self, epoch):
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1 + np.cos(np.pi * epoch / self.epochs))


def default_stages(**overrides):
    """Three-stage shallow-wide to deep-narrow schedule."""
    schedule = zip((5, 8, 11), (16, 12, 8), (10, 6, 4), (6, 4, 3))
    return [
        StageConfig(layers=l, channels=c, keep_normal=kn, keep_reduction=kr, **overrides)
        for l, c, kn, kr in schedule
    ]


def validate_stages(stages, catalogs=CATALOGS):
    if not stages:
        raise ConfigError("at least one stage is required")
    prev_layers = 0
    prev_keep = {ct: len(catalogs[ct]) for ct in CELL_TYPES}
    for k, s in enumerate(stages):
        if s.layers <= prev_layers:
            raise ConfigError(f"stage {k}: layers must increase strictly across stages, got {s.layers} after {prev_layers}")
        for ct, keep in s.keep().items():
            if keep < 1:
                raise ConfigError(f"stage {k}: keep_{ct} must be >= 1, got {keep}")
            if keep > prev_keep[ct]:
                raise ConfigError(
                    f"stage {k}: keep_{ct}={keep} exceeds the {prev_keep[ct]} {ct} candidates available"
                )
            prev_keep[ct] = keep
        prev_layers = s.layers


def grow_layers(stages, k):
    if not 0 <= k < len(stages):
        raise IndexError(f"stage {k} out of range for {len(stages)} stages")
    return stages[k].layers


@dataclass
class MetricRecord:
    iteration: int
    mean_sampled_params: float
    max_sampled_accuracy: float
    argmax_genotype_accuracy: float
    reward_mean: float
    baseline: float
    stage: int = 0

    def row(self):
        return [self.iteration] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for rec in history:
            w.writerow(rec.row())


def read_metrics_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(METRIC_COLUMNS)}")
    return {c: np.array([float(r[i]) for r in rows[1:]]) for i, c in enumerate(METRIC_COLUMNS)}


def quartile_means(values):
    """Means of the first and last quarter of a series (at least one element each)."""
    values = np.asarray(values, dtype=np.float64)
    q = max(1, len(values) // 4)
    return float(values[:q].mean()), float(values[-q:].mean())


def reference_params(config):
    """Default P: the all-sep_conv_3x3 normal cell at this network configuration."""
    normal = {e: "sep_conv_3x3" for e in config.cell.edges}
    return float(count_parameters(Genotype(normal, {}), config))


@dataclass
class SearchResult:
    genotype: Genotype
    history: list
    candidates: dict
    final_params: int
    final_accuracy: float
    network_config: NetworkConfig
    stage_alphas: list = field(default_factory=list)


class Search:
    """Step-level state machine over all stages.

    One call to ``step`` trains the weights on one batch and, when due, runs
    one policy update. The whole state round-trips through ``save``/``load``.
    """

    def __init__(
        self,
        stages,
        train,
        val,
        reward_spec=None,
        seed=0,
        cell=None,
        use_baseline=True,
        workers=1,
        progress=None,
        penalty_exponent=-0.25,
        use_accuracy=True,
        track_accuracy=None,
    ):
        validate_stages(stages)
        if len(train) == 0 or len(val) == 0:
            raise ConfigError("train and validation sets must be non-empty")
        self.stages = list(stages)
        self.train, self.val = train, val
        self.reward_spec = reward_spec
        self.penalty_exponent = reward_spec.penalty_exponent if reward_spec else penalty_exponent
        self.use_accuracy = reward_spec.use_accuracy if reward_spec else use_accuracy
        # a pure size reward needs no forward passes; accuracy columns are then NaN
        self.track_accuracy = self.use_accuracy if track_accuracy is None else track_accuracy
        self.seed = seed
        self.cell = cell or CellSpec()
        self.use_baseline = use_baseline
        self.workers = workers
        self.progress = progress
        self.rng = np.random.default_rng(seed)
        self.candidates = full_candidates(edges=self.cell.edges)
        self.history = []
        self.stage_alphas = []
        self.iteration = 0
        self.done = False
        self._enter_stage(0)

    # ------------------------------------------------------------ stage setup

    def _enter_stage(self, k):
        s = self.stages[k]
        self.stage = k
        self.epoch = 0
        self.step_in_epoch = 0
        self.stage_step = 0
        self.perm = None
        self.config = NetworkConfig(
            s.layers, s.channels, self.train.channels, self.train.class_count, cell=self.cell
        )
        self.net = SuperNetwork(self.config, self.candidates, seed=[self.seed, k])
        self.alpha = AlphaTable.uniform(self.candidates, self.cell.edges)
        self.baseline = BaselineState(decay=s.baseline_decay)
        self.opt = T.SGD(self.net.parameters(), s.lr, s.momentum, s.weight_decay, s.grad_clip)
        if self.reward_spec is not None:
            self.spec = self.reward_spec
        else:
            self.spec = RewardSpec(reference_params(self.config), self.penalty_exponent, self.use_accuracy)

    def transition(self):
        """Shrink candidates by the finished stage's alpha and rebuild at the next depth."""
        s = self.stages[self.stage]
        self.stage_alphas.append(self.alpha.copy())
        shrunk = shrink_opset(self.alpha, s.keep())
        self.candidates = {ct: list(shrunk.ops[ct]) for ct in CELL_TYPES}
        if self.stage + 1 < len(self.stages):
            self._enter_stage(self.stage + 1)
        else:
            self.done = True

    @property
    def stage_config(self):
        return self.stages[self.stage]

    def steps_per_epoch(self):
        return -(-len(self.train) // self.stage_config.batch_size)

    # ------------------------------------------------------------ one step

    def _weight_step(self, x, y):
        s = self.stage_config
        if s.weight_training == "mixed":
            logits = self.net.mixed_forward(x, policy_probs(self.alpha), mode="train")
            T.backward(T.softmax_cross_entropy(logits, y))
            self.opt.step()
        else:
            g = sample_genotype(self.alpha, self.rng)
            logits = self.net.discrete_forward(x, g, mode="train")
            T.backward(T.softmax_cross_entropy(logits, y))
            self.opt.step(skip_missing=True)

    def _evaluate(self, genotypes, batch):
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(lambda g: evaluate_accuracy(self.net, g, [batch]), genotypes))
        return [evaluate_accuracy(self.net, g, [batch]) for g in genotypes]

    def _policy_update(self):
        s = self.stage_config
        n = min(len(self.val), s.eval_batch_size or s.batch_size)
        idx = np.sort(self.rng.choice(len(self.val), n, replace=False))
        batch = (self.val.images[idx], self.val.labels[idx])
        genotypes = [sample_genotype(self.alpha, self.rng) for _ in range(s.samples_per_update)]
        measure = self.track_accuracy or self.spec.use_accuracy
        accs = self._evaluate(genotypes, batch) if measure else [0.0] * len(genotypes)
        params = [count_parameters(g, self.config) for g in genotypes]
        rewards = [scalarize(MetricVector(a, p), self.spec) for a, p in zip(accs, params)]
        sb = SampleBatch(genotypes, rewards, [log_prob(g, self.alpha) for g in genotypes])
        reinforce_update(sb, self.baseline, self.alpha, s.alpha_lr, use_baseline=self.use_baseline)
        if measure:
            argmax_acc = evaluate_accuracy(self.net, derive_genotype(self.alpha), [batch])
        else:
            accs, argmax_acc = [np.nan], np.nan
        rec = MetricRecord(
            self.iteration,
            float(np.mean(params)),
            float(max(accs)),
            float(argmax_acc),
            float(np.mean(rewards)),
            float(self.baseline.value),
            self.stage,
        )
        self.history.append(rec)
        self.iteration += 1
        if self.progress:
            self.progress(rec)
        return rec

    def step(self):
        """Advance by one weight step (plus a policy update when due)."""
        if self.done:
            raise RuntimeError("search already finished")
        s = self.stage_config
        if self.step_in_epoch == 0:
            self.perm = self.rng.permutation(len(self.train))
        self.opt.lr = s.lr_at(self.epoch)
        idx = self.perm[self.step_in_epoch * s.batch_size:(self.step_in_epoch + 1) * s.batch_size]
        self._weight_step(self.train.images[idx], self.train.labels[idx])
        if self.epoch >= s.pretrain_epochs and (self.stage_step + 1) % s.rl_interval == 0:
            self._policy_update()
        self.stage_step += 1
        self.step_in_epoch += 1
        if self.step_in_epoch == self.steps_per_epoch():
            self.step_in_epoch = 0
            self.perm = None
            self.epoch += 1
            if self.epoch == s.epochs:
                self.transition()

    def run(self, max_steps=None, on_epoch_end=None):
        n = 0
        while not self.done and (max_steps is None or n < max_steps):
            epoch = (self.stage, self.epoch)
            self.step()
            n += 1
            if on_epoch_end and (self.stage, self.epoch) != epoch:
                on_epoch_end(self)
        return self

    def result(self, eval_batch_size=256):
        if not self.done:
            raise RuntimeError("search has not finished")
        genotype = derive_genotype(self.stage_alphas[-1])
        batches = [
            (self.val.images[i:i + eval_batch_size], self.val.labels[i:i + eval_batch_size])
            for i in range(0, len(self.val), eval_batch_size)
        ]
        return SearchResult(
            genotype,
            list(self.history),
            {ct: [tuple(c) for c in self.candidates[ct]] for ct in CELL_TYPES},
            count_parameters(genotype, self.config),
            evaluate_accuracy(self.net, genotype, batches),
            self.config,
            [a.copy() for a in self.stage_alphas],
        )

    # ------------------------------------------------------------ checkpoint

    def _fingerprint(self):
        return f"{self.train.fingerprint()}:{self.val.fingerprint()}"

    def state_dict(self):
        arrays = {f"net/{k}": v for k, v in self.net.state_arrays().items()}
        for i, v in enumerate(self.opt.velocity):
            arrays[f"vel/{i}"] = v
        tables = [("alpha", self.alpha)] + [(f"stage_alpha{k}", a) for k, a in enumerate(self.stage_alphas)]
        for tag, table in tables:
            for ct in CELL_TYPES:
                for e, a in enumerate(table.values[ct]):
                    arrays[f"{tag}/{ct}/{e}"] = a
        if self.perm is not None:
            arrays["perm"] = self.perm
        meta = {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "stages": [asdict(s) for s in self.stages],
            "fingerprint": self._fingerprint(),
            "stage": self.stage,
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "stage_step": self.stage_step,
            "iteration": self.iteration,
            "done": self.done,
            "rng": self.rng.bit_generator.state,
            "baseline": asdict(self.baseline),
            "candidates": {ct: [list(c) for c in self.candidates[ct]] for ct in CELL_TYPES},
            "alpha_ops": {ct: [list(c) for c in self.alpha.ops[ct]] for ct in CELL_TYPES},
            "stage_alpha_ops": [{ct: [list(c) for c in a.ops[ct]] for ct in CELL_TYPES} for a in self.stage_alphas],
            "history": [asdict(r) for r in self.history],
        }
        return meta, arrays

    def save(self, path):
        """Atomically write the full search state to ``path`` (npz)."""
        meta, arrays = self.state_dict()
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(buf.getvalue())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path, train, val, reward_spec=None, **kwargs):
        try:
            with np.load(path) as z:
                arrays = {k: z[k] for k in z.files}
        except (OSError, ValueError) as e:
            raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
        if "meta" not in arrays:
            raise CheckpointError(f"{path}: missing metadata record")
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        stages = [StageConfig(**s) for s in meta["stages"]]
        search = cls(stages, train, val, reward_spec, seed=meta["seed"], **kwargs)
        if search._fingerprint() != meta["fingerprint"]:
            raise CheckpointError(f"{path}: checkpoint was written for a different dataset")
        search._restore(meta, arrays)
        return search

    def _restore(self, meta, arrays):
        # the live network matches the alpha ops; candidates differ once the last stage has shrunk them
        self.candidates = {ct: [tuple(c) for c in meta["alpha_ops"][ct]] for ct in CELL_TYPES}
        self._enter_stage(meta["stage"])
        self.candidates = {ct: [tuple(c) for c in meta["candidates"][ct]] for ct in CELL_TYPES}

        def table(tag, ops):
            ops = {ct: [tuple(c) for c in ops[ct]] for ct in CELL_TYPES}
            values = {ct: [arrays[f"{tag}/{ct}/{e}"].copy() for e in range(len(ops[ct]))] for ct in CELL_TYPES}
            return AlphaTable(ops, values, self.cell.edges)

        self.alpha = table("alpha", meta["alpha_ops"])
        self.stage_alphas = [table(f"stage_alpha{k}", ops) for k, ops in enumerate(meta["stage_alpha_ops"])]
        self.net.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
        for i, v in enumerate(self.opt.velocity):
            v[...] = arrays[f"vel/{i}"]
        self.baseline = BaselineState(**meta["baseline"])
        self.rng.bit_generator.state = meta["rng"]
        self.perm = arrays.get("perm")
        for key in ("epoch", "step_in_epoch", "stage_step", "iteration", "done"):
            setattr(self, key, meta[key])
        self.history = [MetricRecord(**r) for r in meta["history"]]


def transition_stage(search, next_config=None):
    """Close the current stage of ``search``; ``next_config`` optionally replaces the next stage."""
    if next_config is not None:
        if search.stage + 1 >= len(search.stages):
            search.stages.append(next_config)
        else:
            search.stages[search.stage + 1] = next_config
        validate_stages(search.stages)
    search.transition()
    return search


def run_search(stages, train, val, reward_spec=None, seed=0, **kwargs):
    """Run every stage to completion and derive the final architecture."""
    return Search(stages, train, val, reward_spec, seed=seed, **kwargs).run().result()
