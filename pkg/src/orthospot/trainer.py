"""SGD with momentum and weight decay, halving the learning rate on a
validation plateau and stopping early."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .dataset import CorpusSplit, QuadrupletSampler
from .errors import DatasetError, NumericError
from .evaluator import evaluate
from .frontend import FeatureConfig, mfcc
from .losses import (FOUR_SCENARIO_TRIPLETS, TWO_SCENARIO_TRIPLETS, LossBreakdown, branch_losses,
                     cross_branch_norm, l_orth, total_loss)
from .model import ModelConfig, ModelParams, forward, init_params, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,lr,l_ckws,l_tkws,l_csv,l_tsv,l_orth,total,val_eer_kws,val_eer_sv"
MONITORS = ("max", "min", "kws", "sv")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the run seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def derive_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr_init: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    lr_decay_factor: float = 2.0
    plateau_patience: int = 3
    stop_patience: int = 10
    max_epochs: int = 100
    lambda_orth: float = 1.0
    orth_mode: str = "frobenius"
    triplet_margin: float = 0.5
    seed: int = 0
    scenario_mode: str = "four"
    monitor: str = "max"
    max_grad_norm: float = 0.0
    eval_max_trials: int = 0
    check_grad_coverage: bool = False
    input_norm: str = "global"

    def __post_init__(self):
        for name in ("batch_size", "plateau_patience", "stop_patience", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        for name in ("lr_init", "lr_decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.lambda_orth < 0:
            raise ValueError("momentum must be in [0, 1); weight_decay and lambda_orth must be >= 0")
        if self.scenario_mode not in ("four", "two"):
            raise ValueError(f"scenario_mode must be 'four' or 'two', got {self.scenario_mode!r}")
        if self.orth_mode not in ("frobenius", "literal"):
            raise ValueError(f"orth_mode must be 'frobenius' or 'literal', got {self.orth_mode!r}")
        if self.input_norm not in ("global", "none"):
            raise ValueError(f"input_norm must be 'global' or 'none', got {self.input_norm!r}")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {MONITORS}, got {self.monitor!r}")


@dataclass
class TrainState:
    params: ModelParams
    velocity: list[np.ndarray]
    lr: float
    epoch: int = 0
    step: int = 0
    best_metric: float = float("inf")
    epochs_since_improve: int = 0

    @classmethod
    def fresh(cls, params: ModelParams, lr: float) -> "TrainState":
        return cls(params, [np.zeros_like(t.value) for t in params.tensors()], lr)


def sgd_step(state: TrainState, gradients: list[np.ndarray], config: TrainConfig) -> TrainState:
    """``v <- m v + (g + wd w)``, ``w <- w - lr v`` for every parameter, in place."""
    named = state.params.named_tensors()
    if len(gradients) != len(named):
        raise ValueError(f"got {len(gradients)} gradients for {len(named)} parameters")
    for (name, t), g in zip(named.items(), gradients):
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at step {state.step} (epoch {state.epoch})")
    for t, v, g in zip(named.values(), state.velocity, gradients):
        v *= config.momentum
        v += g + config.weight_decay * t.value
        t.value -= state.lr * v
    state.step += 1
    return state


class PlateauScheduler:
    """Best-metric tracker shared by the lr plateau rule and the early stop.

    ``update`` returns (improved, stop). After each non-improving epoch the
    counter grows; every ``plateau_patience`` of them halves the lr, and
    ``stop_patience`` of them ends training. Decay does not reset the counter.
    """

    def __init__(self, config: TrainConfig):
        self.config = config

    def update(self, state: TrainState, metric: float) -> tuple[bool, bool]:
        if metric < state.best_metric:
            state.best_metric = metric
            state.epochs_since_improve = 0
            return True, False
        state.epochs_since_improve += 1
        if state.epochs_since_improve % self.config.plateau_patience == 0:
            state.lr /= self.config.lr_decay_factor
        return False, state.epochs_since_improve >= self.config.stop_patience


def monitored(eer_kws: float, eer_sv: float, monitor: str) -> float:
    if monitor == "max":
        return max(eer_kws, eer_sv)
    if monitor == "min":
        return min(eer_kws, eer_sv)
    return eer_kws if monitor == "kws" else eer_sv


class FeatureStore:
    """Per-clip MFCC cache keyed by clip id."""

    def __init__(self, config: FeatureConfig = FeatureConfig(), dtype: str = "float64"):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, clip) -> np.ndarray:
        feats = self._cache.get(clip.clip_id)
        if feats is None:
            feats = mfcc(clip, self.config).frames.astype(self.dtype)
            feats.setflags(write=False)
            self._cache[clip.clip_id] = feats
        return feats


@dataclass
class EpochMetrics:
    breakdown: LossBreakdown
    n_batches: int
    n_anchors: int
    skipped_anchors: int


class Trainer:
    """Holds the per-split sampling tables and label maps for one training run."""

    def __init__(self, split: CorpusSplit, config: TrainConfig, features: Callable):
        self.split = split
        self.config = config
        self.features = features
        self.sampler = QuadrupletSampler(split.train)
        kw_classes = split.train_keyword_classes()
        spk_classes = split.train_speaker_classes()
        kw_map = {k: i for i, k in enumerate(kw_classes)}
        spk_map = {s: i for i, s in enumerate(spk_classes)}
        self.n_keywords = len(kw_classes)
        self.n_speakers = len(spk_classes)
        self.kw_label = np.array([kw_map[c.keyword_id] for c in split.train])
        self.spk_label = np.array([spk_map[c.speaker_id] for c in split.train])
        self.scenarios = (1, 2, 3, 4) if config.scenario_mode == "four" else (1, 4)
        self.triplets = FOUR_SCENARIO_TRIPLETS if config.scenario_mode == "four" else TWO_SCENARIO_TRIPLETS
        self.eligible = np.array([i for i in range(len(split.train)) if self.sampler.eligible(i, self.scenarios)])
        if self.eligible.size == 0:
            raise DatasetError("no training clip has partners for every scenario")

    def model_config(self, **sizes) -> ModelConfig:
        return ModelConfig(n_keywords=self.n_keywords, n_speakers=self.n_speakers, **sizes)

    def draw_batch(self, anchors: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """Rows of (anchor, partners...) positions; ineligible anchors are swapped for eligible ones."""
        rows = []
        skipped = 0
        for pos in anchors:
            pos = int(pos)
            if not self.sampler.eligible(pos, self.scenarios):
                skipped += 1
                pos = int(self.eligible[rng.integers(self.eligible.size)])
            rows.append((pos, *self.sampler.sample_positions(pos, rng, self.scenarios)))
        return np.array(rows, dtype=np.int64), skipped

    def batch_loss(self, params: ModelParams, rows: np.ndarray) -> LossBreakdown:
        cfg = self.config
        unique, inverse = np.unique(rows, return_inverse=True)
        local = inverse.reshape(rows.shape)
        x = np.stack([self.features(self.split.train[i]) for i in unique])
        kws, sv = forward(params, x)
        ce_k, tr_k = branch_losses(kws, self.kw_label[unique], local, self.triplets["kws"], cfg.triplet_margin)
        ce_s, tr_s = branch_losses(sv, self.spk_label[unique], local, self.triplets["sv"], cfg.triplet_margin)
        orth = l_orth(params.gru_kws, params.gru_sv, cfg.orth_mode)
        return total_loss(ce_k, tr_k, ce_s, tr_s, orth, cfg.lambda_orth)

    def run_epoch(self, state: TrainState, rng: np.random.Generator,
                  sampler_rng: np.random.Generator | None = None) -> EpochMetrics:
        """One pass over the training clips in ``rng`` order; partners come from ``sampler_rng``."""
        cfg = self.config
        sampler_rng = sampler_rng or rng
        order = rng.permutation(len(self.split.train))
        sums = np.zeros(6)
        n_batches = skipped = 0
        params = state.params.tensors()
        for start in range(0, order.size, cfg.batch_size):
            rows, n_skip = self.draw_batch(order[start:start + cfg.batch_size], sampler_rng)
            skipped += n_skip
            with ad.Tape() as tape:
                bd = self.batch_loss(state.params, rows)
            if cfg.check_grad_coverage:
                touched = {id(t) for t in tape.leaves()}
                orphans = [n for n, t in state.params.named_tensors().items() if id(t) not in touched]
                if orphans:
                    raise NumericError(f"parameters detached from the loss: {orphans}")
            grads = tape.backward(bd.tensor, wrt=params)
            if cfg.max_grad_norm > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > cfg.max_grad_norm:
                    grads = [g * (cfg.max_grad_norm / norm) for g in grads]
            sgd_step(state, grads, cfg)
            sums += np.array(bd.as_row()) * rows.shape[0]
            n_batches += 1
        if skipped:
            log.info("epoch %d: %d anchors lacked a scenario partner and were redrawn", state.epoch, skipped)
        mean = sums / order.size
        return EpochMetrics(LossBreakdown(*mean, lambda_orth=cfg.lambda_orth), n_batches, int(order.size), skipped)


def input_stats(clips, features: Callable, rng: np.random.Generator,
                max_clips: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Per-coefficient mean and std over the frames of (a sample of) ``clips``."""
    pick = np.sort(rng.permutation(len(clips))[:max_clips])
    frames = np.concatenate([np.asarray(features(clips[i]), dtype=np.float64) for i in pick])
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-8)


@dataclass
class FitResult:
    best_params: ModelParams
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    state: TrainState | None = None

    def metrics_csv(self) -> str:
        return "\n".join([METRICS_HEADER] + [format_metrics_row(r) for r in self.history]) + "\n"


def format_metrics_row(row: dict) -> str:
    keys = METRICS_HEADER.split(",")
    return ",".join(str(row[k]) if k == "epoch" else repr(float(row[k])) for k in keys)


def fit(config: TrainConfig, split: CorpusSplit, model_sizes: dict | None = None,
        features: Callable | None = None, out_dir=None, dtype: str = "float64") -> FitResult:
    """Train until the monitored validation EER stops improving.

    With ``out_dir`` set, writes ``metrics.csv`` (rewritten after every epoch),
    ``best.ckpt`` on each improvement and ``last.ckpt`` every epoch.
    """
    features = features or FeatureStore(dtype=dtype)
    n_kw = len({c.keyword_id for c in split.validation})
    n_spk = len({c.speaker_id for c in split.validation})
    if n_kw < 2 or n_spk < 2:
        raise DatasetError(f"validation split needs >= 2 keywords and >= 2 speakers for EER; "
                           f"has {n_kw} and {n_spk}")
    trainer = Trainer(split, config, features)
    model_config = trainer.model_config(dtype=dtype, **(model_sizes or {}))
    params = init_params(model_config, derive_seed(config.seed, "init"))
    if config.input_norm == "global":
        params.set_input_stats(*input_stats(split.train, features, substream(config.seed, "norm")))
    state = TrainState.fresh(params, config.lr_init)
    scheduler = PlateauScheduler(config)
    shuffle_rng = substream(config.seed, "shuffle")
    sampler_rng = substream(config.seed, "sampler")
    eval_rng_seed = derive_seed(config.seed, "eval")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = FitResult(params.copy(), 0, [], state)
    while state.epoch < config.max_epochs:
        state.epoch += 1
        lr_used = state.lr
        metrics = trainer.run_epoch(state, shuffle_rng, sampler_rng)
        val = evaluate(state.params, split.validation, features, config.eval_max_trials,
                       np.random.default_rng(eval_rng_seed))
        metric = monitored(val["kws"].eer, val["sv"].eer, config.monitor)
        improved, stop = scheduler.update(state, metric)
        bd = metrics.breakdown
        row = {"epoch": state.epoch, "lr": lr_used, "l_ckws": bd.l_ckws, "l_tkws": bd.l_tkws,
               "l_csv": bd.l_csv, "l_tsv": bd.l_tsv, "l_orth": bd.l_orth, "total": bd.total,
               "val_eer_kws": val["kws"].eer, "val_eer_sv": val["sv"].eer,
               "cross_norm": cross_branch_norm(state.params.gru_kws, state.params.gru_sv)}
        result.history.append(row)
        log.info("epoch %d lr %.5g loss %.4f val EER kws %.4f sv %.4f%s", state.epoch, lr_used, bd.total,
                 row["val_eer_kws"], row["val_eer_sv"], " *" if improved else "")
        if improved:
            result.best_params = state.params.copy()
            result.best_epoch = state.epoch
        if out is not None:
            (out / "metrics.csv").write_text(result.metrics_csv())
            if improved:
                save_checkpoint(state.params, out / "best.ckpt")
            save_checkpoint(state.params, out / "last.ckpt")
        if stop:
            break
    return result
