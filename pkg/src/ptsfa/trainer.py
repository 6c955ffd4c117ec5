"""Warm-up, staged adaptation with augmented CE + IDA, evaluation and SPL."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numerics
from .datagen import PointCloudDataset, read_dataset
from .domainstats import class_stats, refresh_bank
from .errors import ConfigError
from .losses import (
    AugmentationContext,
    LossBreakdown,
    ida_loss,
    lambda_schedule,
    ptsfa_loss_and_grads,
    total_loss,
    warmup_ce,
)
from .model import encode_batch, encode_dataset, init_params, model_backward, predict_batch
from .pta import StagePlan, build_intermediate, ratios_for_stage, stage_of_epoch

log = logging.getLogger(__name__)

METHODS = ("full", "ptsfa", "tsfa", "source_only")
SPLIT_NAMES = ("source_train", "source_test", "target_train", "target_test")


@dataclass
class RunConfig:
    """Every knob of a run. Defaults reproduce the published settings."""

    epochs: int = 100
    warmup: int = 10
    tau: int = 5
    batch_source: int = 8
    batch_target: int = 8
    lr0: float = 0.001
    weight_decay: float = 5e-5
    lambda0: float = 0.25
    kappa: float = 2.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    sigma_s0: float = 1.0
    sigma_t0: float = 0.0
    delta_sigma_s: float = 0.05
    delta_sigma_t: float = 0.05
    full_covariance: bool = False
    method: str = "full"
    seed: int = 0
    spl_threshold0: float = 0.8
    spl_step: float = 0.01
    spl_circles: int = 10
    spl_epochs_per_circle: int = 10
    data_dir: str = ""
    source_train: str = ""
    source_test: str = ""
    target_train: str = ""
    target_test: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        self.plan()  # validates epoch bookkeeping

    def plan(self):
        tsfa = self.method == "tsfa"
        return StagePlan(
            total_epochs=self.epochs,
            warmup_epochs=self.warmup,
            epochs_per_stage=self.tau,
            # one-shot direction towards the whole pseudo-labelled target domain
            sigma_s0=0.0 if tsfa else self.sigma_s0,
            sigma_t0=1.0 if tsfa else self.sigma_t0,
            delta_sigma_s=0.0 if tsfa else self.delta_sigma_s,
            delta_sigma_t=0.0 if tsfa else self.delta_sigma_t,
        )

    def weights(self):
        if self.method in ("ptsfa", "tsfa"):
            return self.alpha, 0.0, 0.0
        return self.alpha, self.beta, self.gamma

    def split_path(self, name):
        path = getattr(self, name)
        if path:
            return Path(path)
        if self.data_dir:
            return Path(self.data_dir) / f"{name}.pcds"
        raise ConfigError(f"no path configured for {name}")

    @classmethod
    def from_text(cls, text, **overrides):
        """Parse flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are fatal."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, value, types[key])
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides):
        path = Path(path)
        cfg = cls.from_text(path.read_text(), **overrides)
        # relative data paths resolve against the config file
        for name in ("data_dir",) + SPLIT_NAMES:
            p = getattr(cfg, name)
            if p and not Path(p).is_absolute():
                setattr(cfg, name, str(path.parent / p))
        return cfg

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(key, value, typ):
    try:
        if typ in (bool, "bool"):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None


class Datasets(NamedTuple):
    source_train: PointCloudDataset
    source_test: PointCloudDataset
    target_train: PointCloudDataset
    target_test: PointCloudDataset

    @classmethod
    def load(cls, config):
        return cls(*(read_dataset(config.split_path(n)) for n in SPLIT_NAMES))

    def check(self):
        C = {d.num_classes for d in self}
        m = {d.num_points for d in self}
        if len(C) != 1 or len(m) != 1:
            raise ConfigError(f"datasets disagree: num_classes={sorted(C)}, points={sorted(m)}")
        return C.pop()


@dataclass
class EpochReport:
    epoch: int
    stage: int  # -1 during warm-up
    losses: LossBreakdown
    src_acc: float
    tgt_acc: float
    lam: float
    lr: float
    degraded: tuple = ()


@dataclass
class StageRecord:
    stage: int
    sigma_s: float
    sigma_t: float
    src_selected: list
    tgt_selected: list
    delta_mu_norm: list
    target_gap: list  # |mu_k - mu_t| per class, diagnostic only
    degraded: list


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted

    @property
    def per_class_counts(self):
        return self.confusion.sum(axis=1)


@dataclass
class TrainResult:
    params: object
    reports: list
    stages: list = field(default_factory=list)


def evaluate(params, dataset):
    """Accuracy and confusion counts of argmax predictions."""
    C = dataset.num_classes
    feats = encode_dataset(dataset.points, params)
    _, _, pred = predict_batch(feats, params)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, pred), 1)
    acc = float(np.mean(pred == dataset.labels)) if len(dataset) else 0.0
    return EvalResult(acc, confusion)


DEAD_FEATURE_NORM = 1e-6


def _ida_live(F, labels, means, kappa, valid):
    # a (near) zero feature has no direction; leave it out of the cosine terms
    live = np.linalg.norm(F, axis=1) > DEAD_FEATURE_NORM
    if live.all():
        return ida_loss(F, labels, means, kappa, valid)
    grad = np.zeros_like(F)
    if not live.any():
        return 0.0, grad
    log.debug("%d dead features skipped in IDA", int((~live).sum()))
    loss, grad[live] = ida_loss(F[live], labels[live], means, kappa, valid)
    return loss, grad


def objective_and_grads(params, src_points, src_labels, tgt_points, tgt_labels, ctx, means,
                        valid, kappa, alpha=1.0, beta=1.0, gamma=1.0):
    """Weighted augmented CE + IDA losses on one mixed batch and all parameter gradients.

    ``tgt_points`` may be empty when ``gamma == 0``.
    """
    ns = len(src_labels)
    use_target = gamma != 0 and len(tgt_labels) > 0
    pts = np.concatenate([src_points, tgt_points]) if use_target else src_points
    feats, cache = encode_batch(pts, params)
    Fs, Ft = feats[:ns], feats[ns:]

    l_aug, g = ptsfa_loss_and_grads(Fs, src_labels, params.W, params.b, ctx)
    gF = np.zeros_like(feats)
    gF[:ns] += alpha * g["F"]
    l_is = l_it = 0.0
    if beta != 0:
        l_is, g_is = _ida_live(Fs, src_labels, means, kappa, valid)
        gF[:ns] += beta * g_is
    if use_target:
        l_it, g_it = _ida_live(Ft, tgt_labels, means, kappa, valid)
        gF[ns:] += gamma * g_it
    grads = model_backward(cache, params, grad_feats=gF)
    grads["W"] += alpha * g["W"]
    grads["b"] += alpha * g["b"]
    losses = total_loss(l_aug, l_is, l_it, alpha, beta, gamma)
    return losses, grads, Fs


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def _mean_breakdown(parts, alpha, beta, gamma):
    arr = np.array([[p.ptsfa, p.ida_s, p.ida_t] for p in parts])
    a, s, t = arr.mean(axis=0)
    return LossBreakdown(float(a), float(s), float(t), float(alpha * a + beta * s + gamma * t),
                         alpha, beta, gamma)


class _Stage(NamedTuple):
    ctx_delta: np.ndarray
    ctx_cov: np.ndarray
    means: np.ndarray
    valid: np.ndarray
    pseudo: np.ndarray


def _begin_stage(k, config, plan, params, data, full):
    src_bank = refresh_bank(data.source_train, params, "source", k)
    tgt_bank = refresh_bank(data.target_train, params, "target", k)
    C = params.num_classes
    src_stats = class_stats(src_bank.features, src_bank.labels, C, full=full)
    sig_s, sig_t = ratios_for_stage(k, plan)
    inter = build_intermediate(src_bank, tgt_bank, sig_s, sig_t, src_stats, full=full)
    tgt_stats = class_stats(tgt_bank.features, tgt_bank.labels, C)
    record = StageRecord(
        stage=k,
        sigma_s=sig_s,
        sigma_t=sig_t,
        src_selected=[len(inter.source_selected[c]) for c in range(C)],
        tgt_selected=[len(inter.target_selected[c]) for c in range(C)],
        delta_mu_norm=[float(np.linalg.norm(inter.delta_mu[c])) for c in range(C)],
        target_gap=[float(np.linalg.norm(inter.mean[c] - tgt_stats.mean[c])) for c in range(C)],
        degraded=[bool(x) for x in inter.degraded],
    )
    stage = _Stage(inter.delta_mu, inter.cov, inter.mean, ~inter.degraded, tgt_bank.labels)
    return stage, record


def train(config, data=None, params=None, on_epoch_end=None):
    """Run warm-up then staged adaptation; one :class:`EpochReport` per epoch.

    ``on_epoch_end(report, params)`` is called after every epoch, e.g. for
    progress output.
    """
    data = Datasets.load(config) if data is None else data
    C = data.check()
    plan = config.plan()
    alpha, beta, gamma = config.weights()
    rng_init, rng_src, rng_tgt, _ = _streams(config.seed)
    if params is None:
        params = init_params(C, rng_init)
    pdict = params.as_dict()
    adam = numerics.AdamState.for_params(pdict, weight_decay=config.weight_decay)
    T = config.epochs
    bs, bt = config.batch_source, config.batch_target
    src, tgt = data.source_train, data.target_train
    Ns, Nt = len(src), len(tgt)

    reports, stages = [], []
    stage = None
    for epoch in range(T):
        lr = numerics.cosine_lr(epoch, T, config.lr0)
        lam = lambda_schedule(epoch, T, config.lambda0)
        k = stage_of_epoch(epoch, plan)
        adapting = k is not None and config.method != "source_only"
        src_order = rng_src.permutation(Ns)
        parts, correct = [], 0

        if not adapting:
            for i in range(0, Ns, bs):
                idx = src_order[i : i + bs]
                feats, cache = encode_batch(src.points[idx], params)
                z = feats @ params.W.T + params.b
                loss, g = warmup_ce(z, src.labels[idx])
                correct += int(np.sum(np.argmax(z, axis=1) == src.labels[idx]))
                grads = model_backward(cache, params, grad_logits=g)
                numerics.adam_update(pdict, grads, adam, lr)
                parts.append(LossBreakdown(loss, 0.0, 0.0, loss))
            losses = _mean_breakdown(parts, 1.0, 0.0, 0.0)
            degraded = ()
            seen = Ns
        else:
            if plan.is_stage_start(epoch):
                stage, record = _begin_stage(k, config, plan, params, data, config.full_covariance)
                stages.append(record)
                log.info("stage %d: sigma_s=%.2f sigma_t=%.2f", k, record.sigma_s, record.sigma_t)
            ctx = AugmentationContext(stage.ctx_delta, stage.ctx_cov, lam)
            tgt_order = rng_tgt.permutation(Nt)
            n_batches = math.ceil(max(Ns, Nt) / bs)
            seen = 0
            for i in range(n_batches):
                sidx = src_order[np.arange(i * bs, (i + 1) * bs) % Ns]
                tidx = tgt_order[np.arange(i * bt, (i + 1) * bt) % Nt]
                ys = src.labels[sidx]
                losses_b, grads, Fs = objective_and_grads(
                    params, src.points[sidx], ys, tgt.points[tidx], stage.pseudo[tidx],
                    ctx, stage.means, stage.valid, config.kappa, alpha, beta, gamma,
                )
                z = Fs @ params.W.T + params.b
                correct += int(np.sum(np.argmax(z, axis=1) == ys))
                seen += len(ys)
                numerics.adam_update(pdict, grads, adam, lr)
                parts.append(losses_b)
            losses = _mean_breakdown(parts, alpha, beta, gamma)
            degraded = tuple(bool(x) for x in ~stage.valid)

        tgt_acc = evaluate(params, data.target_test).accuracy
        reports.append(EpochReport(epoch, -1 if k is None else k, losses, correct / seen,
                                   tgt_acc, lam, lr, degraded))
        if on_epoch_end is not None:
            on_epoch_end(reports[-1], params)
        log.debug("epoch %d stage %s total=%.4f tgt_acc=%.3f", epoch, k, losses.total, tgt_acc)
    return TrainResult(params, reports, stages)


def spl_thresholds(config):
    return [round(config.spl_threshold0 + i * config.spl_step, 12) for i in range(config.spl_circles)]


@dataclass
class CircleRecord:
    circle: int
    threshold: float
    selected: int
    pseudo_acc: float  # diagnostic, uses held-back target labels


def spl_finetune(params, config, data=None, epochs_per_circle=None):
    """Self-paced fine-tuning on source plus confidently pseudo-labelled target samples.

    Each circle re-scores the target split, admits samples whose confidence
    reaches the circle's threshold and trains plain CE on the union.
    """
    data = Datasets.load(config) if data is None else data
    data.check()
    epochs = config.spl_epochs_per_circle if epochs_per_circle is None else epochs_per_circle
    _, _, _, rng = _streams(config.seed)
    pdict = params.as_dict()
    adam = numerics.AdamState.for_params(pdict, weight_decay=config.weight_decay)
    total = max(1, config.spl_circles * epochs)
    batch = config.batch_source + config.batch_target
    src, tgt = data.source_train, data.target_train
    records = []
    step = 0
    for circle, thr in enumerate(spl_thresholds(config)):
        bank = refresh_bank(tgt, params, "target")
        chosen = np.flatnonzero(bank.confidences >= thr)
        if len(chosen) == 0:
            log.info("SPL circle %d: no target sample reaches %.2f, source only", circle, thr)
        pseudo_acc = float(np.mean(bank.labels[chosen] == tgt.labels[chosen])) if len(chosen) else 0.0
        records.append(CircleRecord(circle, thr, len(chosen), pseudo_acc))
        points = np.concatenate([src.points, tgt.points[chosen]])
        labels = np.concatenate([src.labels, bank.labels[chosen]])
        for _ in range(epochs):
            lr = numerics.cosine_lr(step, total, config.lr0)
            order = rng.permutation(len(labels))
            for i in range(0, len(order), batch):
                idx = order[i : i + batch]
                feats, cache = encode_batch(points[idx], params)
                _, g = warmup_ce(feats @ params.W.T + params.b, labels[idx])
                numerics.adam_update(pdict, model_backward(cache, params, grad_logits=g), adam, lr)
            step += 1
    return params, records
