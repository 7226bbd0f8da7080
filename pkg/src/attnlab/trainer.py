"""Layer-wise pretraining schedule and the optimization loop.

Training starts from a shallow encoder with a large total time reduction,
adds one BiLSTM layer per stage while keeping the reduction at 32, and then
drops pooling at the top of the stack down to the final reduction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .autograd import Tensor
from .config import Config, dump_text, parse_text
from .data import Utterance, prefetch
from .losses import LossConfig, ctc_loss_logits, ctc_realizable, label_smoothed_ce, total_loss
from .model import (ModelConfig, encoder_layer_names, forward_teacher_forced, init_encoder_layer,
                    init_params)

log = logging.getLogger(__name__)

GROWTH_REDUCTION = 32


# schedule ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainStage:
    index: int
    layers: int
    pooling: tuple
    label_smoothing: bool
    encoder_dropout: bool
    epochs: int | None  # None: whatever remains of the epoch budget

    @property
    def reduction(self) -> int:
        return math.prod(self.pooling)


def final_pooling(layers: int, final_red: int) -> tuple:
    """Pooling for the full-depth model: growth pooling with the top factors halved."""
    if final_red < 1 or GROWTH_REDUCTION % final_red:
        raise ValueError(f"final reduction {final_red} must divide {GROWTH_REDUCTION}")
    factors = list(_growth_pooling(layers - 2))
    for i in range(len(factors) - 1, -1, -1):
        while math.prod(factors) > final_red and factors[i] > 1:
            factors[i] //= 2
    return tuple(factors)


def _growth_pooling(stage: int) -> tuple:
    first = GROWTH_REDUCTION >> stage
    if first < 1 or (first << stage) != GROWTH_REDUCTION:
        raise ValueError(f"cannot keep reduction {GROWTH_REDUCTION} over {stage + 2} layers")
    return (first,) + (2,) * stage


def build_pretrain_schedule(target_layers: int = 6, final_red: int = 8, epochs_per_stage: int = 2,
                            dropout_off_stages: int = 2) -> list[PretrainStage]:
    """Growth stages with 2, 3, ... layers at reduction 32, then the final stage.

    Label smoothing is off in every growth stage, encoder dropout is off in
    the first ``dropout_off_stages`` stages. The final stage has no fixed
    length. When it would repeat the last growth stage (e.g. 2 layers at
    reduction 32) the schedule is that single stage.
    """
    if target_layers < 2:
        raise ValueError("target_layers must be >= 2")
    stages = []
    for s in range(target_layers - 1):
        stages.append(PretrainStage(s, 2 + s, _growth_pooling(s), False, s >= dropout_off_stages,
                                    epochs_per_stage))
    pooling = final_pooling(target_layers, final_red)
    if pooling == stages[-1].pooling:
        stages.pop()
    stages.append(PretrainStage(len(stages), target_layers, pooling, True, True, None))
    return stages


def direct_schedule(target_layers: int = 6, final_red: int = 8) -> list[PretrainStage]:
    return [PretrainStage(0, target_layers, final_pooling(target_layers, final_red), True, True, None)]


def stage_for_epoch(schedule: list[PretrainStage], epoch: int) -> PretrainStage:
    """Stage active in (1-based) ``epoch``."""
    start = 0
    for stage in schedule:
        if stage.epochs is None or epoch <= start + stage.epochs:
            return stage
        start += stage.epochs
    return schedule[-1]


def grow_encoder(params: dict, model_config: ModelConfig, from_stage: PretrainStage,
                 to_stage: PretrainStage, rng: np.random.Generator) -> dict:
    """Carry parameters into the next stage, appending a fresh top layer if it is deeper."""
    if to_stage.index != from_stage.index + 1:
        raise ValueError(f"cannot grow from stage {from_stage.index} to stage {to_stage.index}")
    if to_stage.layers not in (from_stage.layers, from_stage.layers + 1):
        raise ValueError("a stage may add at most one encoder layer")
    out = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
    if to_stage.layers > from_stage.layers:
        dtype = next(iter(params.values())).dtype
        fresh = init_encoder_layer(model_config, from_stage.layers, rng, dtype)
        out.update({k: Tensor(v, requires_grad=True) for k, v in fresh.items()})
    return out


# optimizer ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 0.0
    cv_history: list = field(default_factory=list)
    # optimizer step count at the end of each CV evaluation
    cv_steps: list = field(default_factory=list)


def adam_step(params: dict, grads: dict, state: OptimState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    """In-place bias-corrected Adam update of every parameter that has a gradient."""
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        else:
            m = m.astype(np.float64)
            v = state.v[name].astype(np.float64)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.dtype)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
    state.lr = lr
    return state


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, dict) else grads
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in values))


def clip_global_norm(grads, max_norm: float):
    """Scale all gradients by ``max_norm / norm`` when their joint 2-norm exceeds it."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    if isinstance(grads, dict):
        return {k: (np.asarray(g) * scale).astype(np.asarray(g).dtype) for k, g in grads.items()}
    return [(np.asarray(g) * scale).astype(np.asarray(g).dtype) for g in grads]


@dataclass(frozen=True)
class LrConfig:
    lr: float = 1e-3
    warmup_steps: int = 20
    threshold: float = 0.01
    decay: float = 0.7
    floor: float = 1e-6

    @classmethod
    def from_config(cls, cfg: Config) -> "LrConfig":
        return cls(cfg["optim.lr"], cfg["optim.warmup_steps"], cfg["optim.newbob_threshold"],
                   cfg["optim.newbob_decay"], cfg["optim.lr_floor"])


def newbob_decays(cv_history, threshold: float, cv_steps=None, warmup_steps: int = 0) -> int:
    """Number of epochs whose relative CV improvement fell below ``threshold``.

    With ``cv_steps`` only epochs that ended after warmup are counted.
    """
    n = 0
    for i, (prev, cur) in enumerate(zip(cv_history, cv_history[1:]), 1):
        if cv_steps is not None and cv_steps[i] < warmup_steps:
            continue
        if prev <= 0 or (prev - cur) / prev < threshold:
            n += 1
    return n


def lr_schedule(step: int, epoch: int, cv_history, config: LrConfig, cv_steps=None) -> float:
    """Linear warmup from lr/10 to lr, then Newbob decay driven by the CV history."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return max(config.floor, config.lr * (0.1 + 0.9 * step / config.warmup_steps))
    n = newbob_decays(cv_history, config.threshold, cv_steps, config.warmup_steps)
    return max(config.floor, config.lr * config.decay ** n)


# batching -----------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list
    features: np.ndarray  # B×T×d
    lengths: np.ndarray
    targets: list

    @property
    def num_labels(self) -> int:
        return sum(len(t) + 1 for t in self.targets)


def make_batches(utts: list[Utterance], batch_frames: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Bucket by length: sort (with a little seeded jitter), cut at the frame budget, shuffle."""
    lengths = np.array([u.num_frames for u in utts], dtype=np.float64)
    jitter = rng.uniform(0.0, 1.0, len(utts)) if rng is not None else np.zeros(len(utts))
    order = np.lexsort((np.arange(len(utts)), lengths + jitter * 0.1 * lengths.mean()))
    batches, current, longest = [], [], 0
    for i in order:
        n = int(lengths[i])
        if current and max(longest, n) * (len(current) + 1) > batch_frames:
            batches.append(current)
            current, longest = [], 0
        current.append(int(i))
        longest = max(longest, n)
    if current:
        batches.append(current)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


def collate(utts: list[Utterance], idx: list[int], dtype=np.float32) -> Batch:
    chosen = [utts[i] for i in idx]
    T = max(u.num_frames for u in chosen)
    d = chosen[0].features.shape[1]
    feats = np.zeros((len(chosen), T, d), dtype=dtype)
    for b, u in enumerate(chosen):
        feats[b, :u.num_frames] = u.features
    return Batch([u.id for u in chosen], feats, np.array([u.num_frames for u in chosen]),
                 [list(u.tokens) for u in chosen])


# losses over a batch ----------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    ce_sum: float
    num_labels: int
    ctc_skipped: int


def batch_loss(params: dict, model_config: ModelConfig, batch: Batch, loss_config: LossConfig,
               dropout: float = 0.0, rng=None, blank_id: int = 2):
    """Differentiable objective of one batch plus bookkeeping."""
    tf = forward_teacher_forced(params, model_config, batch.features, batch.targets, batch.lengths,
                                dropout=dropout, rng=rng)
    ce = label_smoothed_ce(tf.logits, tf.outputs, tf.mask, loss_config.epsilon)
    enc_len = tf.encoder.lengths
    ok = [b for b, t in enumerate(batch.targets) if ctc_realizable(t, int(enc_len[b]))]
    ctc_sum = None
    if loss_config.ctc_weight > 0 and ok:
        states = ag.take(tf.encoder.states, np.array(ok), axis=0)
        logits = ag.linear(states, params["ctc.W"], params["ctc.b"])
        ctc_sum = ag.tsum(ctc_loss_logits(logits, [batch.targets[b] for b in ok], enc_len[ok], blank_id))
    loss = total_loss(ce, batch.num_labels, ctc_sum, len(ok), loss_config)
    return loss, ce, len(batch.targets) - len(ok)


def cv_loss(params: dict, model_config: ModelConfig, utts: list[Utterance], batch_frames: int) -> float:
    """Per-label negative log-likelihood (no smoothing, no CTC) on held-out data."""
    nll, labels = 0.0, 0
    with ag.no_grad():
        for idx in make_batches(utts, batch_frames):
            batch = collate(utts, idx, params["dec.W"].dtype)
            tf = forward_teacher_forced(params, model_config, batch.features, batch.targets, batch.lengths)
            nll += float(label_smoothed_ce(tf.logits, tf.outputs, tf.mask, 0.0).item())
            labels += batch.num_labels
    # rounded so a resumed run sees exactly the value stored in the checkpoint
    return float(np.float32(nll / max(labels, 1)))


# training loop ------------------------------------------------------------------------


def model_config_for(cfg: Config, vocab_size: int, stage: PretrainStage, input_dim: int = 40) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, input_dim=input_dim, enc_layers=stage.layers,
                       enc_units=cfg["model.enc_units"], pooling=stage.pooling,
                       dec_units=cfg["model.dec_units"], embed_dim=cfg["model.embed_dim"],
                       att_dim=cfg["model.att_dim"], enc_dropout=cfg["model.enc_dropout"])


def schedule_for(cfg: Config) -> list[PretrainStage]:
    if cfg["schedule.pretrain"]:
        return build_pretrain_schedule(cfg["model.enc_layers"], cfg["model.final_red"],
                                       cfg["schedule.epochs_per_stage"], cfg["schedule.dropout_off_stages"])
    return direct_schedule(cfg["model.enc_layers"], cfg["model.final_red"])


@dataclass
class EpochMetrics:
    epoch: int
    stage: int
    train_loss: float
    cv_loss: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.stage}\t{self.train_loss:.6f}\t{self.cv_loss:.6f}\t{self.lr:.6g}\n"


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    metrics: list
    checkpoints: list
    ctc_skipped: int = 0
    stopped_early: bool = False


def checkpoint_text(cfg: Config, model_config: ModelConfig, epoch: int, extra: dict | None = None) -> str:
    doc = dict(cfg)
    doc.update({
        "checkpoint.kind": "asr",
        "checkpoint.epoch": epoch,
        "model.vocab_size": model_config.vocab_size,
        "model.input_dim": model_config.input_dim,
        "model.current_layers": model_config.enc_layers,
        "model.current_pooling": list(model_config.pooling),
    })
    doc.update(extra or {})
    return dump_text(doc)


def save_training_checkpoint(path, cfg: Config, model_config: ModelConfig, params: dict, opt: OptimState,
                             epoch: int, extra: dict | None = None) -> None:
    tensors = {k: v.data for k, v in params.items()}
    for k in params:
        if k in opt.m:
            tensors[f"opt.m.{k}"] = opt.m[k]
            tensors[f"opt.v.{k}"] = opt.v[k]
    tensors["state.step"] = np.array([opt.step], dtype=np.float32)
    tensors["state.cv_history"] = np.array(opt.cv_history, dtype=np.float32)
    tensors["state.cv_steps"] = np.array(opt.cv_steps, dtype=np.float32)
    ckpt.save_checkpoint(path, checkpoint_text(cfg, model_config, epoch, extra), tensors)


def read_training_checkpoint(path):
    """Returns (doc, params, OptimState, epoch)."""
    text, tensors = ckpt.load_checkpoint(path)
    doc = parse_text(text, str(path))
    params, opt = {}, OptimState()
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            opt.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt.v[name[6:]] = arr
        elif name == "state.step":
            opt.step = int(arr[0])
        elif name == "state.cv_history":
            opt.cv_history = [float(x) for x in arr]
        elif name == "state.cv_steps":
            opt.cv_steps = [int(x) for x in arr]
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return doc, params, opt, int(doc.get("checkpoint.epoch", 0))


def train(train_utts: list[Utterance], dev_utts: list[Utterance], cfg: Config, vocab_size: int,
          out_dir=None, resume=None, extra_ckpt: dict | None = None,
          epoch_callback: Callable[[EpochMetrics, dict, ModelConfig], bool] | None = None) -> TrainResult:
    """Run the staged schedule for ``train.epochs`` epochs.

    Every epoch uses ``default_rng([seed, epoch])`` for shuffling and dropout,
    so resuming from ``epoch-<n>.ckpt`` replays the remaining epochs exactly.
    ``epoch_callback`` may return True to stop after the current epoch.
    """
    if not train_utts:
        raise ValueError("empty training set")
    if not dev_utts:
        raise ValueError("empty cross-validation set")
    seed = cfg["seed"]
    schedule = schedule_for(cfg)
    lr_cfg = LrConfig.from_config(cfg)
    input_dim = train_utts[0].features.shape[1]
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.serialize(), encoding="utf-8")
    log.info("resolved config:\n%s", cfg.serialize())

    stage = schedule[0]
    model_config = model_config_for(cfg, vocab_size, stage, input_dim)
    start_epoch = 1
    if resume:
        _, params, opt, last = read_training_checkpoint(resume)
        start_epoch = last + 1
        stage = stage_for_epoch(schedule, last)
        model_config = model_config_for(cfg, vocab_size, stage, input_dim)
    else:
        params = init_params(model_config, np.random.default_rng([seed, 0]))
        opt = OptimState()

    metrics, checkpoints, skipped_total = [], [], 0
    metrics_path = out / "metrics.tsv" if out else None
    if metrics_path and not resume:
        metrics_path.write_text("")
    stopped = False
    for epoch in range(start_epoch, cfg["train.epochs"] + 1):
        new_stage = stage_for_epoch(schedule, epoch)
        if new_stage.index != stage.index:
            rng_grow = np.random.default_rng([seed, 1000 + new_stage.index])
            bigger = model_config_for(cfg, vocab_size, new_stage, input_dim)
            params = grow_encoder(params, bigger, stage, new_stage, rng_grow)
            stage, model_config = new_stage, bigger
            log.info("stage %d: %d layers, pooling %s", stage.index, stage.layers, list(stage.pooling))
        rng = np.random.default_rng([seed, epoch])
        loss_config = LossConfig(cfg["loss.label_smoothing"], cfg["loss.ctc_weight"], stage.label_smoothing)
        dropout = cfg["model.enc_dropout"] if stage.encoder_dropout else 0.0
        batches = make_batches(train_utts, cfg["train.batch_frames"], rng)
        total, weight = 0.0, 0
        for batch in prefetch((collate(train_utts, idx) for idx in batches), cfg["train.prefetch"]):
            for p in params.values():
                p.grad = None
            with ag.Tape() as tape:
                loss, _, skipped = batch_loss(params, model_config, batch, loss_config, dropout, rng)
            tape.backward(loss)
            skipped_total += skipped
            grads = {k: np.zeros_like(p.data) if p.grad is None else p.grad for k, p in params.items()}
            grads = clip_global_norm(grads, cfg["optim.clip_norm"])
            lr = lr_schedule(opt.step, epoch, opt.cv_history, lr_cfg, opt.cv_steps)
            adam_step(params, grads, opt, lr, cfg["optim.beta1"], cfg["optim.beta2"], cfg["optim.eps"])
            total += float(loss.item()) * len(batch.ids)
            weight += len(batch.ids)
        cv = cv_loss(params, model_config, dev_utts, cfg["train.batch_frames"])
        opt.cv_history.append(cv)
        opt.cv_steps.append(opt.step)
        opt.lr = lr_schedule(opt.step, epoch, opt.cv_history, lr_cfg, opt.cv_steps)
        m = EpochMetrics(epoch, stage.index, total / weight, cv, opt.lr)
        metrics.append(m)
        log.info("epoch %d stage %d train %.4f cv %.4f lr %.3g", epoch, stage.index, m.train_loss, cv, opt.lr)
        if out:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(m.line())
            path = out / f"epoch-{epoch}.ckpt"
            save_training_checkpoint(path, cfg, model_config, params, opt, epoch, extra_ckpt)
            checkpoints.append(path)
        if epoch_callback is not None and epoch_callback(m, params, model_config):
            stopped = True
            break
    if skipped_total:
        log.warning("CTC term skipped %d times for targets longer than the encoder output", skipped_total)
    return TrainResult(params, model_config, metrics, checkpoints, skipped_total, stopped)
