"""Mean-teacher training over four label streams.

Each step combines masked BCE on strong grids, weak tags, and 1-s soft
targets (via per-segment max aggregation of the frame probabilities),
plus an MSE consistency term against an EMA teacher. The auxiliary decoder
mirrors the three supervised terms with a schedule that weights it most
heavily early in training. Optimization is Adam with decoupled weight
decay and an exponential ramp-up of both learning rate and consistency
weight.
"""

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentConfig, augment_shared, augment_view
from .batch import Batch, collate
from .datasets import make_batches
from .errors import ConfigError, SedkitError, ShapeError
from .formats import read_checkpoint, write_checkpoint
from .model import CRNN, ModelConfig, build_model, model_to_tensors, tensors_to_model

log = logging.getLogger(__name__)

FRAMES_PER_SEGMENT = 25
BCE_EPS = 1e-7


# ------------------------------------------------------------------ losses

def segment_max_probs(strong_probs, frames_per_segment=FRAMES_PER_SEGMENT):
    """Collapse frame probabilities to one value per 1-s segment by taking
    the per-class maximum over each block of 25 consecutive frames."""
    t = strong_probs.shape[-2]
    if t % frames_per_segment != 0:
        raise ShapeError(
            f"frame count {t} is not a multiple of {frames_per_segment}"
        )
    n_segments = t // frames_per_segment
    shaped = strong_probs.reshape(
        *strong_probs.shape[:-2], n_segments, frames_per_segment,
        strong_probs.shape[-1])
    return shaped.amax(dim=-2)


def masked_bce(pred, target, class_mask, eps=BCE_EPS):
    """Binary cross-entropy averaged over visible class entries only.

    ``class_mask`` is (B, C) or (C,) and broadcasts over any middle axes of
    ``pred``. An all-false mask yields an exact zero.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    mask = torch.as_tensor(class_mask, dtype=torch.bool)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() > mask.dim():
        view = list(mask.shape)
        view[1:1] = [1] * (pred.dim() - mask.dim())
        mask = mask.reshape(view)
    mask = mask.expand_as(pred)
    n_visible = mask.sum()
    if n_visible == 0:
        return pred.new_zeros(())
    p = pred.clamp(eps, 1.0 - eps)
    bce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    return (bce * mask).sum() / n_visible


def consistency_loss(student_out, teacher_out):
    """Pooled MSE between student and teacher over the main strong and weak
    heads, all classes (no visibility mask)."""
    ts = teacher_out.main_strong.detach()
    tw = teacher_out.main_weak.detach()
    diff_strong = (student_out.main_strong - ts) ** 2
    diff_weak = (student_out.main_weak - tw) ** 2
    total = diff_strong.sum() + diff_weak.sum()
    return total / (diff_strong.numel() + diff_weak.numel())


# --------------------------------------------------------------- schedules

def _rampup_factor(epoch, rampup_epochs):
    if rampup_epochs <= 0:
        return 1.0
    progress = min(float(epoch) / float(rampup_epochs), 1.0)
    return math.exp(-5.0 * (1.0 - progress) ** 2)


def lr_schedule(epoch, max_lr=0.001, rampup_epochs=50):
    """Exponential ramp-up reaching ``max_lr`` at ``rampup_epochs``."""
    return max_lr * _rampup_factor(epoch, rampup_epochs)


def consistency_weight(epoch, max_weight=2.0, rampup_epochs=50):
    return max_weight * _rampup_factor(epoch, rampup_epochs)


def aux_weight(epoch, w0=2.0, w1=0.5, decay_epochs=50):
    """Linear decay from ``w0`` at epoch 0 to ``w1`` at ``decay_epochs``,
    constant afterwards (monotone non-increasing)."""
    if decay_epochs <= 0:
        return w1
    progress = min(float(epoch) / float(decay_epochs), 1.0)
    return w0 + (w1 - w0) * progress


def ema_update(teacher: nn.Module, student: nn.Module, alpha):
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise.

    Buffers (batch-norm statistics) are copied from the student so the
    teacher's eval behavior tracks the student's data statistics.
    """
    t_params = list(teacher.parameters())
    s_params = list(student.parameters())
    if len(t_params) != len(s_params):
        raise ShapeError("teacher/student parameter counts differ")
    with torch.no_grad():
        for tp, sp in zip(t_params, s_params):
            if tp.shape != sp.shape:
                raise ShapeError(
                    f"teacher {tuple(tp.shape)} vs student {tuple(sp.shape)}"
                )
            tp.mul_(alpha).add_(sp, alpha=1.0 - alpha)
        for tb, sb in zip(teacher.buffers(), student.buffers()):
            tb.copy_(sb)
    return teacher


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    epochs: int = 200
    max_lr: float = 0.001
    rampup_epochs: int = 50
    ema_alpha: float = 0.999
    weight_decay: float = 1e-4
    aux_w0: float = 2.0
    aux_w1: float = 0.5
    aux_decay_epochs: int = 50
    consistency_max: float = 2.0
    batch_weak: int = 4
    batch_unlabeled: int = 4
    batch_strong: int = 4
    batch_soft: int = 4
    seed: int = 42
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        for name in ("max_lr", "ema_alpha", "weight_decay", "aux_w0", "aux_w1",
                     "consistency_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.rampup_epochs > self.epochs and self.epochs > 0:
            raise ConfigError(
                f"rampup_epochs ({self.rampup_epochs}) exceeds epochs ({self.epochs})"
            )

    @property
    def batch_composition(self):
        return {"weak": self.batch_weak, "unlabeled": self.batch_unlabeled,
                "strong": self.batch_strong, "soft": self.batch_soft}

    def to_dict(self):
        d = asdict(self)
        d["augment"]["filter_knots"] = list(self.augment.filter_knots)
        d["augment"]["logmel_channels"] = list(self.augment.logmel_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = d.get("augment")
        if isinstance(aug, dict):
            aug = dict(aug)
            for key in ("filter_knots", "logmel_channels"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augment"] = AugmentConfig(**aug)
        return cls(**d)


@dataclass
class LossBreakdown:
    strong_bce: float = 0.0
    weak_bce: float = 0.0
    soft_bce: float = 0.0
    consistency: float = 0.0
    aux_strong_bce: float = 0.0
    aux_weak_bce: float = 0.0
    aux_soft_bce: float = 0.0
    total: float = 0.0


@dataclass
class TrainState:
    student: CRNN
    teacher: CRNN
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    np_rng: np.random.Generator = None


def make_optimizer(model, config: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=config.max_lr,
                             weight_decay=config.weight_decay)


def init_train_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    torch.manual_seed(train_config.seed)
    student = build_model(model_config, seed=train_config.seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = make_optimizer(student, train_config)
    return TrainState(student=student, teacher=teacher, optimizer=optimizer,
                      epoch=0, step=0,
                      np_rng=np.random.default_rng(train_config.seed))


# -------------------------------------------------------------------- step

def _stream_bce(select, pred, target, masks, zero):
    if not bool(select.any()):
        return zero
    return masked_bce(pred[select], target[select], masks[select])


def compute_losses(student_out, teacher_out, batch: Batch, w_cons, w_aux):
    """All loss terms for one already-augmented batch; returns the total
    (a tensor on the autograd graph) and the individual terms."""
    masks = batch.class_masks
    zero = student_out.main_strong.new_zeros(())

    strong = _stream_bce(batch.has_strong, student_out.main_strong, batch.strong, masks, zero)
    weak = _stream_bce(batch.has_weak, student_out.main_weak, batch.weak, masks, zero)
    if bool(batch.has_soft.any()):
        sel = batch.has_soft
        soft = masked_bce(segment_max_probs(student_out.main_strong[sel]),
                          batch.soft[sel], masks[sel])
    else:
        soft = zero
    cons = consistency_loss(student_out, teacher_out)

    aux_strong = _stream_bce(batch.has_strong, student_out.aux_strong, batch.strong, masks, zero)
    aux_weak = _stream_bce(batch.has_weak, student_out.aux_weak, batch.weak, masks, zero)
    if bool(batch.has_soft.any()):
        sel = batch.has_soft
        aux_soft = masked_bce(segment_max_probs(student_out.aux_strong[sel]),
                              batch.soft[sel], masks[sel])
    else:
        aux_soft = zero

    total = (strong + weak + soft + w_cons * cons
             + w_aux * (aux_strong + aux_weak + aux_soft))
    terms = {"strong_bce": strong, "weak_bce": weak, "soft_bce": soft,
             "consistency": cons, "aux_strong_bce": aux_strong,
             "aux_weak_bce": aux_weak, "aux_soft_bce": aux_soft, "total": total}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise SedkitError(f"non-finite loss in term {name!r} at training time")
    return total, terms


def train_step(state: TrainState, batch: Batch, config: TrainConfig) -> LossBreakdown:
    """One optimization step: augment views, forward student and teacher,
    combine losses, Adam step with decoupled weight decay, EMA update."""
    lr = lr_schedule(state.epoch, config.max_lr, config.rampup_epochs)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    w_cons = consistency_weight(state.epoch, config.consistency_max,
                                config.rampup_epochs)
    w_aux = aux_weight(state.epoch, config.aux_w0, config.aux_w1,
                       config.aux_decay_epochs)

    shared = augment_shared(batch, state.np_rng, config.augment)
    student_view = augment_view(shared, state.np_rng, config.augment)
    teacher_view = augment_view(shared, state.np_rng, config.augment)

    state.student.train()
    state.teacher.train()
    student_out = state.student(student_view.features, student_view.embeddings)
    with torch.no_grad():
        teacher_out = state.teacher(teacher_view.features, teacher_view.embeddings)

    total, terms = compute_losses(student_out, teacher_out, student_view,
                                  w_cons, w_aux)

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, config.ema_alpha)
    state.step += 1
    return LossBreakdown(**{k: float(v.detach()) for k, v in terms.items()})


# ------------------------------------------------------------- prediction

def predict_clip_scores(model: CRNN, feature_arrays, embeddings=None):
    """Eval-mode frame probabilities for a list of (C_in, T, F) arrays."""
    model.eval()
    out = []
    with torch.no_grad():
        for idx, arr in enumerate(feature_arrays):
            x = torch.as_tensor(np.asarray(arr), dtype=torch.float32).unsqueeze(0)
            emb = None
            if embeddings is not None and embeddings[idx] is not None:
                emb = torch.as_tensor(np.asarray(embeddings[idx]),
                                      dtype=torch.float32).unsqueeze(0)
            result = model(x, emb)
            out.append(result.main_strong.squeeze(0).numpy().astype(np.float32))
    return out


# ------------------------------------------------------------- validation

@dataclass
class ValidationSet:
    """Featurized clips plus whichever references are available."""

    items: list                  # (clip_id, feature array, embeddings or None)
    strong_refs: dict = None     # clip_id -> StrongLabelSet
    soft_refs: dict = None       # clip_id -> SoftLabelSet
    class_map: object = None
    clip_duration_s: float = 10.0


def validation_scores(model: CRNN, valset: ValidationSet):
    """(event-detection score, segment pAUC score) on the validation set;
    a missing reference kind contributes 0."""
    from . import metrics

    ids = [item[0] for item in valset.items]
    arrays = [item[1] for item in valset.items]
    embs = [item[2] for item in valset.items]
    scores = predict_clip_scores(model, arrays, embs)
    by_clip = dict(zip(ids, scores))

    psds_value = 0.0
    if valset.strong_refs:
        refs = {cid: valset.strong_refs.get(cid) for cid in ids}
        psds_value = metrics.psds(
            by_clip, refs, n_classes=scores[0].shape[1],
            clip_duration_s=valset.clip_duration_s)
    mpauc_value = 0.0
    if valset.soft_refs:
        mpauc_value = metrics.mpauc(by_clip, valset.soft_refs,
                                    class_mask=(valset.class_map.maestro_visible
                                                if valset.class_map is not None else None))
    return psds_value, mpauc_value


# ------------------------------------------------------------ checkpoints

def save_train_checkpoint(path, state: TrainState, model_config: ModelConfig,
                          train_config: TrainConfig, scores=(), class_names=None):
    tensors = {}
    for name, arr in model_to_tensors(state.student).items():
        tensors[f"student.{name}"] = arr
    for name, arr in model_to_tensors(state.teacher).items():
        tensors[f"teacher.{name}"] = arr
    param_names = {id(p): n for n, p in state.student.named_parameters()}
    for param, opt_state in state.optimizer.state.items():
        name = param_names.get(id(param))
        if name is None:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            if key in opt_state:
                tensors[f"opt.{key}.{name}"] = (
                    opt_state[key].detach().cpu().numpy().astype(np.float32))

    config = {
        "model": model_config.to_dict(),
        "train": train_config.to_dict(),
        "class_names": list(class_names) if class_names else [],
        "run": {
            "epoch": int(state.epoch),
            "step": int(state.step),
            "np_rng": state.np_rng.bit_generator.state if state.np_rng else None,
            "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
        },
    }
    write_checkpoint(path, config, tensors, epoch=state.epoch, step=state.step,
                     scores=scores)


def load_train_checkpoint(path, restore_rng=True):
    """Rebuild a TrainState (student, teacher, optimizer moments, RNG) from
    a checkpoint written by :func:`save_train_checkpoint`."""
    ck = read_checkpoint(path)
    model_config = ModelConfig.from_dict(ck.config["model"])
    train_config = TrainConfig.from_dict(ck.config["train"])
    student = CRNN(model_config)
    tensors_to_model(student, ck.tensors, prefix="student.")
    teacher = CRNN(model_config)
    tensors_to_model(teacher, ck.tensors, prefix="teacher.")
    for p in teacher.parameters():
        p.requires_grad_(False)

    optimizer = make_optimizer(student, train_config)
    for name, param in student.named_parameters():
        avg_key = f"opt.exp_avg.{name}"
        sq_key = f"opt.exp_avg_sq.{name}"
        if avg_key in ck.tensors and sq_key in ck.tensors:
            optimizer.state[param] = {
                "step": torch.tensor(float(ck.step)),
                "exp_avg": torch.as_tensor(ck.tensors[avg_key]).to(param.dtype),
                "exp_avg_sq": torch.as_tensor(ck.tensors[sq_key]).to(param.dtype),
            }

    np_rng = np.random.default_rng()
    run = ck.config.get("run", {})
    if restore_rng and run.get("np_rng"):
        np_rng.bit_generator.state = run["np_rng"]
    if restore_rng and run.get("torch_rng"):
        raw = bytes.fromhex(run["torch_rng"])
        torch.set_rng_state(torch.frombuffer(bytearray(raw), dtype=torch.uint8).clone())

    state = TrainState(student=student, teacher=teacher, optimizer=optimizer,
                       epoch=ck.epoch, step=ck.step, np_rng=np_rng)
    return state, model_config, train_config, ck


def load_model_for_prediction(path, which="teacher"):
    """Load just one network (teacher by default) for inference."""
    if which not in ("student", "teacher"):
        raise ConfigError(f"which must be 'student' or 'teacher', got {which!r}")
    ck = read_checkpoint(path)
    model_config = ModelConfig.from_dict(ck.config["model"])
    model = CRNN(model_config)
    tensors_to_model(model, ck.tensors, prefix=f"{which}.")
    model.eval()
    return model, model_config, ck


# -------------------------------------------------------------- train loop

def apply_determinism(strict: bool):
    if strict:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def train_loop(model_config: ModelConfig, train_config: TrainConfig, examples,
               out_dir, validation: ValidationSet = None, class_names=None,
               resume=None, strict_determinism=False, embeddings_lookup=None):
    """Run training, writing one resumable checkpoint per epoch.

    Returns the list of checkpoint paths (epoch 0 is the initialization
    snapshot, written even when epochs == 0).
    """
    apply_determinism(strict_determinism)
    os.makedirs(out_dir, exist_ok=True)

    if resume is not None:
        state, model_config, train_config, _ = load_train_checkpoint(resume)
        start_epoch = state.epoch
        paths = []
    else:
        state = init_train_state(model_config, train_config)
        start_epoch = 0
        init_path = os.path.join(out_dir, "epoch_0000.sedm")
        scores = _epoch_scores(state, validation)
        save_train_checkpoint(init_path, state, model_config, train_config,
                              scores=scores, class_names=class_names)
        paths = [init_path]

    for epoch in range(start_epoch, train_config.epochs):
        state.epoch = epoch
        batch_iter = make_batches(examples, train_config.batch_composition,
                                  seed=(train_config.seed, epoch))
        losses = []
        for batch_examples in batch_iter:
            batch = collate(batch_examples, embeddings_lookup=embeddings_lookup)
            losses.append(train_step(state, batch, config=train_config))
        state.epoch = epoch + 1

        scores = _epoch_scores(state, validation)
        mean_total = float(np.mean([l.total for l in losses])) if losses else 0.0
        log.info("epoch %d: %d steps, mean loss %.4f, scores %s",
                 epoch + 1, len(losses), mean_total,
                 tuple(round(s, 4) for s in scores))
        path = os.path.join(out_dir, f"epoch_{epoch + 1:04d}.sedm")
        save_train_checkpoint(path, state, model_config, train_config,
                              scores=scores, class_names=class_names)
        paths.append(path)
    return paths


def _epoch_scores(state: TrainState, validation):
    """(student event score, student pAUC, teacher event score, teacher pAUC)."""
    if validation is None:
        return (0.0, 0.0, 0.0, 0.0)
    s_psds, s_pauc = validation_scores(state.student, validation)
    t_psds, t_pauc = validation_scores(state.teacher, validation)
    return (s_psds, s_pauc, t_psds, t_pauc)
