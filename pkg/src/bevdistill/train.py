"""Teacher pretraining, distillation training of the student, and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint, restore, snapshot
from .compress import compress
from .config import TrainConfig, config_from_json
from .dataset import Dataset, scene_targets
from .losses import (
    accumulate_confusion,
    confusion_matrix,
    logit_kd,
    lovasz_softmax,
    miou,
    total_loss,
    weighted_ce,
)
from .lwd import compress_two_stage, height_embed, lwd_loss, region_weights, sample_regions, selected_columns
from .models import DistillHead, Scene, ToyStudent, ToyTeacher, matched_student_rows
from .vpd import cross_attention, flatten_and_transfer, row_cosine, vpd_loss, vpd_total

log = logging.getLogger(__name__)

COMPONENTS = ("wce", "lovasz", "vpd", "lwd", "logit", "total")
METRIC_COLUMNS = ("epoch",) + COMPONENTS + ("train_miou",)


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1 - b2) * p.grad * p.grad
            m_hat = self.m[k] / (1 - b1**self.t)
            v_hat = self.v[k] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, params):
    return Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)


def _zero(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- losses per scene


def segmentation_losses(point_logits: Tensor, targets, weights, ignore_id):
    wce = weighted_ce(point_logits, targets, weights, ignore_id)
    lov = lovasz_softmax(ag.softmax_rows(point_logits), targets, ignore_id)
    return wce, lov


@dataclass
class StepOutput:
    components: dict
    total: Tensor
    point_pred: np.ndarray
    alignment: list = field(default_factory=list)  # (f_B', f_V) per VPD layer


def student_objective(
    scene: Scene,
    teacher: ToyTeacher,
    student: ToyStudent,
    head: DistillHead,
    cfg: TrainConfig,
    weights,
    ignore_id: int,
    rng: np.random.Generator,
    teacher_out=None,
) -> StepOutput:
    """Combined objective for one scene with the active distillation terms."""
    flags = cfg.ablation
    t_feats, t_logits = teacher_out if teacher_out is not None else teacher.run(scene)
    s_feats, s_logits = student.run(scene)
    targets = scene_targets(scene)
    s_point = student.point_logits(scene, s_logits)
    wce, lov = segmentation_losses(s_point, targets, weights, ignore_id)
    zero = Tensor(0.0)
    comps = {"wce": wce, "lovasz": lov, "vpd": zero, "lwd": zero, "logit": zero}
    aligned = []

    if flags.logit_kd:
        comps["logit"] = logit_kd(s_point, teacher.point_logits(scene, t_logits).data, cfg.temperature)

    if flags.vpd and len(scene.corr):
        layer_losses = []
        for layer in sorted(cfg.vpd_layers):
            group = head.vpd[layer]
            teacher_grid = scene.grid.with_feats(t_feats[layer - 1].detach())
            cols = compress(teacher_grid, group["compress"], flags.compression_mode)
            student_rows = matched_student_rows(s_feats[layer - 1], scene)
            f_v, f_b = flatten_and_transfer(cols, student_rows, group["transfer"] if flags.domain_transfer else None)
            f_b_attn = cross_attention(f_v, f_b, group["attention"]) if flags.cross_attention else f_b
            layer_losses.append(vpd_loss(f_b_attn, f_v))
            aligned.append((f_b_attn, f_v))
        comps["vpd"] = vpd_total(layer_losses)

    if cfg.lwd_active and scene.height.sum() > 0:
        last = cfg.num_layers
        teacher_grid = scene.grid.with_feats(t_feats[last - 1].detach())
        f_v_prime = compress_two_stage(height_embed(teacher_grid, head.height), head.two_stage)
        _, P = region_weights(scene.height, head.partition)
        m = min(cfg.lwd.m, int((P > 0).sum()))
        regions = sample_regions(P, m, rng)
        rows = selected_columns(scene.corr, head.partition, regions)
        comps["lwd"] = lwd_loss(matched_student_rows(s_feats[last - 1], scene), f_v_prime, rows)

    total = total_loss(comps["wce"], comps["lovasz"], comps["vpd"], comps["lwd"], comps["logit"], cfg.loss_weights)
    pred = s_point.data.argmax(axis=1)
    return StepOutput(comps, total, pred, aligned)


# ---------------------------------------------------------------- builders


def build_teacher(cfg: TrainConfig, num_classes: int) -> ToyTeacher:
    rng = np.random.default_rng([cfg.seed, 1])
    return ToyTeacher(cfg, num_classes, rng)


def build_student(cfg: TrainConfig, num_classes: int):
    rng = np.random.default_rng([cfg.seed, 2])
    return ToyStudent(cfg, num_classes, rng), DistillHead(cfg, rng)


def teacher_from_checkpoint(ckpt: Checkpoint) -> ToyTeacher:
    cfg = config_from_json(ckpt.config)
    teacher = build_teacher(cfg, ckpt.num_classes)
    restore(teacher.named_parameters(), ckpt.params)
    return teacher.freeze()


def _check_finite(value: Tensor, what: str):
    if not np.isfinite(value.data).all():
        raise NumericError(f"non-finite {what}")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[k : k + batch_size] for k in range(0, n, batch_size)]


# ---------------------------------------------------------------- teacher


def teacher_loss(scene, teacher, weights, ignore_id):
    _, logits = teacher.run(scene)
    point = teacher.point_logits(scene, logits)
    wce, lov = segmentation_losses(point, scene_targets(scene), weights, ignore_id)
    return wce + lov, point.data.argmax(axis=1)


def pretrain_teacher(cfg: TrainConfig, data: Dataset, steps: int | None = None) -> Checkpoint:
    """Train the teacher on wce + lovasz for ``teacher_epochs`` (or exactly ``steps`` batches)."""
    teacher = build_teacher(cfg, data.num_classes)
    params = [p for _, p in teacher.named_parameters()]
    opt = make_optimizer(cfg, params)
    rng = np.random.default_rng([cfg.seed, 3])
    weights = data.class_weights()
    done, epoch = 0, 0
    budget = steps if steps is not None else cfg.teacher_epochs * -(-len(data.train) // cfg.batch_size)
    while done < budget:
        epoch += 1
        for batch in _batches(len(data.train), cfg.batch_size, rng):
            if done >= budget:
                break
            _zero(params)
            for i in batch:
                loss, _ = teacher_loss(data.train[i], teacher, weights, data.ignore_id)
                _check_finite(loss, "teacher loss")
                ag.backward(loss * (1.0 / len(batch)))
            opt.step()
            done += 1
        log.info("teacher epoch %d done (%d steps)", epoch, done)
    return Checkpoint(
        "teacher",
        snapshot(teacher.named_parameters()),
        cfg.to_json(),
        rng.bit_generator.state,
        epoch,
        data.num_classes,
        list(weights),
        list(data.class_names),
    )


# ---------------------------------------------------------------- student


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list  # one dict per epoch with METRIC_COLUMNS
    alignment: list  # mean teacher/student row cosine, index 0 = before training
    step_log: list  # per-step component dicts (floats), for audit


def alignment_probe(scenes, teacher, student, head, cfg, weights, ignore_id) -> float:
    """Mean row cosine between attended student rows and teacher rows over VPD layers."""
    if not cfg.ablation.vpd:
        return float("nan")
    values = []
    rng = np.random.default_rng(0)
    for scene in scenes:
        out = student_objective(scene, teacher, student, head, cfg, weights, ignore_id, rng)
        values += [row_cosine(a, b) for a, b in out.alignment]
    return float(np.mean(values)) if values else float("nan")


def check_teacher_compat(cfg: TrainConfig, teacher_ckpt: Checkpoint):
    tcfg = config_from_json(teacher_ckpt.config)
    if tcfg.grid != cfg.grid:
        raise ValueError("teacher was trained on a different grid than the student config")
    if tcfg.c_v != cfg.c_v or tcfg.num_layers != cfg.num_layers:
        raise ValueError("teacher width/depth differs from the student config")


def train_student(cfg: TrainConfig, teacher_ckpt: Checkpoint, data: Dataset, probe_scenes=None) -> TrainResult:
    check_teacher_compat(cfg, teacher_ckpt)
    if teacher_ckpt.num_classes != data.num_classes:
        raise ValueError("teacher and dataset disagree on the class count")
    teacher = teacher_from_checkpoint(teacher_ckpt)
    student, head = build_student(cfg, data.num_classes)
    named = student.named_parameters() + head.named_parameters()
    params = [p for _, p in named]
    opt = make_optimizer(cfg, params)
    rng = np.random.default_rng([cfg.seed, 4])
    weights = data.class_weights()
    probe = data.train[: min(4, len(data.train))] if probe_scenes is None else probe_scenes
    teacher_cache = [teacher.run(s) for s in data.train]

    alignment = [alignment_probe(probe, teacher, student, head, cfg, weights, data.ignore_id)]
    metrics, step_log = [], []
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(COMPONENTS, 0.0)
        steps = 0
        cm = confusion_matrix(data.num_classes)
        for batch in _batches(len(data.train), cfg.batch_size, rng):
            _zero(params)
            batch_comps = dict.fromkeys(COMPONENTS, 0.0)
            for i in batch:
                scene = data.train[i]
                out = student_objective(
                    scene, teacher, student, head, cfg, weights, data.ignore_id, rng, teacher_cache[i]
                )
                _check_finite(out.total, "student loss")
                ag.backward(out.total * (1.0 / len(batch)))
                for k, v in out.components.items():
                    batch_comps[k] += v.item() / len(batch)
                batch_comps["total"] += out.total.item() / len(batch)
                accumulate_confusion(cm, out.point_pred, scene_targets(scene), data.ignore_id)
            opt.step()
            step_log.append(batch_comps)
            for k in COMPONENTS:
                sums[k] += batch_comps[k]
            steps += 1
        row = {"epoch": epoch, **{k: sums[k] / steps for k in COMPONENTS}, "train_miou": miou(cm)[1]}
        metrics.append(row)
        alignment.append(alignment_probe(probe, teacher, student, head, cfg, weights, data.ignore_id))
        log.info("student epoch %d: %s", epoch, row)

    ckpt = Checkpoint(
        "student",
        snapshot(named),
        cfg.to_json(),
        rng.bit_generator.state,
        cfg.epochs,
        data.num_classes,
        list(weights),
        list(data.class_names),
    )
    return TrainResult(ckpt, metrics, alignment, step_log)


# ---------------------------------------------------------------- evaluation


def model_from_checkpoint(ckpt: Checkpoint):
    cfg = config_from_json(ckpt.config)
    if ckpt.role == "teacher":
        return teacher_from_checkpoint(ckpt)
    student, head = build_student(cfg, ckpt.num_classes)
    restore(student.named_parameters() + head.named_parameters(), ckpt.params)
    return student.freeze()


def predict_points(model, scene: Scene) -> np.ndarray:
    """Class per in-range point (students broadcast pillar logits to member points)."""
    _, logits = model.run(scene)
    return model.point_logits(scene, logits).data.argmax(axis=1)


@dataclass
class EvalReport:
    iou: np.ndarray
    miou: float
    confusion: np.ndarray
    class_names: list

    def rows(self):
        return [(n, float(v)) for n, v in zip(self.class_names, self.iou)] + [("mIoU", self.miou)]


def evaluate(ckpt: Checkpoint, scenes) -> EvalReport:
    if not scenes:
        raise ValueError("cannot evaluate on an empty dataset")
    model = model_from_checkpoint(ckpt)
    cm = confusion_matrix(ckpt.num_classes)
    for scene in scenes:
        accumulate_confusion(cm, predict_points(model, scene), scene_targets(scene), scene.labels.ignore_id)
    iou, mean = miou(cm)
    names = ckpt.class_names or [f"class_{c}" for c in range(ckpt.num_classes)]
    return EvalReport(iou, mean, cm, names)


def point_accuracy(ckpt: Checkpoint, scenes) -> float:
    model = model_from_checkpoint(ckpt)
    hit = total = 0
    for scene in scenes:
        targets = scene_targets(scene)
        valid = targets != scene.labels.ignore_id
        hit += int((predict_points(model, scene)[valid] == targets[valid]).sum())
        total += int(valid.sum())
    return hit / total


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])


# ---------------------------------------------------------------- desk experiment


@dataclass
class DeskResult:
    teacher_accuracy: float
    alignment: list
    miou_distilled: float
    miou_baseline: float
    seconds: float

    @property
    def alignment_increasing(self) -> bool:
        a = self.alignment
        return len(a) > 1 and all(np.isfinite(a)) and all(y > x for x, y in zip(a, a[1:]))


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Same run with every distillation term switched off."""
    return replace(
        cfg,
        ablation=replace(cfg.ablation, logit_kd=False, vpd=False),
        lwd=replace(cfg.lwd, enabled=False),
    )


def desk_experiment(cfg: TrainConfig, data: Dataset, teacher_steps: int | None = None) -> DeskResult:
    """Pretrain a teacher, then train a distilled and a plain student on the same seed and budget."""
    start = time.perf_counter()
    teacher = pretrain_teacher(cfg, data, steps=teacher_steps)
    distilled = train_student(cfg, teacher, data)
    plain = train_student(baseline_config(cfg), teacher, data)
    return DeskResult(
        point_accuracy(teacher, data.train),
        distilled.alignment,
        evaluate(distilled.checkpoint, data.val).miou,
        evaluate(plain.checkpoint, data.val).miou,
        time.perf_counter() - start,
    )
