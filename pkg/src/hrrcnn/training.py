"""SGD-with-momentum training and AP evaluation on synthetic scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .autodiff import Tape
from .detector import (
    DivergenceError,
    HrModelParams,
    ModelConfig,
    detector_loss,
    hr_forward,
    infer,
    init_params,
)
from .metrics import ApReport, evaluate_detections
from .synthdata import SceneSpec, SyntheticScene, generate_scene, sample_proposals

log = logging.getLogger(__name__)

EVAL_PROPOSAL_SEED = 7919


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    decay_at: float = 0.75  # fraction of steps after which lr drops 10x
    clip_norm: float = 10.0
    n_per_gt: int = 4
    n_bg: int = 8
    jitter: float = 0.25
    eval_jitter: float = 0.15
    eval_interval: int = 500
    seed: int = 0


@dataclass
class LogRow:
    step: int
    loss: float
    report: Optional[ApReport]

    def fields(self, class_ids: Sequence[int]) -> list:
        if self.report is None:
            return [self.step, self.loss, float("nan"), float("nan")] + [float("nan")] * len(class_ids)
        return [self.step, self.loss, self.report.mean_ap50, self.report.mean_ap] + [
            self.report.ap50[c] for c in class_ids
        ]


def scenes_for(spec: SceneSpec, indices) -> List[SyntheticScene]:
    return [generate_scene(spec, int(i)) for i in indices]


def eval_proposals(scene: SyntheticScene, cfg: TrainConfig):
    return sample_proposals(scene, cfg.n_per_gt, cfg.n_bg, cfg.eval_jitter, [EVAL_PROPOSAL_SEED, scene.index])


def evaluate(params: HrModelParams, scenes: Sequence[SyntheticScene], cfg: TrainConfig) -> ApReport:
    dets = [infer(s.image, eval_proposals(s, cfg), params) for s in scenes]
    class_ids = list(range(1, params.config.num_classes + 1))
    return evaluate_detections(dets, [s.boxes for s in scenes], [s.labels for s in scenes], class_ids)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    if step >= int(cfg.decay_at * cfg.steps):
        lr *= 0.1
    return lr


def sgd_step(params: HrModelParams, velocity: dict, lr: float, cfg: TrainConfig) -> float:
    """Momentum update in registry order; returns the pre-clip gradient norm."""
    tensors = params.registry.tensors()
    sq = 0.0
    for t in tensors:
        if t.grad is not None:
            sq += float(np.sum(t.grad * t.grad))
    norm = np.sqrt(sq)
    factor = cfg.clip_norm / norm if cfg.clip_norm > 0 and norm > cfg.clip_norm else 1.0
    for t in tensors:
        g = (t.grad * factor if t.grad is not None else 0.0) + cfg.weight_decay * t.data
        v = velocity.get(t.name)
        v = g if v is None else cfg.momentum * v + g
        velocity[t.name] = v
        t.data -= lr * v
    return norm


def train_step(params: HrModelParams, scene: SyntheticScene, proposals) -> float:
    params.registry.zero_grad()
    tape = Tape()
    s1, s2 = hr_forward(tape, scene.image, proposals, params)
    loss = detector_loss(tape, s1, s2, scene.boxes, scene.labels)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} on scene {scene.index}")
    tape.backward(loss)
    return value


def train_loop(
    spec: SceneSpec,
    train_indices,
    model_config: ModelConfig = ModelConfig(),
    cfg: TrainConfig = TrainConfig(),
    eval_scenes: Optional[Sequence[SyntheticScene]] = None,
    callback: Optional[Callable[[LogRow], None]] = None,
    params: Optional[HrModelParams] = None,
):
    """Train on the given scene indices; returns ``(params, log_rows)``.

    Scenes are visited in a fresh permutation every epoch and proposals are
    resampled every step, both seeded from ``cfg.seed``.  An evaluation row is
    logged every ``eval_interval`` steps and after the last step.
    """
    train = scenes_for(spec, train_indices)
    if not train:
        raise ValueError("empty training set")
    if eval_scenes is None:
        eval_scenes = train
    params = init_params(model_config, cfg.seed) if params is None else params
    rng = np.random.default_rng([cfg.seed, 1])
    velocity: dict = {}
    rows: List[LogRow] = []
    order: np.ndarray = np.array([], dtype=np.intp)
    running = []
    for step in range(cfg.steps):
        if step % len(train) == 0:
            order = rng.permutation(len(train))
        scene = train[order[step % len(train)]]
        props = sample_proposals(scene, cfg.n_per_gt, cfg.n_bg, cfg.jitter, [cfg.seed, 2, step])
        try:
            loss = train_step(params, scene, props)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        grad_norm = sgd_step(params, velocity, learning_rate(cfg, step), cfg)
        if not np.isfinite(grad_norm):
            raise DivergenceError(f"step {step}: non-finite gradient norm on scene {scene.index}")
        running.append(loss)
        last = step == cfg.steps - 1
        if (cfg.eval_interval > 0 and (step + 1) % cfg.eval_interval == 0) or last:
            report = evaluate(params, eval_scenes, cfg)
            row = LogRow(step + 1, float(np.mean(running)), report)
            running = []
            rows.append(row)
            log.info("step %d loss %.4f AP50 %.4f AP %.4f", row.step, row.loss, report.mean_ap50, report.mean_ap)
            if callback is not None:
                callback(row)
    return params, rows
