"""Training loop: logit-adjusted focal loss, AdamW, half-cosine schedule, gradient accumulation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .metrics import MetricReport
from .model import RelationModel, SceneInput
from .pipeline import DetectorConfig, evaluate_model, training_input
from .scene_synth import SceneSpec, SynthConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 8
    accumulation: int = 4
    gamma: float = 2.0
    tau_la: float = 1.0
    seed: int = 0
    ema: bool = True
    ema_warmup: float = 0.0  # fraction of optimizer steps before the EMA buffer starts updating
    betas: tuple[float, float] = (0.9, 0.999)
    eval_every: int = 1
    eval_k_proposals: int = 100

    def validate(self) -> None:
        if self.accumulation < 1:
            raise ValueError("accumulation must be >= 1")
        if self.gamma < 0 or self.tau_la < 0:
            raise ValueError("gamma and tau_la must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("invalid batch size, epochs or learning rate")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


def logit_adjusted_focal_loss(logits: torch.Tensor, labels: torch.Tensor, priors: torch.Tensor,
                              tau_la: float = 1.0, gamma: float = 2.0, reduction: str = "mean") -> torch.Tensor:
    """-(1 - p)^gamma log p, with p the softmax of logits + tau_la * log(prior) at the label."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label out of range")
    priors = torch.as_tensor(priors, dtype=logits.dtype)
    if (priors <= 0).any() or abs(float(priors.sum()) - 1) > 1e-6:
        raise ValueError("priors must be strictly positive and sum to 1")
    adjusted = logits + tau_la * torch.log(priors)
    logp = torch.log_softmax(adjusted, dim=-1).gather(-1, labels.reshape(-1, 1)).reshape(labels.shape)
    loss = -((1 - logp.exp()) ** gamma) * logp
    if reduction == "none":
        return loss
    return loss.mean() if reduction == "mean" else loss.sum()


def predicate_priors(scenes: list[SceneSpec], num_predicates: int) -> torch.Tensor:
    counts = np.zeros(num_predicates)
    for s in scenes:
        for _, p, _ in s.relations:
            counts[p] += 1
    counts += 1  # keeps unseen classes strictly positive
    return torch.tensor(counts / counts.sum())


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        return lr0
    t = min(max(step, 0), total)
    return lr0 * 0.5 * (1 + math.cos(math.pi * t / total))


def decay_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Decoupled decay on weight matrices only; biases, norms and prototypes are exempt."""
    decay, keep = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else keep).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": keep, "weight_decay": 0.0}]


@dataclass
class TrainResult:
    model: RelationModel
    history: list[dict] = field(default_factory=list)
    reports: list[MetricReport] = field(default_factory=list)
    steps: int = 0


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _grad_norms(model: torch.nn.Module) -> dict:
    return {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}


def train(model: RelationModel, scenes: list[SceneSpec], synth: SynthConfig, config: TrainConfig,
          eval_scenes: list[SceneSpec] | None = None, eval_detector: DetectorConfig | None = None,
          inputs: list[SceneInput] | None = None) -> TrainResult:
    config.validate()
    if not scenes:
        raise ValueError("training set is empty")
    seed_everything(config.seed)
    dtype = model.dtype
    if inputs is None:
        inputs = [training_input(s, synth).to(dtype) for s in scenes]
    priors = predicate_priors(scenes, model.config.num_predicates).to(dtype)
    opt = torch.optim.AdamW(decay_groups(model, config.weight_decay), lr=config.lr, betas=config.betas)

    n_micro = math.ceil(len(inputs) / config.batch_size)
    steps_per_epoch = math.ceil(n_micro / config.accumulation)
    total_steps = steps_per_epoch * config.epochs
    gen = torch.Generator().manual_seed(config.seed)
    result = TrainResult(model)
    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(inputs), generator=gen).tolist()
        micro = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        losses = []
        for start in range(0, len(micro), config.accumulation):
            group = micro[start:start + config.accumulation]
            lr = cosine_lr(step, total_steps, config.lr)
            for pg in opt.param_groups:
                pg["lr"] = lr
            opt.zero_grad(set_to_none=True)
            ema_reps, ema_labels = [], []
            for idx in group:
                batch = [inputs[i] for i in idx]
                labels = torch.cat([b.labels for b in batch])
                if labels.numel() == 0:
                    continue
                logits, reps = model(batch)
                loss = logit_adjusted_focal_loss(logits, labels, priors, config.tau_la, config.gamma)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3g}); "
                        f"grad norms {_grad_norms(model)}"
                    )
                (loss / len(group)).backward()
                losses.append(float(loss.detach()))
                ema_reps.append(reps.detach())
                ema_labels.append(labels)
            opt.step()
            if config.ema and ema_reps and step >= config.ema_warmup * total_steps:
                model.bank.ema_update(torch.cat(ema_reps), torch.cat(ema_labels))
            step += 1
        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                 "lr": cosine_lr(step, total_steps, config.lr)}
        if eval_scenes and config.eval_every and (epoch + 1) % config.eval_every == 0:
            report, _ = evaluate_model(model, eval_scenes, synth, eval_detector or DetectorConfig(),
                                       config.eval_k_proposals)
            result.reports.append(report)
            entry.update(report.row())
        result.history.append(entry)
        log.info("epoch %d loss %.4f", epoch, entry["loss"])
    result.steps = step
    return result
