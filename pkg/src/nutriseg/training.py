"""Multi-task sampling and the training driver.

Sampling is a two-level draw (task group by ratio, then dataset within the
group by renormalized weight, then a uniform conversation) and draw ``t``
depends only on ``(seed, t)``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
import torch

from .datamodel import Conversation, LossWeights, MaskImage
from .instruction_forge import RenderedConversation, render_for_training
from .losses import LossBreakdown, mask_terms, nutrition_terms, text_ce, total_loss
from .model import ToyLMM, save_checkpoint
from .io import atomic_write_text
from .tokenizer import Tokenizer

log = logging.getLogger(__name__)

TASK_GROUP = {
    "classification": "vqa",
    "ingredient": "vqa",
    "recipe": "vqa",
    "nutrition": "nutrition",
    "segmentation": "segmentation",
    "dialogue": "generated",
    "reason_seg": "generated",
}

LOG_HEADER = "step\tl_txt\tl_nutrition\tl_mask\ttotal\tlr\ttasks"


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass(frozen=True)
class StagePlan:
    stage: int
    group_ratios: Mapping[str, float]
    # dataset -> (group, weight within group)
    datasets: Mapping[str, tuple[str, float]]
    batch_size: int = 4
    steps: int = 2000
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_steps: int = 100
    grad_clip: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if any(r <= 0 for r in self.group_ratios.values()):
            raise ValueError("group ratios must be positive")
        for ds, (group, w) in self.datasets.items():
            if group not in self.group_ratios:
                raise ValueError(f"dataset {ds} is in unknown group {group}")
            if w <= 0:
                raise ValueError(f"dataset weight for {ds} must be positive")
        for g in self.group_ratios:
            if not any(grp == g for grp, _ in self.datasets.values()):
                raise ValueError(f"group {g} has no datasets")

    def group_probs(self) -> dict[str, float]:
        z = sum(self.group_ratios.values())
        return {g: r / z for g, r in self.group_ratios.items()}

    def dataset_probs(self) -> dict[str, float]:
        """Marginal probability of drawing each dataset."""
        gp = self.group_probs()
        out = {}
        for ds, (g, w) in self.datasets.items():
            z = sum(w2 for g2, w2 in self.datasets.values() if g2 == g)
            out[ds] = gp[g] * w / z
        return out


def stage1_plan(**kw: Any) -> StagePlan:
    return StagePlan(
        stage=1,
        group_ratios={"vqa": 2, "nutrition": 1, "segmentation": 1},
        datasets={
            "vireo172": ("vqa", 5),
            "recipe1m": ("vqa", 15),
            "nutrition5k": ("nutrition", 10),
            "foodseg103": ("segmentation", 6),
            "uecfoodpix": ("segmentation", 4),
        },
        **{"batch_size": 4, **kw},
    )


def stage2_plan(**kw: Any) -> StagePlan:
    return StagePlan(
        stage=2,
        group_ratios={"generated": 15, "public": 7},
        datasets={
            "fooddialogues": ("generated", 45),
            "foodreasonseg": ("generated", 30),
            "vireo172": ("public", 5),
            "recipe1m": ("public", 10),
            "nutrition5k": ("public", 10),
            "foodseg103": ("public", 6),
            "uecfoodpix": ("public", 4),
        },
        **{"batch_size": 2, **kw},
    )


def single_task_plan(dataset: str, stage: int = 1, **kw: Any) -> StagePlan:
    return StagePlan(stage=stage, group_ratios={"only": 1}, datasets={dataset: ("only", 1)}, **kw)


class Sampler:
    """Random-access sample stream: ``draw(t)`` is a pure function of (seed, t)."""

    def __init__(self, plan: StagePlan, registry: Mapping[str, Sequence[Any]], seed: int):
        missing = [ds for ds in plan.datasets if not registry.get(ds)]
        if missing:
            raise KeyError(f"no shard (or an empty shard) for dataset(s): {', '.join(sorted(missing))}")
        self.plan, self.registry, self.seed = plan, registry, seed
        gp = plan.group_probs()
        self.groups = sorted(gp)
        self.group_p = np.array([gp[g] for g in self.groups])
        self.members = {}
        for g in self.groups:
            names = sorted(ds for ds, (grp, _) in plan.datasets.items() if grp == g)
            w = np.array([plan.datasets[n][1] for n in names], dtype=float)
            self.members[g] = (names, w / w.sum())

    def draw(self, t: int) -> tuple[str, int]:
        rng = np.random.default_rng([self.seed, t, 0x5EED])
        u_group, u_ds, u_item = rng.random(3)
        g = self.groups[min(int(np.searchsorted(np.cumsum(self.group_p), u_group, side="right")), len(self.groups) - 1)]
        names, p = self.members[g]
        ds = names[min(int(np.searchsorted(np.cumsum(p), u_ds, side="right")), len(names) - 1)]
        return ds, int(u_item * len(self.registry[ds]))

    def __iter__(self) -> Iterator[tuple[str, int]]:
        t = 0
        while True:
            yield self.draw(t)
            t += 1

    def batch(self, step: int) -> list[tuple[str, int]]:
        bs = self.plan.batch_size
        return [self.draw(step * bs + i) for i in range(bs)]


def make_sampler(plan: StagePlan, registry: Mapping[str, Sequence[Any]], seed: int) -> Sampler:
    return Sampler(plan, registry, seed)


# -- batches ---------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor  # [B, H, W, 3]
    ids: torch.Tensor  # [B, T]
    loss_mask: torch.Tensor  # [B, T-1] over shifted targets
    nutrition_taps: list[tuple[int, int, Any]]
    nutrition_targets: torch.Tensor  # natural units
    seg_taps: list[tuple[int, int, Any]]
    seg_targets: torch.Tensor  # [n, H, W]
    task_tags: list[str]


class ImageCache:
    def __init__(self, root: str | Path | None, size: int, preloaded: Mapping[str, np.ndarray] | None = None):
        self.root, self.size = root, size
        self._cache: dict[str, torch.Tensor] = {
            k: torch.as_tensor(np.asarray(v, dtype=np.float32)) for k, v in (preloaded or {}).items()
        }

    def get(self, handle) -> torch.Tensor:
        if handle is not None and handle.path in self._cache:
            return self._cache[handle.path]
        if handle is None or self.root is None:
            return torch.zeros(self.size, self.size, 3)
        if handle.path not in self._cache:
            from .io import load_image

            self._cache[handle.path] = torch.from_numpy(load_image(self.root, handle))
        return self._cache[handle.path]


def collate(rendered: Sequence[RenderedConversation], images: Sequence[torch.Tensor], pad_id: int) -> Batch:
    T = max(len(r.ids) for r in rendered)
    B = len(rendered)
    ids = torch.full((B, T), pad_id, dtype=torch.long)
    loss_mask = torch.zeros(B, T - 1, dtype=torch.bool)
    nut_taps, nut_y, seg_taps, seg_y = [], [], [], []
    for b, r in enumerate(rendered):
        ids[b, : len(r.ids)] = torch.tensor(r.ids)
        for s, e in r.loss_spans:
            loss_mask[b, s - 1 : e - 1] = True
        for pos, tok, label in r.task_positions:
            if isinstance(label, MaskImage):
                seg_taps.append((b, pos, tok))
                seg_y.append(torch.from_numpy(label.values.astype(np.float32)))
            else:
                nut_taps.append((b, pos, tok))
                nut_y.append(float(label))
    size = images[0].shape[0]
    return Batch(
        images=torch.stack(list(images)),
        ids=ids,
        loss_mask=loss_mask,
        nutrition_taps=nut_taps,
        nutrition_targets=torch.tensor(nut_y, dtype=torch.float32),
        seg_taps=seg_taps,
        seg_targets=torch.stack(seg_y) if seg_y else torch.zeros(0, size, size),
        task_tags=[r.task_tag for r in rendered],
    )


def compute_losses(model: ToyLMM, batch: Batch, weights: LossWeights) -> LossBreakdown:
    dtype = model.lm_head.weight.dtype
    logits, hidden, visual = model(batch.images.to(dtype), batch.ids)
    per_sample = []
    for b in range(batch.ids.shape[0]):
        if batch.loss_mask[b].any():
            per_sample.append(text_ce(logits[b, :-1], batch.ids[b, 1:], batch.loss_mask[b]))
    l_txt = torch.stack(per_sample).mean() if per_sample else None
    nut, _, mlog, _ = model.task_outputs(
        hidden, visual, batch.ids, batch.nutrition_taps + batch.seg_taps, batch.images.to(dtype)
    )
    nutrition = mask = None
    if batch.nutrition_taps:
        nutrition = nutrition_terms(nut, torch.log1p(batch.nutrition_targets.to(dtype)))
    if batch.seg_taps:
        mask = mask_terms(torch.sigmoid(mlog), batch.seg_targets.to(dtype))
    return total_loss(weights, l_txt, nutrition, mask)


# -- optimisation --------------------------------------------------------------------

def warmup_decay(step: int, warmup: int, total: int) -> float:
    """Linear warmup to 1, then linear decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    return max(0.0, (total - step) / (total - warmup))


@dataclass
class OptimizerState:
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    step: int = 0


def make_optimizer(model: ToyLMM, plan: StagePlan) -> OptimizerState:
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: warmup_decay(s, plan.warmup_steps, plan.steps))
    return OptimizerState(opt, sched)


def train_step(
    model: ToyLMM, batch: Batch, weights: LossWeights, state: OptimizerState, grad_clip: float = 1.0
) -> tuple[OptimizerState, LossBreakdown]:
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    losses = compute_losses(model, batch, weights)
    if not torch.isfinite(losses.total):
        raise NumericError(f"non-finite loss at step {state.step}: {losses.as_floats()}")
    losses.total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip) if params else torch.zeros(())
    if not torch.isfinite(norm):
        raise NumericError(f"non-finite gradient norm at step {state.step}")
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return state, losses


# -- stage driver ----------------------------------------------------------------------

@dataclass
class RunResult:
    log_lines: list[str]
    checkpoint: Path | None
    task_counts: Counter = field(default_factory=Counter)


def run_stage(
    plan: StagePlan,
    model: ToyLMM,
    tokenizer: Tokenizer,
    corpora: Mapping[str, Sequence[Conversation]],
    weights: LossWeights,
    seed: int,
    image_root: str | Path | None = None,
    out_dir: str | Path | None = None,
    images: Mapping[str, np.ndarray] | None = None,
) -> RunResult:
    """Train ``plan.steps`` steps; write ``train.log`` and ``model.ckpt`` under ``out_dir``."""
    torch.manual_seed(seed)
    sampler = make_sampler(plan, corpora, seed)
    state = make_optimizer(model, plan)
    images = ImageCache(image_root, model.cfg.image_size, images)
    rendered: dict[tuple[str, int], RenderedConversation] = {}
    lines = [LOG_HEADER]
    counts: Counter = Counter()
    out = Path(out_dir) if out_dir is not None else None

    for step in range(plan.steps):
        picks = sampler.batch(step)
        rs = []
        for key in picks:
            if key not in rendered:
                rendered[key] = render_for_training(corpora[key[0]][key[1]], tokenizer)
            rs.append(rendered[key])
        batch = collate(rs, [images.get(r.image) for r in rs], tokenizer.pad_id)
        lr = state.optimizer.param_groups[0]["lr"]
        state, losses = train_step(model, batch, weights, state, plan.grad_clip)
        counts.update(batch.task_tags)
        lines.append(losses.log_line(step, [f"{lr:.6g}", ",".join(batch.task_tags)]))
        if out is not None and plan.checkpoint_every and (step + 1) % plan.checkpoint_every == 0:
            save_checkpoint(out / f"model-step{step + 1}.ckpt", model, tokenizer, {"step": step + 1})

    ckpt = None
    if out is not None:
        atomic_write_text(out / "train.log", "\n".join(lines) + "\n")
        ckpt = out / "model.ckpt"
        save_checkpoint(ckpt, model, tokenizer, {"step": plan.steps, "stage": plan.stage, "seed": seed})
    return RunResult(lines, ckpt, counts)
