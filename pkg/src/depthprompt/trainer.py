"""Training loop, LR schedule, checkpointing, evaluation, and ablations.

The recipe: AdamW over every non-backbone parameter, initial LR 1e-4
dropped to 0.2x at 30% and 60% of total steps, weight decay 0.001,
beta1 0.9, 50 epochs by default. Desk-scale runs cap the step count via
``max_steps``; the schedule then spans that cap.

Determinism: the loop pins torch to one thread, seeds model construction,
and draws each epoch's permutation from a generator keyed on
(seed, epoch), so resuming from a checkpoint needs no saved RNG state.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .backbone import parameter_checksum, tile_to_tensor
from .data import CLASS_NAMES, Sample
from .depth_branch import PseudoLabelProvider, fetch_pseudo_label
from .errors import (
    ConfigError,
    DivergenceError,
    InputError,
    MissingLabelError,
)
from .losses import LossReport, class_loss, depth_loss, total_loss
from .metrics import ConfusionMatrix, MetricReport, compute_report
from .model import DepthPromptSegmenter, ModelConfig, build_model, trainable_parameters
from .seg_decoder import predict_mask

DEFAULT_BATCH_SIZES = {"tiny": 8, "vit_s": 8, "vit_b": 4, "vit_l": 2}

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    """Flat training recipe; every field round-trips through config files."""

    backbone: str = "tiny"
    adapter_enabled: bool = True
    prompter_enabled: bool = True
    lr0: float = 1e-4
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    epochs: int = 50
    milestones: Tuple[float, float] = (0.3, 0.6)
    gamma: float = 0.2
    batch_size: Optional[int] = None
    seed: int = 0
    max_steps: Optional[int] = None
    num_classes: int = 7
    depth_fusion_channels: int = 128

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError("gamma must lie in (0, 1)")
        ms = list(self.milestones)
        if ms != sorted(set(ms)) or any(not (0.0 < m < 1.0) for m in ms):
            raise ConfigError("milestones must be strictly increasing in (0, 1)")
        if self.epochs <= 0:
            raise ConfigError("epochs must be > 0")
        if self.backbone not in DEFAULT_BATCH_SIZES:
            raise ConfigError("unknown backbone %r" % self.backbone)
        if self.batch_size is not None and self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.depth_fusion_channels <= 0 or self.depth_fusion_channels % 16 != 0:
            raise ConfigError("depth_fusion_channels must be a positive multiple of 16")

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return DEFAULT_BATCH_SIZES[self.backbone]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            num_classes=self.num_classes,
            adapter_enabled=self.adapter_enabled,
            prompter_enabled=self.prompter_enabled,
            depth_fusion_channels=self.depth_fusion_channels,
        )


_CONFIG_TYPES = {
    "backbone": str,
    "adapter_enabled": bool,
    "prompter_enabled": bool,
    "lr0": float,
    "weight_decay": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "epochs": int,
    "milestones": "floats",
    "gamma": float,
    "batch_size": "optional_int",
    "seed": int,
    "max_steps": "optional_int",
    "num_classes": int,
    "depth_fusion_channels": int,
}


def write_config(path: str, cfg: TrainConfig) -> None:
    """Flat `key = value` lines, one per TrainConfig field."""
    with open(path, "w") as fh:
        for key in _CONFIG_TYPES:
            value = getattr(cfg, key)
            if key == "milestones":
                value = ",".join(repr(m) for m in value)
            elif value is None:
                value = "none"
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            fh.write("%s = %s\n" % (key, value))


def read_config(path: str) -> TrainConfig:
    if not os.path.isfile(path):
        raise ConfigError("config file not found: %s" % path)
    values = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("config line %d has no '=': %r" % (line_no, raw))
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key not in _CONFIG_TYPES:
                raise ConfigError("unknown config key %r on line %d" % (key, line_no))
            kind = _CONFIG_TYPES[key]
            try:
                if kind is bool:
                    if text not in ("true", "false"):
                        raise ValueError(text)
                    values[key] = text == "true"
                elif kind == "floats":
                    values[key] = tuple(float(v) for v in text.split(","))
                elif kind == "optional_int":
                    values[key] = None if text == "none" else int(text)
                elif kind is str:
                    values[key] = text
                else:
                    values[key] = kind(text)
            except ValueError:
                raise ConfigError(
                    "bad value %r for config key %r on line %d" % (text, key, line_no)
                )
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def schedule_boundaries(total_steps: int, cfg: TrainConfig) -> List[int]:
    """Ceil of milestone * total, computed in exact rational arithmetic."""
    out = []
    for m in cfg.milestones:
        frac = Fraction(repr(m)) * total_steps
        out.append(int(math.ceil(frac)))
    return out


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Piecewise-constant LR with exact decimal drops (1e-4 -> 2e-5 -> 4e-6)."""
    if step < 0 or step >= total_steps:
        raise InputError("step %d outside [0, %d)" % (step, total_steps))
    drops = sum(1 for b in schedule_boundaries(total_steps, cfg) if step >= b)
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.gamma)) ** drops)


@dataclass
class TrainItem:
    """One tile ready for batching."""

    tile_id: str
    image: torch.Tensor  # (3, H, W)
    label: torch.Tensor  # (H, W) int64
    depth_maps: Optional[Tuple[np.ndarray, ...]]  # strides 1, 2, 4


def build_training_set(
    samples: Sequence[Sample],
    provider: Optional[PseudoLabelProvider],
    need_depth: bool,
) -> List[TrainItem]:
    """Materialize tensors; fetches every pseudo-label up front so a
    provider gap fails before step 1."""
    if not samples:
        raise InputError("training set is empty")
    items = []
    for sample in samples:
        depth_maps = None
        if need_depth:
            if provider is None:
                raise MissingLabelError(
                    "depth supervision requested but no pseudo-label provider given"
                )
            depth_maps = fetch_pseudo_label(provider, sample.tile.tile_id).maps
        items.append(
            TrainItem(
                tile_id=sample.tile.tile_id,
                image=tile_to_tensor(sample.tile)[0],
                label=torch.from_numpy(np.ascontiguousarray(sample.mask)).long(),
                depth_maps=depth_maps,
            )
        )
    first = items[0].image.shape
    for item in items:
        if item.image.shape != first:
            raise InputError("all training tiles must share one size")
    return items


@dataclass
class LossLogRow:
    step: int
    lr: float
    depth_loss: Optional[float]
    class_loss: float
    total: float


LOSS_LOG_HEADER = "step,lr,depth_loss,class_loss,total"


def loss_log_to_text(rows: Sequence[LossLogRow]) -> str:
    lines = [LOSS_LOG_HEADER]
    for r in rows:
        depth = "" if r.depth_loss is None else repr(r.depth_loss)
        lines.append(
            "%d,%s,%s,%s,%s" % (r.step, repr(r.lr), depth, repr(r.class_loss), repr(r.total))
        )
    return "\n".join(lines) + "\n"


def loss_log_from_text(text: str) -> List[LossLogRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != LOSS_LOG_HEADER:
        raise InputError("loss log missing header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise InputError("bad loss log line: %r" % ln)
        step, lr, depth, cls, total = parts
        rows.append(
            LossLogRow(
                step=int(step),
                lr=float(lr),
                depth_loss=None if depth == "" else float(depth),
                class_loss=float(cls),
                total=float(total),
            )
        )
    return rows


@dataclass
class CheckpointData:
    """Everything needed to restore a run: config, weights, optimizer."""

    config: TrainConfig
    step: int
    total_steps: int
    model_state: Dict[str, np.ndarray]
    optimizer_state: Dict[int, Dict[str, np.ndarray]]
    history: List[LossLogRow]
    backbone_checksum: str


def _meta_json(cfg: TrainConfig, step: int, total_steps: int, history, checksum: str) -> bytes:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "step": step,
        "total_steps": total_steps,
        "backbone_checksum": checksum,
        "history": [
            [r.step, r.lr, r.depth_loss, r.class_loss, r.total] for r in history
        ],
    }
    return json.dumps(payload, sort_keys=True).encode()


def save_checkpoint(
    path: str,
    model: DepthPromptSegmenter,
    optimizer: torch.optim.AdamW,
    cfg: TrainConfig,
    step: int,
    total_steps: int,
    history: Sequence[LossLogRow],
) -> None:
    arrays = {}
    for name, value in model.state_dict().items():
        if name.startswith("backbone."):
            continue
        arrays["param/" + name] = value.detach().cpu().numpy()
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            arrays["opt/%d/%s" % (idx, key)] = value.detach().cpu().numpy()
    checksum = parameter_checksum(model.backbone)
    meta = _meta_json(cfg, step, total_steps, list(history), checksum)
    arrays["meta"] = np.frombuffer(meta, dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path: str) -> CheckpointData:
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError("cannot read checkpoint %s: %s" % (path, exc))
    if "meta" not in archive.files:
        raise ConfigError("checkpoint %s has no meta entry" % path)
    meta = json.loads(archive["meta"].tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("unsupported checkpoint format %r" % meta.get("format"))
    raw_cfg = meta["config"]
    raw_cfg["milestones"] = tuple(raw_cfg["milestones"])
    cfg = TrainConfig(**raw_cfg)
    cfg.validate()
    model_state = {}
    optimizer_state: Dict[int, Dict[str, np.ndarray]] = {}
    for key in archive.files:
        if key.startswith("param/"):
            model_state[key[len("param/"):]] = archive[key]
        elif key.startswith("opt/"):
            _, idx, entry = key.split("/", 2)
            optimizer_state.setdefault(int(idx), {})[entry] = archive[key]
    history = [
        LossLogRow(step=int(s), lr=lr, depth_loss=d, class_loss=c, total=t)
        for s, lr, d, c, t in meta["history"]
    ]
    return CheckpointData(
        config=cfg,
        step=int(meta["step"]),
        total_steps=int(meta["total_steps"]),
        model_state=model_state,
        optimizer_state=optimizer_state,
        history=history,
        backbone_checksum=meta["backbone_checksum"],
    )


def restore_model(ckpt: CheckpointData) -> DepthPromptSegmenter:
    """Rebuild the model from config + seed, then load the trained parts."""
    model = build_model(ckpt.config.model_config(), seed=ckpt.config.seed)
    if parameter_checksum(model.backbone) != ckpt.backbone_checksum:
        raise ConfigError(
            "backbone rebuilt from seed does not match checkpoint checksum"
        )
    state = model.state_dict()
    for name, arr in ckpt.model_state.items():
        if name not in state:
            raise ConfigError("checkpoint has unknown parameter %r" % name)
        if tuple(state[name].shape) != tuple(arr.shape):
            raise ConfigError(
                "checkpoint parameter %r has shape %s, expected %s"
                % (name, tuple(arr.shape), tuple(state[name].shape))
            )
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model


def _make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        trainable_parameters(model),
        lr=cfg.lr0,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def _load_optimizer_state(
    optimizer: torch.optim.AdamW, saved: Dict[int, Dict[str, np.ndarray]]
) -> None:
    state_dict = optimizer.state_dict()
    state_dict["state"] = {
        idx: {key: torch.from_numpy(arr.copy()) for key, arr in entries.items()}
        for idx, entries in saved.items()
    }
    optimizer.load_state_dict(state_dict)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batch_tensors(items: Sequence[TrainItem], with_depth: bool):
    images = torch.stack([it.image for it in items])
    labels = torch.stack([it.label for it in items])
    depth = None
    if with_depth:
        depth = [
            torch.stack([torch.from_numpy(it.depth_maps[k]) for it in items])[:, None]
            for k in range(3)
        ]
    return images, labels, depth


@dataclass
class TrainResult:
    model: DepthPromptSegmenter
    config: TrainConfig
    total_steps: int
    final_step: int
    history: List[LossLogRow]
    checkpoint_path: Optional[str]
    loss_log_path: Optional[str]
    backbone_checksum_start: str
    backbone_checksum_end: str


def train(
    cfg: TrainConfig,
    samples: Sequence[Sample],
    provider: Optional[PseudoLabelProvider] = None,
    out_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Run the recipe; optionally stop early (simulated interruption) or
    resume a stopped run from its checkpoint."""
    cfg.validate()
    torch.set_num_threads(1)

    items = build_training_set(samples, provider, need_depth=cfg.prompter_enabled)
    batch_size = cfg.resolved_batch_size()
    steps_per_epoch = math.ceil(len(items) / batch_size)
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if asdict(ckpt.config) != asdict(cfg):
            raise ConfigError("resume config does not match checkpoint config")
        model = restore_model(ckpt)
        optimizer = _make_optimizer(model, cfg)
        _load_optimizer_state(optimizer, ckpt.optimizer_state)
        start_step = ckpt.step
        history = list(ckpt.history)
        total_steps = ckpt.total_steps
    else:
        model = build_model(cfg.model_config(), seed=cfg.seed)
        optimizer = _make_optimizer(model, cfg)
        start_step = 0
        history = []

    checksum_start = parameter_checksum(model.backbone)
    model.train()

    log_fh = None
    loss_log_path = None
    checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        loss_log_path = os.path.join(out_dir, "loss_log.csv")
        checkpoint_path = os.path.join(out_dir, "checkpoint.npz")
        mode = "a" if resume_from is not None and os.path.exists(loss_log_path) else "w"
        log_fh = open(loss_log_path, mode)
        if mode == "w":
            log_fh.write(LOSS_LOG_HEADER + "\n")
            for row in history:
                log_fh.write(loss_log_to_text([row]).splitlines()[1] + "\n")

    end_step = total_steps if stop_after is None else min(stop_after, total_steps)
    step = start_step
    try:
        while step < end_step:
            epoch = step // steps_per_epoch
            order = _epoch_order(cfg.seed, epoch, len(items))
            batch_index = step % steps_per_epoch
            while batch_index < steps_per_epoch and step < end_step:
                chosen = order[batch_index * batch_size : (batch_index + 1) * batch_size]
                batch = [items[i] for i in chosen]
                images, labels, depth_targets = _batch_tensors(
                    batch, with_depth=cfg.prompter_enabled
                )

                lr = lr_at(step, total_steps, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                # The training set was validated up front, so a validation
                # failure here means the network itself produced non-finite
                # values, which is divergence, not bad input.
                try:
                    logits, depth_maps = model(images)
                    if not torch.isfinite(logits.detach()).all():
                        raise DivergenceError(step)
                    c_loss = class_loss(logits, labels)
                    if cfg.prompter_enabled:
                        d_loss = depth_loss(depth_maps, depth_targets)
                        loss = d_loss + c_loss
                    else:
                        d_loss = None
                        loss = c_loss
                except InputError as exc:
                    raise DivergenceError(step) from exc

                if not torch.isfinite(loss.detach()):
                    raise DivergenceError(step)

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                report = total_loss(
                    None if d_loss is None else float(d_loss.detach()),
                    float(c_loss.detach()),
                )
                row = LossLogRow(
                    step=step,
                    lr=lr,
                    depth_loss=report.depth_loss,
                    class_loss=report.class_loss,
                    total=report.total,
                )
                history.append(row)
                if log_fh is not None:
                    log_fh.write(loss_log_to_text([row]).splitlines()[1] + "\n")
                    log_fh.flush()

                step += 1
                batch_index += 1
    finally:
        if log_fh is not None:
            log_fh.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, cfg, step, total_steps, history)

    return TrainResult(
        model=model,
        config=cfg,
        total_steps=total_steps,
        final_step=step,
        history=history,
        checkpoint_path=checkpoint_path,
        loss_log_path=loss_log_path,
        backbone_checksum_start=checksum_start,
        backbone_checksum_end=parameter_checksum(model.backbone),
    )


def evaluate_matrix(
    model: DepthPromptSegmenter, samples: Sequence[Sample]
) -> Tuple[ConfusionMatrix, MetricReport]:
    """Confusion matrix and metrics of the model's argmax masks."""
    if not samples:
        raise InputError("evaluation set is empty")
    model.eval()
    cm = ConfusionMatrix(model.cfg.num_classes)
    with torch.no_grad():
        for sample in samples:
            logits, _ = model(tile_to_tensor(sample.tile))
            pred = predict_mask(logits)[0]
            cm.add(pred, sample.mask)
    names = CLASS_NAMES if model.cfg.num_classes == len(CLASS_NAMES) else None
    return cm, compute_report(cm, class_names=names)


def evaluate(model: DepthPromptSegmenter, samples: Sequence[Sample]) -> MetricReport:
    return evaluate_matrix(model, samples)[1]


ABLATION_TOGGLES = (
    (False, False),
    (True, False),
    (False, True),
    (True, True),
)


@dataclass
class AblationRow:
    seed: int
    adapter_enabled: bool
    prompter_enabled: bool
    miou: float
    oa: float
    kappa: float
    m_f1: float
    delta_miou: float
    delta_oa: float
    delta_kappa: float


@dataclass
class AblationTable:
    rows: List[AblationRow] = field(default_factory=list)

    def row(self, seed: int, adapter: bool, prompter: bool) -> AblationRow:
        for r in self.rows:
            if (
                r.seed == seed
                and r.adapter_enabled == adapter
                and r.prompter_enabled == prompter
            ):
                return r
        raise KeyError((seed, adapter, prompter))

    def to_text(self) -> str:
        lines = [
            "seed\tadapter\tprompter\tmiou\toa\tkappa\tm_f1\tdelta_miou\tdelta_oa\tdelta_kappa"
        ]
        for r in self.rows:
            lines.append(
                "\t".join(
                    [
                        str(r.seed),
                        "on" if r.adapter_enabled else "off",
                        "on" if r.prompter_enabled else "off",
                        repr(r.miou),
                        repr(r.oa),
                        repr(r.kappa),
                        repr(r.m_f1),
                        repr(r.delta_miou),
                        repr(r.delta_oa),
                        repr(r.delta_kappa),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def run_ablation(
    base_cfg: TrainConfig,
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    provider: PseudoLabelProvider,
    seeds: Sequence[int],
) -> AblationTable:
    """Train all four toggle combinations per seed on identical data order
    and report held-out metrics with deltas against the (off, off) row."""
    if not seeds:
        raise ConfigError("run_ablation needs at least one seed")
    table = AblationTable()
    for seed in seeds:
        baseline: Optional[MetricReport] = None
        for adapter_on, prompter_on in ABLATION_TOGGLES:
            cfg = replace(
                base_cfg,
                adapter_enabled=adapter_on,
                prompter_enabled=prompter_on,
                seed=seed,
            )
            result = train(cfg, train_samples, provider=provider)
            report = evaluate(result.model, eval_samples)
            if not adapter_on and not prompter_on:
                baseline = report
            table.rows.append(
                AblationRow(
                    seed=seed,
                    adapter_enabled=adapter_on,
                    prompter_enabled=prompter_on,
                    miou=report.m_iou,
                    oa=report.oa,
                    kappa=report.kappa,
                    m_f1=report.m_f1,
                    delta_miou=report.m_iou - baseline.m_iou,
                    delta_oa=report.oa - baseline.oa,
                    delta_kappa=report.kappa - baseline.kappa,
                )
            )
    return table
