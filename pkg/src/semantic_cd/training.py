"""Losses, the decoupled two-stage schedule, and model checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import read_checkpoint, write_checkpoint
from .config import ModelConfig, StageSpec, model_config_from_dict, to_dict
from .data import DatasetManifest, collate, load_sample
from .errors import (
    AllPixelsIgnored,
    DivergedLoss,
    FrozenParameterDrift,
    NonBinaryTarget,
    VersionMismatch,
)
from .model import SemanticCD, build_model

log = logging.getLogger(__name__)

RNG_KEY = "__rng__/torch"


def bcd_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of change logits against a {0, 1} mask."""
    target = target.to(logits.dtype)
    if not torch.all((target == 0) | (target == 1)):
        raise NonBinaryTarget("BCD target must contain only 0 and 1")
    return F.binary_cross_entropy_with_logits(logits, target)


def scd_loss(m1: torch.Tensor, m2: torch.Tensor, gt1: torch.Tensor, gt2: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy per epoch over changed pixels (label != 0), summed over epochs.

    If no pixel in either map is changed the loss is 0 and AllPixelsIgnored is warned.
    """
    total = m1.new_zeros(()) + 0.0 * (m1.sum() + m2.sum())
    used = False
    for logits, gt in ((m1, gt1), (m2, gt2)):
        gt = gt.long()
        if torch.any(gt != 0):
            total = total + F.cross_entropy(logits, gt, ignore_index=0)
            used = True
    if not used:
        warnings.warn("no changed pixels in batch; SCD loss set to 0", AllPixelsIgnored)
    return total


def param_hashes(model: torch.nn.Module, names=None) -> dict[str, str]:
    out = {}
    for name, p in model.named_parameters():
        if names is None or name in names:
            out[name] = hashlib.sha256(p.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
    return out


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    stage_history: list[dict] = field(default_factory=list)
    rng_state: torch.Tensor | None = None

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def build(self) -> SemanticCD:
        # the model keeps its config, so later edits to this checkpoint must not leak in
        model = build_model(copy.deepcopy(self.config))
        model.load_state_dict(self.params)
        model.stage_history = list(self.stage_history)
        return model

    def restore_rng(self) -> None:
        if self.rng_state is not None:
            torch.set_rng_state(self.rng_state)


def make_checkpoint(model: SemanticCD, rng_state=None) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    rng = torch.get_rng_state() if rng_state is None else rng_state
    return Checkpoint(model.cfg, params, list(getattr(model, "stage_history", [])), rng)


def save_checkpoint(path, ckpt: Checkpoint | SemanticCD) -> Path:
    if isinstance(ckpt, SemanticCD):
        ckpt = make_checkpoint(ckpt)
    tensors = dict(ckpt.params)
    if ckpt.rng_state is not None:
        tensors[RNG_KEY] = ckpt.rng_state
    header = {
        "config": to_dict(ckpt.config),
        "fingerprint": ckpt.fingerprint,
        "stage_history": ckpt.stage_history,
    }
    return write_checkpoint(path, tensors, header)


def load_checkpoint(path, expected: ModelConfig | str | None = None) -> Checkpoint:
    """Read a model checkpoint; ``expected`` (config or fingerprint) guards against mismatches."""
    tensors, header = read_checkpoint(path)
    if "config" not in header:
        raise VersionMismatch(f"{path}: not a model checkpoint")
    config = model_config_from_dict(header["config"])
    if config.fingerprint() != header.get("fingerprint"):
        raise VersionMismatch(f"{path}: stored fingerprint does not match stored config")
    if expected is not None:
        want = expected.fingerprint() if isinstance(expected, ModelConfig) else str(expected)
        if want != config.fingerprint():
            raise VersionMismatch(f"{path}: config fingerprint {config.fingerprint()} != expected {want}")
    rng = tensors.pop(RNG_KEY, None)
    return Checkpoint(config, tensors, header.get("stage_history", []), rng)


class _SampleCache:
    def __init__(self, manifest: DatasetManifest, limit: int = 256):
        self.manifest = manifest
        self.limit = limit
        self._store = {}

    def get(self, sid):
        if sid in self._store:
            return self._store[sid]
        sample = load_sample(self.manifest, sid)
        if len(self._store) < self.limit:
            self._store[sid] = sample
        return sample

    def batch(self, ids, dtype):
        img1, img2, lb1, lb2, mask = collate([self.get(s) for s in ids])
        return img1.to(dtype), img2.to(dtype), lb1, lb2, mask.to(dtype)


def _batches(n: int, batch_size: int):
    return [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]


def _stage_loss(model: SemanticCD, stage: str, batch) -> torch.Tensor:
    img1, img2, lb1, lb2, mask = batch
    if stage == "bcd":
        return bcd_loss(model.forward_bcd(img1, img2), mask)
    with torch.no_grad():
        feats = model.encode(img1, img2)
    m1, m2, _, _ = model.forward_scd(img1, img2, feats)
    return scd_loss(m1, m2, lb1, lb2)


def run_stage(
    spec: StageSpec,
    model: SemanticCD,
    data: DatasetManifest,
    log_path=None,
    checkpoint_path=None,
    require_bcd: bool = True,
) -> Checkpoint:
    """Train one stage with every parameter outside the stage's groups frozen.

    Frozen parameters are hashed before and after; any change raises
    FrozenParameterDrift. The SCD stage expects the model to carry a
    completed BCD stage in ``model.stage_history`` unless ``require_bcd`` is off.
    """
    stage = spec.stage
    history = list(getattr(model, "stage_history", []))
    if stage == "scd" and require_bcd and not any(h["stage"] == "bcd" for h in history):
        raise ValueError("the SCD stage needs a model that completed the BCD stage")

    torch.manual_seed(spec.seed)
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)

    params = model.set_stage(stage)
    trainable, frozen = model.stage_parameter_names(stage)
    before = param_hashes(model, frozen)
    opt = torch.optim.Adam(params, lr=spec.learning_rate)

    cache = _SampleCache(data)
    ids = data.sample_ids
    batches = _batches(len(ids), spec.batch_size)
    total = spec.max_steps if spec.max_steps is not None else spec.epochs * len(batches)
    dtype = next(model.parameters()).dtype

    log_fh = open(log_path, "a") if log_path is not None else None
    losses = []
    step = 0
    model.train()
    try:
        while step < total:
            epoch = step // len(batches)
            for b in batches:
                if step >= total:
                    break
                loss = _stage_loss(model, stage, cache.batch([ids[i] for i in b], dtype))
                if not torch.isfinite(loss):
                    raise DivergedLoss(f"{stage} loss became {loss.item()} at step {step}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                value = float(loss.item())
                losses.append(value)
                if log_fh is not None:
                    rec = {"stage": stage, "epoch": epoch, "step": step, "loss": value, "lr": spec.learning_rate, "timestamp": time.time()}
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            log.info("%s epoch %d loss %.5f", stage, epoch, losses[-1])
    finally:
        if log_fh is not None:
            log_fh.close()
        model.requires_grad_(False)
        model.eval()
        torch.use_deterministic_algorithms(prev_det)

    after = param_hashes(model, frozen)
    drifted = sorted(n for n in before if before[n] != after[n])
    if drifted:
        raise FrozenParameterDrift(f"{len(drifted)} frozen parameters changed, e.g. {drifted[:3]}")

    history.append(
        {
            "stage": stage,
            "steps": step,
            "batch_size": spec.batch_size,
            "learning_rate": spec.learning_rate,
            "seed": spec.seed,
            "final_loss": losses[-1] if losses else math.nan,
            "losses": losses,
        }
    )
    model.stage_history = history
    ckpt = make_checkpoint(model)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
    return ckpt


@torch.no_grad()
def dataset_loss(model: SemanticCD, data: DatasetManifest, stage: str, batch_size: int = 8) -> float:
    """Mean stage loss over the whole dataset, weighting batches by size."""
    model.eval()
    cache = _SampleCache(data)
    dtype = next(model.parameters()).dtype
    total, n = 0.0, 0
    for b in _batches(len(data), batch_size):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AllPixelsIgnored)
            loss = _stage_loss(model, stage, cache.batch([data.sample_ids[i] for i in b], dtype))
        total += float(loss) * len(b)
        n += len(b)
    return total / n


@torch.no_grad()
def changed_pixel_accuracy(model: SemanticCD, data: DatasetManifest) -> float:
    """Fraction of changed pixels (both epochs) whose SCD argmax over classes 1.. matches."""
    model.eval()
    cache = _SampleCache(data)
    dtype = next(model.parameters()).dtype
    hit, total = 0, 0
    for sid in data.sample_ids:
        img1, img2, lb1, lb2, _ = cache.batch([sid], dtype)
        m1, m2, _, _ = model.forward_scd(img1, img2)
        for logits, gt in ((m1, lb1), (m2, lb2)):
            pred = logits[:, 1:].argmax(dim=1) + 1
            sel = gt != 0
            hit += int((pred[sel] == gt[sel]).sum())
            total += int(sel.sum())
    return hit / total if total else float("nan")
