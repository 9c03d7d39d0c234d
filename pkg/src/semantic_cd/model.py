"""The full Semantic-CD network and its per-stage parameter groups."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .decoders import BCDDecoder, SCDDecoder, combine_predictions
from .encoder import BiTemporalEncoder, FeatureMap
from .prompter import OpenSemanticPrompter

# name prefixes of each component inside SemanticCD
GROUPS = {
    "adapters": ("encoder.adapters.",),
    "backbone": ("encoder.backbone.",),
    "bcd_decoder": ("bcd_decoder.",),
    "text_encoder": ("prompter.text_encoder.",),
    "prompter": ("prompter.",),
    "scd_decoder": ("scd_decoder.",),
}
STAGE_TRAINABLE = {
    "bcd": ("adapters", "bcd_decoder"),
    "scd": ("prompter", "scd_decoder"),
}


def group_of(name: str) -> str:
    # text_encoder is checked before its parent prefix
    for group in ("adapters", "backbone", "bcd_decoder", "text_encoder", "prompter", "scd_decoder"):
        if name.startswith(GROUPS[group]):
            return group
    raise KeyError(name)


@dataclass
class Prediction:
    bcd_logits: torch.Tensor  # B, H, W
    scd1: torch.Tensor  # B, C, H, W
    scd2: torch.Tensor
    cost1: torch.Tensor | None = None  # B, C, h', w'
    cost2: torch.Tensor | None = None

    def labels(self, threshold: float = 0.5):
        return combine_predictions(self.bcd_logits, self.scd1, self.scd2, threshold)


class SemanticCD(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc, dec = cfg.encoder, cfg.decoder
        C = len(cfg.vocabulary)
        self.encoder = BiTemporalEncoder(enc)
        self.prompter = OpenSemanticPrompter(cfg.prompter, enc.dim, cfg.vocabulary)
        self.bcd_decoder = BCDDecoder(enc.dim, dec.pyramid_width, enc.patch_size, dec.strides)
        self.scd_decoder = SCDDecoder(enc.dim, C, dec.pyramid_width, enc.patch_size, dec.strides)
        self.requires_grad_(False)

    @property
    def num_classes(self) -> int:
        return len(self.cfg.vocabulary)

    def encode(self, img1, img2) -> tuple[FeatureMap, FeatureMap]:
        return self.encoder(img1, img2)

    def forward_bcd(self, img1, img2, feats=None) -> torch.Tensor:
        f1, f2 = feats if feats is not None else self.encode(img1, img2)
        return self.bcd_decoder(f1, f2, tuple(img1.shape[-2:]))

    def cost_volumes(self, f1: FeatureMap, f2: FeatureMap):
        if self.cfg.use_prompter:
            return self.prompter(f1, f2)
        B = f1.tokens.shape[0]
        zero = f1.tokens.new_zeros(B, self.num_classes, *f1.grid)
        return zero, zero

    def forward_scd(self, img1, img2, feats=None):
        f1, f2 = feats if feats is not None else self.encode(img1, img2)
        cv1, cv2 = self.cost_volumes(f1, f2)
        size = tuple(img1.shape[-2:])
        return self.scd_decoder(f1, cv1, size), self.scd_decoder(f2, cv2, size), cv1, cv2

    def forward(self, img1, img2) -> Prediction:
        feats = self.encode(img1, img2)
        bcd = self.forward_bcd(img1, img2, feats)
        m1, m2, cv1, cv2 = self.forward_scd(img1, img2, feats)
        return Prediction(bcd, m1, m2, cv1, cv2)

    @torch.no_grad()
    def predict(self, img1, img2, threshold: float = 0.5):
        pred = self(img1, img2)
        return pred, pred.labels(threshold)

    def parameter_groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name, _ in self.named_parameters():
            out[group_of(name)].append(name)
        return out

    def stage_parameter_names(self, stage: str) -> tuple[set[str], set[str]]:
        """(trainable, frozen) parameter names for a training stage."""
        groups = self.parameter_groups()
        trainable = {n for g in STAGE_TRAINABLE[stage] for n in groups[g]}
        frozen = {n for n, _ in self.named_parameters()} - trainable
        return trainable, frozen

    def set_stage(self, stage: str) -> list[nn.Parameter]:
        trainable, _ = self.stage_parameter_names(stage)
        params = []
        for name, p in self.named_parameters():
            p.requires_grad_(name in trainable)
            if name in trainable:
                params.append(p)
        return params


def build_model(cfg: ModelConfig) -> SemanticCD:
    """Construct with seeded initialisation, then load any configured pretrained weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.init_seed)
        model = SemanticCD(cfg)
    if cfg.encoder.pretrained_checkpoint:
        model.encoder.load_pretrained(cfg.encoder.pretrained_checkpoint)
    if cfg.prompter.pretrained_text_checkpoint:
        _load_text_encoder(model, cfg.prompter.pretrained_text_checkpoint)
    return model


def _load_text_encoder(model: SemanticCD, path) -> None:
    from .checkpoint import read_checkpoint
    from .errors import CheckpointMismatch

    params, _ = read_checkpoint(path)
    prefix = "prompter.text_encoder."
    state = {k[len(prefix):] if k.startswith(prefix) else k: v for k, v in params.items()}
    own = model.prompter.text_encoder.state_dict()
    if set(state) != set(own) or any(state[k].shape != own[k].shape for k in own):
        raise CheckpointMismatch(f"{path}: text encoder weights do not match the configuration")
    model.prompter.text_encoder.load_state_dict(state)
