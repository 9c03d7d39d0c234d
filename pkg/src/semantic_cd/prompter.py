"""Open-vocabulary prompter: meta tokens + shared context + class words -> cost volumes.

For each image the meta network maps pooled visual features to ``L`` soft
tokens, which are added to the shared learnable context. That context is
prepended to the embedded class-name words and run through a frozen text
encoder; the cosine similarity between every visual token and every class
embedding forms the cost volume.
"""

from __future__ import annotations

import re
import zlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PrompterConfig
from .encoder import Block, FeatureMap
from .errors import NonFiniteInput, SequenceTooLong, ShapeMismatch, WidthMismatch

PAD, SOT, EOT = 0, 1, 2

# words with dedicated embeddings; anything else is hashed into the remaining ids
KNOWN_WORDS = (
    "no", "change", "changed", "unchanged", "low", "high", "vegetation", "vegetated",
    "non", "ground", "surface", "tree", "trees", "water", "building", "buildings",
    "playground", "road", "bare", "soil", "farmland", "forest", "grass", "grassland",
    "river", "lake", "sea", "urban", "residential", "industrial", "parking", "lot",
    "field", "sand", "desert", "snow", "cloud", "shadow", "bridge", "railway",
    "a", "of", "the", "photo", "satellite", "image", "area", "land", "cover",
)


class WordTokenizer:
    """Lowercase whole-word tokenizer with hashed ids for unseen words."""

    def __init__(self, vocab_size: int = 100):
        n_known = min(len(KNOWN_WORDS), max(vocab_size - 3 - 8, 0))
        self.known = {w: 3 + i for i, w in enumerate(KNOWN_WORDS[:n_known])}
        self.first_bucket = 3 + n_known
        self.n_buckets = vocab_size - self.first_bucket
        if self.n_buckets < 1:
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size

    @staticmethod
    def words(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    def encode(self, text: str) -> list[int]:
        ids = []
        for w in self.words(text):
            if w in self.known:
                ids.append(self.known[w])
            else:
                ids.append(self.first_bucket + zlib.crc32(w.encode()) % self.n_buckets)
        return ids


class TextEncoder(nn.Module):
    """Causal transformer over token embeddings; reads out the end-token feature."""

    def __init__(self, cfg: PrompterConfig):
        super().__init__()
        W = cfg.text_width
        self.max_length = cfg.max_length
        self.token_embedding = nn.Embedding(cfg.token_vocab_size, W)
        self.positional_embedding = nn.Parameter(torch.randn(cfg.max_length, W) * 0.01)
        self.layers = nn.ModuleList(Block(W, cfg.text_heads) for _ in range(cfg.text_layers))
        self.ln_final = nn.LayerNorm(W)
        self.text_projection = nn.Parameter(torch.randn(W, W) / W**0.5)
        nn.init.normal_(self.token_embedding.weight, std=0.02)

    def forward(self, x: torch.Tensor, end_positions: torch.Tensor) -> torch.Tensor:
        """``x``: (S, T, W) embedded sequences; returns (S, W) unit-norm features."""
        S, T, W = x.shape
        if T > self.max_length:
            raise SequenceTooLong(f"sequence length {T} exceeds {self.max_length}")
        x = x + self.positional_embedding[:T].to(x.dtype)
        for layer in self.layers:
            x = layer(x, causal=True)
        x = self.ln_final(x)
        feat = x[torch.arange(S, device=x.device), end_positions] @ self.text_projection
        return F.normalize(feat, dim=-1)


def compute_meta_tokens(feat: FeatureMap | torch.Tensor, meta_net: nn.Module, context_length: int) -> torch.Tensor:
    """Pool tokens, run the meta MLP, reshape to (B, L, D_text)."""
    tokens = feat.tokens if isinstance(feat, FeatureMap) else feat
    if not torch.isfinite(tokens).all():
        raise NonFiniteInput("feature map contains non-finite values")
    out = meta_net(tokens.mean(dim=1))
    return out.reshape(tokens.shape[0], context_length, -1)


def build_context(meta_tokens: torch.Tensor, context_tokens: torch.Tensor) -> torch.Tensor:
    if meta_tokens.shape[-2:] != context_tokens.shape[-2:]:
        raise ShapeMismatch(f"meta tokens {tuple(meta_tokens.shape)} vs context {tuple(context_tokens.shape)}")
    return meta_tokens + context_tokens


def compute_cost_volume(feat: FeatureMap, text: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every visual token with every class embedding.

    ``text`` is (B, C, D) or (C, D). Returns (B, C, h', w') in [-1, 1]; zero
    visual tokens score 0 against every class.
    """
    tokens = feat.tokens
    if text.dim() == 2:
        text = text.unsqueeze(0).expand(tokens.shape[0], -1, -1)
    if tokens.shape[-1] != text.shape[-1]:
        raise WidthMismatch(f"visual width {tokens.shape[-1]} != text width {text.shape[-1]}")
    f = F.normalize(tokens, dim=-1)
    t = F.normalize(text, dim=-1)
    sim = torch.einsum("bnd,bcd->bcn", f, t).clamp(-1.0, 1.0)
    B, C, _ = sim.shape
    h, w = feat.grid
    return sim.reshape(B, C, h, w)


class OpenSemanticPrompter(nn.Module):
    def __init__(self, cfg: PrompterConfig, visual_dim: int, class_names):
        super().__init__()
        self.cfg = cfg
        L, Wt = cfg.context_length, cfg.text_width
        self.tokenizer = WordTokenizer(cfg.token_vocab_size)
        self.context = nn.Parameter(torch.randn(L, Wt) * 0.02)
        self.meta_net = nn.Sequential(nn.Linear(visual_dim, Wt), nn.ReLU(), nn.Linear(Wt, L * Wt))
        self.visual_proj = nn.Linear(visual_dim, Wt) if visual_dim != Wt else None
        self.text_encoder = TextEncoder(cfg)
        self.text_encoder.requires_grad_(False)
        self.set_vocabulary(class_names)

    def set_vocabulary(self, class_names) -> None:
        """Tokenize class names; any names work, which is what makes the vocabulary open."""
        ids = [self.tokenizer.encode(n) for n in class_names]
        if any(not i for i in ids):
            raise ValueError("every class name needs at least one word")
        longest = max(len(i) for i in ids)
        total = self.cfg.context_length + longest + 2
        if total > self.cfg.max_length:
            raise SequenceTooLong(
                f"context {self.cfg.context_length} + class tokens {longest} + 2 = {total} "
                f"exceeds {self.cfg.max_length}; reduce the context length by {total - self.cfg.max_length}"
            )
        # class words followed by the end token, right-padded
        seq = torch.full((len(ids), longest + 1), PAD, dtype=torch.long)
        for c, toks in enumerate(ids):
            seq[c, : len(toks)] = torch.tensor(toks)
            seq[c, len(toks)] = EOT
        self.class_names = list(class_names)
        self.register_buffer("class_tokens", seq, persistent=False)
        self.register_buffer("class_lengths", torch.tensor([len(i) for i in ids]), persistent=False)

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[0]

    def meta_tokens(self, feat: FeatureMap) -> torch.Tensor:
        return compute_meta_tokens(feat, self.meta_net, self.cfg.context_length)

    def encode_text(self, context: torch.Tensor) -> torch.Tensor:
        """(B, L, Wt) per-image contexts -> (B, C, Wt) unit-norm class embeddings."""
        B, L, Wt = context.shape
        C = self.num_classes
        emb = self.text_encoder.token_embedding
        sot = emb.weight[SOT].to(context.dtype).expand(B * C, 1, Wt)
        words = emb(self.class_tokens).to(context.dtype)  # C, K+1, Wt
        seq = torch.cat(
            [sot, context.repeat_interleave(C, dim=0), words.repeat(B, 1, 1)],
            dim=1,
        )
        end = (1 + L + self.class_lengths).repeat(B)
        return self.text_encoder(seq, end).reshape(B, C, Wt)

    def assemble_and_encode(self, context: torch.Tensor, class_index: int) -> torch.Tensor:
        """Embedding of a single class under one (L, Wt) context."""
        return self.encode_text(context.unsqueeze(0))[0, class_index]

    def text_embeddings(self, feat: FeatureMap) -> torch.Tensor:
        ctx = build_context(self.meta_tokens(feat), self.context)
        return self.encode_text(ctx)

    def project(self, feat: FeatureMap) -> FeatureMap:
        if self.visual_proj is None:
            return feat
        return FeatureMap(self.visual_proj(feat.tokens), feat.grid, feat.patch_size)

    def forward(self, f1: FeatureMap, f2: FeatureMap):
        out = []
        for feat in (f1, f2):
            out.append(compute_cost_volume(self.project(feat), self.text_embeddings(feat)))
        return tuple(out)
