"""Configuration dataclasses, presets and JSON (de)serialization."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import SECOND_CLASSES


@dataclass
class EncoderConfig:
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    adapter_sites: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    image_size: int = 64  # grid size of the stored positional embedding
    pretrained_checkpoint: Optional[str] = None
    scale: str = "toy"

    def __post_init__(self):
        if self.scale not in ("toy", "full"):
            raise ValueError(f"scale must be toy or full, got {self.scale!r}")
        sites = list(self.adapter_sites)
        if len(set(sites)) != len(sites) or any(not 0 <= s < self.depth for s in sites):
            raise ValueError(f"adapter_sites {sites} must be distinct indices in [0, {self.depth})")
        if self.scale == "full" and len(sites) != 4:
            raise ValueError("full scale uses exactly four adapter sites")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        self.adapter_sites = sites


@dataclass
class PrompterConfig:
    context_length: int = 256
    text_width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_length: int = 512
    # word-level vocabulary size of the toy tokenizer (known words + hash buckets)
    token_vocab_size: int = 100
    pretrained_text_checkpoint: Optional[str] = None


@dataclass
class DecoderConfig:
    pyramid_width: int = 64
    strides: list[int] = field(default_factory=lambda: [4, 8, 16, 32])


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompter: PrompterConfig = field(default_factory=PrompterConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vocabulary: list[str] = field(default_factory=lambda: list(SECOND_CLASSES))
    # False reproduces the no-prompter baseline: the SCD decoder sees a zero cost volume
    use_prompter: bool = True
    init_seed: int = 0

    def fingerprint(self) -> str:
        """Hash of everything that determines parameter names and shapes."""
        d = to_dict(self)
        d["encoder"].pop("pretrained_checkpoint", None)
        d["prompter"].pop("pretrained_text_checkpoint", None)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StageSpec:
    stage: str = "bcd"
    epochs: int = 1
    batch_size: int = 1
    learning_rate: float = 1e-3
    seed: int = 0
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.stage = self.stage.lower()
        if self.stage not in ("bcd", "scd"):
            raise ValueError(f"stage must be bcd or scd, got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class RunConfig:
    scale: str = "toy"
    model: ModelConfig = field(default_factory=ModelConfig)
    bcd: StageSpec = field(default_factory=lambda: StageSpec("bcd"))
    scd: StageSpec = field(default_factory=lambda: StageSpec("scd"))
    data_root: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    output_dir: Optional[str] = None
    vocabulary_path: Optional[str] = None
    seed: int = 0


def toy_config() -> RunConfig:
    return RunConfig(
        scale="toy",
        model=ModelConfig(),
        bcd=StageSpec("bcd", epochs=25, batch_size=1, learning_rate=1e-3, seed=7, max_steps=200),
        scd=StageSpec("scd", epochs=38, batch_size=1, learning_rate=1e-3, seed=7, max_steps=300),
        seed=7,
    )


def full_config() -> RunConfig:
    """ViT-L scale with the published schedule: batch 1, 300 BCD and 5 SCD epochs."""
    return RunConfig(
        scale="full",
        model=ModelConfig(
            encoder=EncoderConfig(
                patch_size=16,
                depth=24,
                dim=1024,
                heads=16,
                adapter_sites=[5, 11, 17, 23],
                image_size=512,
                scale="full",
            ),
            prompter=PrompterConfig(
                context_length=16,
                text_width=768,
                text_layers=12,
                text_heads=12,
                max_length=77,
                token_vocab_size=49408,
            ),
            decoder=DecoderConfig(pyramid_width=512),
        ),
        bcd=StageSpec("bcd", epochs=300, batch_size=1, learning_rate=1e-4, seed=0),
        scd=StageSpec("scd", epochs=5, batch_size=1, learning_rate=1e-4, seed=0),
        seed=0,
    )


PRESETS = {"toy": toy_config, "full": full_config, "full-second": full_config}


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _build(cls, data: dict[str, Any]):
    if not isinstance(data, dict):
        raise TypeError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise KeyError(f"unknown {cls.__name__} field {key!r}")
        sub = _NESTED.get((cls.__name__, key))
        kwargs[key] = _build(sub, value) if sub is not None else value
    return cls(**kwargs)


_NESTED = {
    ("RunConfig", "model"): ModelConfig,
    ("RunConfig", "bcd"): StageSpec,
    ("RunConfig", "scd"): StageSpec,
    ("ModelConfig", "encoder"): EncoderConfig,
    ("ModelConfig", "prompter"): PrompterConfig,
    ("ModelConfig", "decoder"): DecoderConfig,
}


def model_config_from_dict(d: dict) -> ModelConfig:
    return _build(ModelConfig, d)


def run_config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d)


def load_run_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Load a JSON run config (or a preset name) and apply ``key.sub=value`` overrides."""
    if path is None:
        d = to_dict(toy_config())
    elif str(path) in PRESETS:
        d = to_dict(PRESETS[str(path)]())
    else:
        d = json.loads(Path(path).read_text())
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return run_config_from_dict(d)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2) + "\n")
