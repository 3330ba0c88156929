"""Full re-ID networks: CNN + transformer with object queries, and the
global-average-pooling CNN baseline used for ablations."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from .backbone import Backbone, BackboneConfig
from .diffcore import Tensor
from .errors import ConfigError
from .nn import Linear, Module
from .transformer import DisentangledTransformer, FeatureBundle, TransformerConfig

MODEL_KINDS = ("transformer", "pooling")


@dataclass
class ModelConfig:
    kind: str = "transformer"
    height: int = 256
    width: int = 128
    channels: tuple[int, ...] = (32, 64, 128, 512)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    convs_per_stage: int = 1
    dim: int = 256
    heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 9
    ffn_mult: int = 4
    dropout: float = 0.1
    num_classes: int = 2
    pixel_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model: kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"model: num_classes={self.num_classes} < 2")
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)
        self.backbone_config()
        if self.kind == "transformer":
            self.transformer_config()

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.channels, self.strides, self.convs_per_stage,
                              self.height, self.width, self.dim)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(self.dim, self.heads, self.enc_layers, self.dec_layers,
                                 self.num_queries, self.ffn_mult, self.dropout)

    @property
    def feature_dim(self) -> int:
        if self.kind == "transformer":
            return (self.num_queries - 1) * self.dim
        return self.channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("channels", "strides", "pixel_mean", "pixel_std"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


@dataclass
class ModelOutput:
    f: Tensor  # ID-relevant feature used for retrieval
    fbar: Tensor | None  # ID-irrelevant feature (transformer only)
    logits: Tensor
    bundle: FeatureBundle | None


class ReIDModel(Module):
    """Backbone -> transformer -> (f, fbar); linear identity classifier on f."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 31])
        self.backbone = Backbone(config.backbone_config(), rng)
        h, w = config.backbone_config().feature_size
        self.transformer = DisentangledTransformer(config.transformer_config(), h * w, rng)
        self.classifier = Linear(config.feature_dim, config.num_classes, rng, bias=False)

    @property
    def queries(self) -> Tensor:
        return self.transformer.queries

    def __call__(self, images, rng: np.random.Generator | None = None) -> ModelOutput:
        fm = self.backbone.extract(images)
        bundle = self.transformer(fm.g, rng, fm.height, fm.width)
        return ModelOutput(bundle.f, bundle.fbar, self.classifier(bundle.f), bundle)


class PoolingBaseline(Module):
    """Backbone -> relu -> global average pooling -> classifier."""

    queries = None

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 31])
        self.backbone = Backbone(config.backbone_config(), rng)
        self.classifier = Linear(config.feature_dim, config.num_classes, rng, bias=False)

    def __call__(self, images, rng: np.random.Generator | None = None) -> ModelOutput:
        a = dc.relu(self.backbone.trunk(images))
        f = dc.mean(a, axis=(2, 3))
        return ModelOutput(f, None, self.classifier(f), None)

    def named_parameters(self, prefix: str = ""):
        # the 1x1 token reducer is unused without a transformer
        for name, p in super().named_parameters(prefix):
            if not name.startswith(f"{prefix}backbone.reduce."):
                yield name, p


def build_model(config: ModelConfig, seed: int = 0) -> ReIDModel | PoolingBaseline:
    return ReIDModel(config, seed) if config.kind == "transformer" else PoolingBaseline(config, seed)
