"""Experiment configuration: one JSON document with model/loss/train/ssl/gan sections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .augment import AugmentationPipeline, build_default_pipeline
from .decoder import DecoderConfig, HybridSegmenter
from .encoder import MitConfig
from .gan import GanLossWeights
from .losses import LossConfig
from .ssl import SslConfig
from .trainer import TrainConfig, config_hash

ENCODER_PRESETS = {"b3": MitConfig.b3, "tiny": MitConfig.tiny}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"root": "data", "side": 256})
    encoder: MitConfig = field(default_factory=MitConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    gan: GanLossWeights = field(default_factory=GanLossWeights)
    augmentation: Optional[AugmentationPipeline] = None
    pretrained: Optional[str] = None
    seed: int = 0

    def pipeline(self) -> AugmentationPipeline:
        return self.augmentation or build_default_pipeline()

    def build_model(self) -> HybridSegmenter:
        return HybridSegmenter(self.encoder, self.decoder)

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "model": {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                      "pretrained": self.pretrained},
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            "ssl": self.ssl.to_dict(),
            "gan": self.gan.to_dict(),
            "augmentation": self.pipeline().to_dict(),
            "seed": self.seed,
        }

    def model_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        model = d.get("model", {})
        enc = model.get("encoder", "b3")
        if isinstance(enc, str):
            encoder = ENCODER_PRESETS[enc]()
        elif "preset" in enc:
            base = ENCODER_PRESETS[enc["preset"]]().to_dict()
            encoder = MitConfig.from_dict({**base, **{k: v for k, v in enc.items() if k != "preset"}})
        else:
            encoder = MitConfig.from_dict(enc)
        aug = d.get("augmentation")
        return cls(
            dataset={"root": "data", "side": 256, **d.get("dataset", {})},
            encoder=encoder,
            decoder=DecoderConfig.from_dict(model.get("decoder", {})),
            loss=LossConfig.from_dict(d.get("loss", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            ssl=SslConfig.from_dict(d.get("ssl", {})),
            gan=GanLossWeights.from_dict(d.get("gan", {})),
            augmentation=AugmentationPipeline.from_dict(aug) if aug else None,
            pretrained=model.get("pretrained"),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        return cls.from_dict(apply_overrides(d, overrides))


def apply_overrides(d: dict, overrides) -> dict:
    """Apply `section.key=value` strings; values parse as JSON, else stay strings."""
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        keys = path.split(".")
        if keys[0] in ("encoder", "decoder", "pretrained"):
            keys = ["model"] + keys
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if isinstance(node, str):
                raise ValueError(f"cannot override inside preset string at {path!r}")
        node[keys[-1]] = value
    return d
