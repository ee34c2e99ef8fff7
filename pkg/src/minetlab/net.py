"""Full saliency network: encoder pyramid -> per-level interaction laterals
-> top-down decoder with self-interaction and fusion units -> sigmoid head.

The decoder recursion per level i (deepest first):

    add[4] = lateral[4]
    sim[i] = self_interaction(add[i])          (identity when disabled)
    d[i]   = fusion[i](sim[i])
    add[i-1] = lateral[i-1] + upsample2(d[i])
    prediction = clamp(sigmoid(head(d[0])))

Laterals are aggregate interaction modules, or plain 1x1 convolutions for
the baseline configuration, both reducing to 32 channels at the shallowest
level and 64 elsewhere.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, build_backbone, extract
from .errors import CheckpointError, ConfigError
from .modules import AggregateInteraction, FusionUnit, SelfInteraction

CHECKPOINT_FORMAT = "MINETLAB1"


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    shallow_channels: int = 32
    deep_channels: int = 64
    use_aim: bool = True
    use_sim: bool = True
    decoder_upsample: str = "bilinear"
    head_kernel: int = 3
    prediction_clamp: float = 1e-7
    bn_momentum: float = 0.1
    head_bias_prior: float = 0.2  # initial foreground probability of the head

    def __post_init__(self):
        if self.shallow_channels < 2 or self.deep_channels < 2:
            raise ConfigError("channel widths must be >= 2")
        if self.decoder_upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"unsupported decoder upsample {self.decoder_upsample!r}")
        if not 0.0 < self.prediction_clamp < 0.5:
            raise ConfigError("prediction_clamp must lie in (0, 0.5)")
        if not 0.0 < self.head_bias_prior < 1.0:
            raise ConfigError("head_bias_prior must lie in (0, 1)")

    @property
    def decoder_channels(self) -> tuple:
        return (self.shallow_channels,) + (self.deep_channels,) * 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(payload: dict) -> "ModelConfig":
        payload = dict(payload)
        backbone = payload.pop("backbone", {})
        if isinstance(backbone, dict):
            backbone = {
                key: tuple(value) if isinstance(value, list) else value
                for key, value in backbone.items()
            }
            backbone = BackboneConfig(**backbone)
        return ModelConfig(backbone=backbone, **payload)


@dataclass
class DecoderState:
    """All per-level intermediates: lateral outputs, decoder inputs, block outputs."""

    aim: tuple
    add: tuple
    sim: tuple


class MINet(nn.Module):
    """Multi-scale interactive saliency network with ablation switches."""

    def __init__(self, config: ModelConfig = ModelConfig(), external_backbone=None):
        super().__init__()
        self.config = config
        self.backbone = build_backbone(config.backbone, external=external_backbone)
        enc = config.backbone.channels
        dec = config.decoder_channels
        bn = config.bn_momentum

        laterals = []
        for i in range(5):
            if config.use_aim:
                laterals.append(
                    AggregateInteraction(
                        curr_channels=enc[i],
                        out_channels=dec[i],
                        higher_res_channels=enc[i - 1] if i > 0 else None,
                        lower_res_channels=enc[i + 1] if i < 4 else None,
                        bn_momentum=bn,
                    )
                )
            else:
                laterals.append(nn.Conv2d(enc[i], dec[i], kernel_size=1))
        self.laterals = nn.ModuleList(laterals)

        if config.use_sim:
            self.sims = nn.ModuleList([SelfInteraction(dec[i], bn_momentum=bn) for i in range(5)])
        else:
            self.sims = nn.ModuleList([nn.Identity() for _ in range(5)])

        # fusion[i] maps level i to the width expected one level shallower;
        # fusion[0] keeps the shallow width for the head
        self.fusions = nn.ModuleList(
            [FusionUnit(dec[i], dec[max(i - 1, 0)], bn_momentum=bn) for i in range(5)]
        )
        self.head = nn.Conv2d(dec[0], 1, config.head_kernel, padding=config.head_kernel // 2)
        prior = config.head_bias_prior
        nn.init.constant_(self.head.bias, float(torch.log(torch.tensor(prior / (1.0 - prior)))))

    def _upsample(self, x):
        if self.config.decoder_upsample == "nearest":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def _run(self, images):
        pyramid = extract(images, self.backbone)
        aims = []
        for i in range(5):
            if self.config.use_aim:
                aims.append(
                    self.laterals[i](
                        pyramid.levels[i],
                        higher_res=pyramid.levels[i - 1] if i > 0 else None,
                        lower_res=pyramid.levels[i + 1] if i < 4 else None,
                    )
                )
            else:
                aims.append(self.laterals[i](pyramid.levels[i]))

        adds = [None] * 5
        sims = [None] * 5
        adds[4] = aims[4]
        carry = None
        for i in range(4, -1, -1):
            if adds[i] is None:
                adds[i] = aims[i] + carry
            sims[i] = self.sims[i](adds[i])
            decoded = self.fusions[i](sims[i])
            if i > 0:
                carry = self._upsample(decoded)
        eps = self.config.prediction_clamp
        prediction = torch.sigmoid(self.head(decoded)).clamp(eps, 1.0 - eps)
        return prediction, DecoderState(aim=tuple(aims), add=tuple(adds), sim=tuple(sims))

    def forward(self, images) -> torch.Tensor:
        prediction, _ = self._run(images)
        return prediction

    def forward_with_state(self, images):
        return self._run(images)


def build_model(config: ModelConfig = ModelConfig(), external_backbone=None) -> MINet:
    return MINet(config, external_backbone=external_backbone)


def build_baseline(config: ModelConfig = ModelConfig()) -> MINet:
    """Lateral-convolution decoder without interaction blocks, same I/O contract."""
    return MINet(dataclasses.replace(config, use_aim=False, use_sim=False))


def build_variant(config: ModelConfig, use_aim: bool, use_sim: bool) -> MINet:
    return MINet(dataclasses.replace(config, use_aim=use_aim, use_sim=use_sim))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: MINet, train_state: dict = None) -> None:
    """Single-archive checkpoint: format tag, model config, weights, trainer state."""
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "model_config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "train_state": train_state,
        },
        path,
    )


def load_checkpoint(path, expected_config: ModelConfig = None, external_backbone=None):
    """Rebuild the model from a checkpoint; returns (model, train_state)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path} is not a {CHECKPOINT_FORMAT} checkpoint "
            f"(format tag: {payload.get('format') if isinstance(payload, dict) else None!r})"
        )
    config = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None:
        ensure_config_matches(expected_config, config)
    model = MINet(config, external_backbone=external_backbone)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("train_state")


def ensure_config_matches(expected: ModelConfig, stored: ModelConfig) -> None:
    """Field-by-field comparison; raises CheckpointError listing every difference."""
    diffs = _diff_dicts(expected.to_dict(), stored.to_dict(), prefix="")
    if diffs:
        raise CheckpointError("checkpoint config mismatch: " + "; ".join(diffs))


def _diff_dicts(a: dict, b: dict, prefix: str) -> list:
    diffs = []
    for key in sorted(set(a) | set(b)):
        path = f"{prefix}{key}"
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs.extend(_diff_dicts(va, vb, prefix=f"{path}."))
        elif _norm(va) != _norm(vb):
            diffs.append(f"{path}: expected {va!r}, stored {vb!r}")
    return diffs


def _norm(value):
    return list(value) if isinstance(value, (tuple, list)) else value
