"""Encoder / projector networks and the checkpoint container."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torchvision

from hdrvqa.errors import CheckpointError, CheckpointNotFound

CHECKPOINT_FORMAT = 1

ENCODER_DIMS = {"resnet50": 2048, "toy-cnn": 128}


@dataclass
class ModelConfig:
    encoder_kind: str = "resnet50"
    projector_dim: int = 128
    weights_init: str = "random"  # or "sdr-pretrained-checkpoint"
    init_path: str | None = None

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_DIMS:
            raise ValueError(f"unknown encoder {self.encoder_kind!r}; choose from {sorted(ENCODER_DIMS)}")
        if self.weights_init not in ("random", "sdr-pretrained-checkpoint"):
            raise ValueError(f"unknown weights_init {self.weights_init!r}")
        if self.weights_init == "sdr-pretrained-checkpoint" and not self.init_path:
            raise ValueError("sdr-pretrained-checkpoint needs init_path")
        if self.projector_dim <= 0:
            raise ValueError("projector_dim must be positive")

    @property
    def encoder_dim(self) -> int:
        return ENCODER_DIMS[self.encoder_kind]


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        y = torch.relu(self.bn1(self.conv1(x)))
        return torch.relu(self.bn2(self.conv2(y)) + self.skip(x))


class ToyCNN(nn.Module):
    """Small residual stack ending in adaptive average pooling; 128-d output."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.layers = nn.Sequential(
            _Block(width, width, 1),
            _Block(width, 2 * width, 2),
            _Block(2 * width, 4 * width, 2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return torch.flatten(self.pool(self.layers(self.stem(x))), 1)


def _resnet50() -> nn.Module:
    net = torchvision.models.resnet50(weights=None)
    net.fc = nn.Identity()  # torchvision's resnet already ends in AdaptiveAvgPool2d(1)
    return net


def build_encoder(kind: str) -> nn.Module:
    if kind == "toy-cnn":
        return ToyCNN()
    if kind == "resnet50":
        return _resnet50()
    raise ValueError(f"unknown encoder {kind!r}")


class ContrastiveModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.encoder_dim
        self.encoder = build_encoder(config.encoder_kind)
        self.projector = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, config.projector_dim))

    def embed(self, x: torch.Tensor, patch_size: int | None = None) -> torch.Tensor:
        """Encoder output h for a batch of views; with patches, the mean over each view's patches."""
        if patch_size is None:
            return self.encoder(x)
        b = x.shape[0]
        patches = patchify_tensor(x, patch_size)
        h = self.encoder(patches)
        return h.view(b, -1, h.shape[1]).mean(dim=1)

    def forward(self, x: torch.Tensor, patch_size: int | None = None):
        h = self.embed(x, patch_size)
        return h, self.projector(h)


def patchify_tensor(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B * P, C, p, p), patches in row-major order per view."""
    b, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"view {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    t = x.unfold(2, patch_size, patch_size).unfold(3, patch_size, patch_size)
    return t.permute(0, 2, 3, 1, 4, 5).reshape(-1, c, patch_size, patch_size)


# ---------------------------------------------------------------------------
# checkpoints


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path: str | os.PathLike, model: ContrastiveModel, train_config=None,
                    manifest_hash: str | None = None, epoch: int | None = None) -> str:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": dataclasses.asdict(model.config),
        "train_config": dataclasses.asdict(train_config) if train_config is not None else None,
        "manifest_hash": manifest_hash,
        "epoch": epoch,
        "encoder": model.encoder.state_dict(),
        "projector": model.projector.state_dict(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return file_hash(path)


def _read(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFound(f"checkpoint not found: {path}")
    try:
        return torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


_PREFIXES = ("module.", "encoder.", "backbone.", "model.")


def _strip(state: dict) -> dict:
    out = {}
    for key, value in state.items():
        changed = True
        while changed:
            changed = False
            for p in _PREFIXES:
                if key.startswith(p):
                    key, changed = key[len(p):], True
        out[key] = value
    return out


def load_checkpoint(path: str | os.PathLike) -> tuple[ContrastiveModel, dict]:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    payload = _read(path)
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a format-{CHECKPOINT_FORMAT} checkpoint")
    model = ContrastiveModel(ModelConfig(**payload["model_config"]))
    try:
        model.encoder.load_state_dict(payload["encoder"])
        model.projector.load_state_dict(payload["projector"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the recorded model config: {exc}") from exc
    meta = {k: v for k, v in payload.items() if k not in ("encoder", "projector")}
    meta["hash"] = file_hash(path)
    return model, meta


def init_model(config: ModelConfig, seed: int = 0) -> ContrastiveModel:
    """Fresh model; encoder weights come from ``config.init_path`` when pretrained init is requested.

    The init file may be one of our checkpoints or a bare encoder state dict
    (common wrapper prefixes such as ``module.`` are stripped).
    """
    torch.manual_seed(seed)
    model = ContrastiveModel(config)
    if config.weights_init == "random":
        return model
    payload = _read(config.init_path)
    if isinstance(payload, dict) and payload.get("format_version") == CHECKPOINT_FORMAT:
        if payload["model_config"]["encoder_kind"] != config.encoder_kind:
            raise CheckpointError(
                f"{config.init_path} holds a {payload['model_config']['encoder_kind']} encoder, "
                f"expected {config.encoder_kind}")
        state = payload["encoder"]
        proj = payload.get("projector")
    else:
        state = payload.get("state_dict", payload) if isinstance(payload, dict) else None
        proj = None
        if not isinstance(state, dict):
            raise CheckpointError(f"{config.init_path}: unrecognised checkpoint layout")
        state = _strip({k: v for k, v in state.items() if not k.startswith(("projector.", "fc."))})
    try:
        model.encoder.load_state_dict(state)
        if proj is not None and payload["model_config"]["projector_dim"] == config.projector_dim:
            model.projector.load_state_dict(proj)
    except RuntimeError as exc:
        raise CheckpointError(f"{config.init_path} is incompatible with {config.encoder_kind}: {exc}") from exc
    return model
