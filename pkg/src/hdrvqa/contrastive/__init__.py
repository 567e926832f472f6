from hdrvqa.contrastive.losses import (
    LabeledBatch,
    cosine_similarity,
    ntxent_loss,
    ntxent_pairwise,
    ntxent_syn,
    total_loss,
    total_loss_and_grad,
)
from hdrvqa.contrastive.models import ContrastiveModel, ModelConfig, init_model, load_checkpoint, save_checkpoint
from hdrvqa.contrastive.schedule import lr_at
from hdrvqa.contrastive.train import TrainConfig, finetune
from hdrvqa.contrastive.views import build_views, patchify

__all__ = [
    "LabeledBatch", "cosine_similarity", "ntxent_loss", "ntxent_pairwise", "ntxent_syn",
    "total_loss", "total_loss_and_grad", "ContrastiveModel", "ModelConfig", "init_model",
    "load_checkpoint", "save_checkpoint", "lr_at", "TrainConfig", "finetune", "build_views", "patchify",
]
