"""HDR video quality features learned by contrastive fine-tuning, with an SVR quality head."""

__version__ = "0.1.0"
