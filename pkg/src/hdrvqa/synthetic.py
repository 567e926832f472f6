"""Desk-scale stand-ins: a synthetic ladder-distorted frame corpus and a linear distortion probe.

Each synthetic content is a procedurally generated RGB frame. Every ladder
rung is simulated by shrinking the frame in proportion to the rung
resolution, quantising 8x8 block DCT coefficients with a step that grows as
bits-per-pixel fall, and scaling back up to the original size. This keeps
the two ingredients of the real ladder (resolution loss and rate-driven
coding loss) at a size a CPU can train on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import GroupKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from hdrvqa.ladder import FULL_RES, LadderRung, default_ladder
from hdrvqa.media import resize_plane

BLOCK = 8


def random_content(size: int, rng: np.random.Generator) -> np.ndarray:
    """An (size, size, 3) frame with smooth shading, hard-edged shapes and texture."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.6, 3)
    grad = rng.normal(0, 0.15, (2, 3))
    img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.normal(0, 0.2, 3)
    for _ in range(rng.integers(1, 5)):
        y0, x0 = rng.integers(0, size - 4, 2)
        h, w = rng.integers(4, size // 2, 2)
        img[y0:y0 + h, x0:x0 + w] += rng.normal(0, 0.2, 3)
    texture = gaussian_filter(rng.normal(0, 1, (size, size)), rng.uniform(0.5, 2.0))
    img += (texture / (texture.std() + 1e-9))[..., None] * rng.uniform(0.01, 0.08)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _block_quantise(plane: np.ndarray, step: float) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    blocks = padded.reshape(padded.shape[0] // BLOCK, BLOCK, padded.shape[1] // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(padded.shape)
    return rec[:h, :w]


def quant_step(rung: LadderRung, base_step: float = 0.06) -> float:
    """Quantiser step for a rung; inversely proportional to sqrt(bits per pixel) relative to 4K at 15 Mbps."""
    full_w, full_h = FULL_RES
    bpp = (rung.bitrate / 15.0) * (full_w * full_h) / (rung.width * rung.height)
    return base_step / np.sqrt(bpp)


def distort(img: np.ndarray, rung: LadderRung, base_step: float = 0.06) -> np.ndarray:
    """Simulated ladder encode: shrink, block-quantise, enlarge back to the input size."""
    size = img.shape[0]
    full_w, full_h = FULL_RES
    small = max(BLOCK, int(round(size * rung.height / full_h)))
    step = quant_step(rung, base_step)
    out = np.empty_like(img, dtype=np.float64)
    for c in range(3):
        p = resize_plane(img[..., c], (small, small)) if small != size else img[..., c].astype(np.float64)
        p = _block_quantise(p, step)
        out[..., c] = resize_plane(p, (size, size)) if small != size else p
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class ToyCorpus:
    frames: np.ndarray      # (N, size, size, 3)
    classes: np.ndarray     # distortion class 0..9
    contents: np.ndarray    # source content id


def make_corpus(n_contents: int = 50, size: int = 64, seed: int = 0,
                rungs: list[LadderRung] | None = None, base_step: float = 0.06) -> ToyCorpus:
    """n_contents x (1 + len(rungs)) frames; class 0 is the pristine frame."""
    rungs = rungs or default_ladder()
    rng = np.random.default_rng(seed)
    frames, classes, contents = [], [], []
    for c in range(n_contents):
        img = random_content(size, rng)
        frames.append(img)
        classes.append(0)
        contents.append(c)
        for k, rung in enumerate(rungs, start=1):
            frames.append(distort(img, rung, base_step))
            classes.append(k)
            contents.append(c)
    return ToyCorpus(np.stack(frames), np.array(classes), np.array(contents))


def probe_accuracy(features: np.ndarray, classes: np.ndarray, contents: np.ndarray,
                   folds: int = 5, C: float = 1.0) -> float:
    """Content-disjoint cross-validated accuracy of a linear classifier on frozen features."""
    accs = []
    for train, test in GroupKFold(n_splits=folds).split(features, classes, contents):
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=5000))
        clf.fit(features[train], classes[train])
        accs.append(float(np.mean(clf.predict(features[test]) == classes[test])))
    return float(np.mean(accs))


# desk-scale fine-tuning recipe; see the README for why it differs from the full-scale defaults
TOY_BASE_STEP = 0.15


def toy_train_config(epochs: int, seed: int = 0, **overrides):
    from hdrvqa.contrastive.train import TrainConfig

    params = dict(batch_size=20, crop_size=64, patch_size=None, epochs=epochs,
                  warmup_epochs=1 if epochs > 1 else 0, base_lr=0.02, half_scale_prob=0.0,
                  batch_grouping="source", seed=seed)
    params.update(overrides)
    return TrainConfig(**params)


def toy_probe(corpus: ToyCorpus, epochs: int, seed: int = 0, model=None, **overrides) -> tuple[float, list[dict]]:
    """Fine-tune a toy encoder for ``epochs`` on ``corpus``, then probe its frozen features.

    ``model`` defaults to a randomly initialised toy-cnn seeded by ``seed``.
    Returns the probe accuracy and the per-epoch training log.
    """
    from hdrvqa.contrastive import ModelConfig, finetune, init_model
    from hdrvqa.features import extract_batch

    if model is None:
        model = init_model(ModelConfig("toy-cnn"), seed=seed)
    history: list[dict] = []
    if epochs > 0:
        size = corpus.frames.shape[1]
        cfg = toy_train_config(epochs, seed, crop_size=size, **overrides)
        model, history = finetune(list(corpus.frames), model, cfg, groups=corpus.contents)
    feats = extract_batch(list(corpus.frames), model)
    return probe_accuracy(feats, corpus.classes, corpus.contents), history
