"""Training loop: fit the guided upsampler to (image, lr, hr) pairs.

The recipe is AdamW on smooth-L1 loss with flip/rotation augmentation
applied jointly to image, features, and target. A held-out slice of the
pairs drives early stopping; the best-validation weights are what gets
exported. A non-finite training loss aborts the run and falls back to the
last good weights.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import TrainingPair, prepare_image, load_image, read_pair_set
from .formats import FeatureGrid
from .model import ArchitectureSpec, GuidedUpsampler, save_archive

log = logging.getLogger(__name__)


@dataclass
class TrainRunConfig:
    """Hyperparameters; defaults are the published recipe, shrink for desk scale."""

    d_in: int | None = None   # None: take k from the pairs
    d_out: int | None = None
    d_hidden: int = 64
    d_down: int = 32
    kernel_size: int = 3
    num_stages: int = 4
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 5000
    patience: int = 200
    val_fraction: float = 0.25
    augment: bool = True
    lr_l1_normalize: bool = True
    image_channels: int = 3
    seed: int = 0
    device: str = "cpu"
    augmentations: tuple[str, ...] = field(
        default=("flip_h", "flip_v", "rotate90"))


def _as_pairs(dataset) -> list[TrainingPair]:
    if isinstance(dataset, (str, os.PathLike)):
        _, pairs = read_pair_set(dataset)
        return pairs
    return list(dataset)


def _pair_tensors(pair: TrainingPair, image_channels: int, device):
    image = prepare_image(load_image(pair.image_path), image_channels)
    img = torch.from_numpy(image.transpose(2, 0, 1).copy()).to(device)
    lr = torch.from_numpy(pair.lr.grid.transpose(2, 0, 1).copy()).to(device)
    hr = torch.from_numpy(pair.hr.grid.transpose(2, 0, 1).copy()).to(device)
    return img, lr, hr


def _augment(tensors, rot: int, flip_h: bool, flip_v: bool):
    out = []
    for x in tensors:
        if rot:
            x = torch.rot90(x, rot, dims=(-2, -1))
        if flip_h:
            x = torch.flip(x, dims=(-1,))
        if flip_v:
            x = torch.flip(x, dims=(-2,))
        out.append(x)
    return out


def slice_pairs(pairs: list[TrainingPair], j: int) -> list[TrainingPair]:
    """Keep the first j feature channels of every pair."""
    k = pairs[0].k
    if not 1 <= j < k:
        raise ValueError(f"j must be in [1, {k - 1}], got {j}")
    out = []
    for p in pairs:
        out.append(TrainingPair(
            p.image_path,
            FeatureGrid(np.ascontiguousarray(p.lr.grid[:, :, :j]),
                        p.lr.patch_size, p.lr.source_image_dims),
            FeatureGrid(np.ascontiguousarray(p.hr.grid[:, :, :j]),
                        p.hr.patch_size, p.hr.source_image_dims)))
    return out


def _validation_loss(model, val_data) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for img, lr, hr in val_data:
            pred = model(img[None], lr[None])[0]
            total += F.smooth_l1_loss(pred, hr).item()
    model.train()
    return total / len(val_data)


def train_upsampler(dataset, config: TrainRunConfig | None = None,
                    out_path=None, extra: dict | None = None):
    """Fit a model on the pairs; returns (model, history).

    When out_path is given the best-validation weights are exported there
    as a weight archive (written atomically).
    """
    config = config or TrainRunConfig()
    pairs = _as_pairs(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    k = pairs[0].k
    if any(p.k != k for p in pairs):
        raise ValueError("all pairs must share the same channel count")
    for name in ("d_in", "d_out"):
        want = getattr(config, name)
        if want is not None and want != k:
            raise ValueError(f"config {name}={want} but pairs carry k={k}")

    torch.manual_seed(config.seed)
    model = GuidedUpsampler(
        ArchitectureSpec(d_in=k, d_out=k, d_hidden=config.d_hidden,
                         d_down=config.d_down, kernel_size=config.kernel_size,
                         num_stages=config.num_stages),
        image_channels=config.image_channels,
        lr_l1_normalize=config.lr_l1_normalize,
    ).to(config.device)
    # start the head at zero so early training moves outputs from a known
    # baseline instead of chasing random projections
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()

    data = [_pair_tensors(p, config.image_channels, config.device)
            for p in pairs]
    if len({(img.shape, lr.shape) for img, lr, hr in data}) > 1:
        batch_size = 1  # mixed dims cannot be stacked
    else:
        batch_size = max(1, min(config.batch_size, len(data)))

    split_rng = np.random.default_rng([config.seed])
    order = split_rng.permutation(len(data))
    n_val = max(1, round(len(data) * config.val_fraction)) if len(data) > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    val_data = [data[i] for i in val_idx] if n_val else data
    train_data = [data[i] for i in train_idx]

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    batch_rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])

    history = {
        "val_loss": [_validation_loss(model, val_data)],
        "train_loss": [],
        "diverged": False,
        "k": k, "n_train": len(train_data), "n_val": len(val_data),
    }
    best_val = history["val_loss"][0]
    best_epoch = 0
    best_state = copy.deepcopy(model.state_dict())

    model.train()
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        perm = batch_rng.permutation(len(train_data))
        epoch_loss = 0.0
        n_batches = 0
        diverged = False
        for start in range(0, len(perm), batch_size):
            chosen = perm[start:start + batch_size]
            imgs = torch.stack([train_data[i][0] for i in chosen])
            lrs = torch.stack([train_data[i][1] for i in chosen])
            hrs = torch.stack([train_data[i][2] for i in chosen])
            if config.augment:
                allowed = config.augmentations
                rot = (int(aug_rng.integers(0, 4))
                       if "rotate90" in allowed else 0)
                flip_h = (bool(aug_rng.integers(0, 2))
                          if "flip_h" in allowed else False)
                flip_v = (bool(aug_rng.integers(0, 2))
                          if "flip_v" in allowed else False)
                imgs, lrs, hrs = _augment((imgs, lrs, hrs), rot, flip_h, flip_v)

            optimizer.zero_grad()
            loss = F.smooth_l1_loss(model(imgs, lrs), hrs)
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            n_batches += 1

        epochs_run = epoch
        if diverged:
            log.error("training loss went non-finite at epoch %d; aborting "
                      "with the best weights from epoch %d", epoch, best_epoch)
            history["diverged"] = True
            break

        history["train_loss"].append(epoch_loss / max(1, n_batches))
        val_loss = _validation_loss(model, val_data)
        history["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            log.info("no validation improvement for %d epochs; stopping at "
                     "epoch %d", config.patience, epoch)
            break

    model.load_state_dict(best_state)
    history["best_epoch"] = best_epoch
    history["best_val_loss"] = best_val
    history["epochs_run"] = epochs_run

    if out_path is not None:
        manifest_extra = {
            "training": {
                "seed": config.seed,
                "learning_rate": config.learning_rate,
                "batch_size": config.batch_size,
                "epochs_run": epochs_run,
                "best_epoch": best_epoch,
                "best_val_loss": best_val,
                "diverged": history["diverged"],
            }
        }
        manifest_extra.update(extra or {})
        _atomic_export(Path(out_path), model, manifest_extra)
    return model, history


def train_compressed(dataset, j: int, config: TrainRunConfig | None = None,
                     out_path=None):
    """Train on the first j feature channels only; the manifest records j."""
    pairs = _as_pairs(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    k = pairs[0].k
    if j >= k:
        raise ValueError(f"compressed width j={j} must be smaller than k={k}")
    sliced = slice_pairs(pairs, j)
    return train_upsampler(sliced, config, out_path,
                           extra={"compressed_from": k, "j": j})


def _atomic_export(out_path: Path, model: GuidedUpsampler, extra: dict):
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    save_archive(tmp, model, extra)
    os.replace(tmp, out_path)
