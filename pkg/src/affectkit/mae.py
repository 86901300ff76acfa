"""Masked-autoencoder pretraining and per-task fine-tuning on face frames."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from . import metrics as _metrics
from .datamodel import Task, TaskSpec
from .losses import task_loss, task_outputs
from .optim import OptimizerSpec, require_epochs, require_steps
from .seeding import derive_seed


@dataclass(frozen=True)
class PatchGrid:
    """Square image cut into non-overlapping square patches."""

    image_size: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.image_size < 1 or self.patch_size < 1:
            raise ValueError("image_size and patch_size must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"patch_size {self.patch_size} does not divide "
                f"image_size {self.image_size}"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size ** 2


def patchify(images: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """[H, W, C] or [B, H, W, C] images -> [P, p*p*C] or [B, P, p*p*C] patches.

    Patch p is the raster-order (row, then column) patch; each row is the
    patch's pixels flattened row-major as (dy, dx, channel). Pure reshaping,
    so the round trip through unpatchify is bit-exact.
    """
    images = torch.as_tensor(images)
    single = images.dim() == 3
    if single:
        images = images.unsqueeze(0)
    if images.dim() != 4:
        raise ValueError("images must be [H, W, C] or [B, H, W, C]")
    b, h, w, c = images.shape
    if h != grid.image_size or w != grid.image_size:
        raise ValueError(
            f"image is {h}x{w}, grid expects {grid.image_size}x{grid.image_size}"
        )
    g, p = grid.grid_size, grid.patch_size
    x = images.reshape(b, g, p, g, p, c)
    x = x.permute(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, g * g, p * p * c)
    return x[0] if single else x


def unpatchify(patches: torch.Tensor, grid: PatchGrid,
               channels: int) -> torch.Tensor:
    """Inverse of patchify: [B, P, p*p*C] or [P, p*p*C] -> images."""
    patches = torch.as_tensor(patches)
    single = patches.dim() == 2
    if single:
        patches = patches.unsqueeze(0)
    b, n, d = patches.shape
    g, p = grid.grid_size, grid.patch_size
    if n != grid.n_patches or d != p * p * channels:
        raise ValueError(
            f"patches are [{n}, {d}], grid expects "
            f"[{grid.n_patches}, {p * p * channels}]"
        )
    x = patches.reshape(b, g, g, p, p, channels)
    x = x.permute(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, grid.image_size, grid.image_size, channels)
    return x[0] if single else x


@dataclass(frozen=True)
class MaskPlan:
    """Which patches of one image are hidden from the encoder."""

    masked: np.ndarray
    mask_ratio: float
    seed: int

    def __post_init__(self) -> None:
        m = np.asarray(self.masked, dtype=bool)
        if m.ndim != 1:
            raise ValueError("masked must be a 1-D bool array")
        n_masked = int(m.sum())
        if n_masked == 0 or n_masked == m.size:
            raise ValueError("a mask plan needs at least one masked "
                             "and one visible patch")
        object.__setattr__(self, "masked", m)

    @property
    def n_patches(self) -> int:
        return self.masked.size

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def n_visible(self) -> int:
        return self.n_patches - self.n_masked


def sample_mask(grid: PatchGrid, mask_ratio: float, seed: int) -> MaskPlan:
    """Pick floor(mask_ratio * n_patches) patches to hide, uniformly at random.

    Deterministic per seed. mask_ratio must leave at least one masked and one
    visible patch.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie strictly between 0 and 1")
    n = grid.n_patches
    n_masked = int(math.floor(mask_ratio * n))
    if n_masked < 1 or n_masked > n - 1:
        raise ValueError(
            f"mask_ratio {mask_ratio} keeps {n_masked}/{n} patches masked; "
            "need at least one masked and one visible"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    masked = np.zeros(n, dtype=bool)
    masked[order[:n_masked]] = True
    return MaskPlan(masked=masked, mask_ratio=mask_ratio, seed=seed)


@dataclass(frozen=True)
class MAEConfig:
    """Architecture and masking settings for the autoencoder.

    Defaults are the toy scale used in tests; vit_base() is the full-size
    preset (224px, 16px patches, 12-layer encoder, 8-layer decoder).
    """

    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    encoder_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_dim: int = 32
    decoder_depth: int = 1
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    loss_on_all_patches: bool = False

    def __post_init__(self) -> None:
        PatchGrid(self.image_size, self.patch_size)
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        for dim, heads, what in ((self.encoder_dim, self.encoder_heads, "encoder"),
                                 (self.decoder_dim, self.decoder_heads, "decoder")):
            if dim % heads != 0:
                raise ValueError(f"{what}_dim {dim} not divisible by "
                                 f"{what}_heads {heads}")
            if dim % 4 != 0:
                raise ValueError(f"{what}_dim must be divisible by 4 "
                                 "for 2-D positional embeddings")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ValueError("encoder/decoder depth must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly between 0 and 1")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        return cls(**d)

    @classmethod
    def vit_base(cls) -> "MAEConfig":
        return cls(image_size=224, patch_size=16, channels=3,
                   encoder_dim=768, encoder_depth=12, encoder_heads=12,
                   decoder_dim=512, decoder_depth=8, decoder_heads=16)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64)
    omega = 1.0 / 10000.0 ** (omega / (dim / 2))
    angles = np.outer(positions, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_2d(dim: int, grid_size: int) -> np.ndarray:
    """Fixed 2-D sine-cosine positional table [grid_size**2, dim].

    Half the channels encode the row coordinate, half the column, each as the
    usual interleaved sin/cos spectrum. dim must be divisible by 4.
    """
    if dim % 4 != 0:
        raise ValueError("embedding dim must be divisible by 4")
    rows = np.repeat(np.arange(grid_size, dtype=np.float64), grid_size)
    cols = np.tile(np.arange(grid_size, dtype=np.float64), grid_size)
    return np.concatenate([_sincos_1d(dim // 2, rows),
                           _sincos_1d(dim // 2, cols)], axis=1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm ViT block: x + attn(LN(x)), then x + mlp(LN(x))."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _init_linear_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class MAEEncoder(nn.Module):
    """ViT encoder over visible patches only; no class token, mean pooling."""

    def __init__(self, config: MAEConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim, config.encoder_dim)
        pos = sincos_pos_embed_2d(config.encoder_dim, config.grid.grid_size)
        self.register_buffer("pos_embed",
                             torch.from_numpy(pos).to(torch.float32))
        self.blocks = nn.ModuleList([
            TransformerBlock(config.encoder_dim, config.encoder_heads,
                             config.mlp_ratio)
            for _ in range(config.encoder_depth)
        ])
        self.norm = nn.LayerNorm(config.encoder_dim)
        self.apply(_init_linear_weights)

    def forward(self, images: torch.Tensor,
                masked: Optional[torch.Tensor] = None
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (tokens [B, n_visible, D], pooled [B, D]).

        masked is an optional bool [B, P] tensor; masked patches are dropped
        before embedding, so their pixel values cannot reach the output.
        Every row must keep the same number of visible patches.
        """
        images = torch.as_tensor(images)
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        patches = patchify(images, self.config.grid)
        pos = self.pos_embed.to(patches.dtype)
        if masked is None:
            x = self.patch_embed(patches) + pos
        else:
            masked = torch.as_tensor(masked, dtype=torch.bool)
            if masked.dim() == 1:
                masked = masked.unsqueeze(0)
            if masked.shape != patches.shape[:2]:
                raise ValueError("mask shape does not match the patch grid")
            n_visible = int((~masked[0]).sum())
            if not bool(((~masked).sum(dim=1) == n_visible).all()):
                raise ValueError("all rows in a batch must share the same "
                                 "visible-patch count")
            if n_visible == 0:
                raise ValueError("at least one patch must stay visible")
            visible_idx = (~masked).nonzero(as_tuple=False)[:, 1]
            visible_idx = visible_idx.reshape(masked.shape[0], n_visible)
            gathered = torch.gather(
                patches, 1,
                visible_idx.unsqueeze(-1).expand(-1, -1, patches.shape[-1]))
            x = self.patch_embed(gathered) + pos[visible_idx]
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        pooled = x.mean(dim=1)
        if single:
            return x[0], pooled[0]
        return x, pooled


class MAEDecoder(nn.Module):
    """Lightweight transformer that reconstructs every patch's pixels."""

    def __init__(self, config: MAEConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Linear(config.encoder_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.decoder_dim))
        pos = sincos_pos_embed_2d(config.decoder_dim, config.grid.grid_size)
        self.register_buffer("pos_embed",
                             torch.from_numpy(pos).to(torch.float32))
        self.blocks = nn.ModuleList([
            TransformerBlock(config.decoder_dim, config.decoder_heads,
                             config.mlp_ratio)
            for _ in range(config.decoder_depth)
        ])
        self.norm = nn.LayerNorm(config.decoder_dim)
        self.pred = nn.Linear(config.decoder_dim, config.patch_dim)
        self.apply(_init_linear_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, visible_tokens: torch.Tensor,
                masked: torch.Tensor) -> torch.Tensor:
        """(tokens [B, n_visible, De], masked [B, P]) -> recon [B, P, patch_dim].

        Masked positions start from the shared learned mask token; visible
        positions carry the encoder token for that patch.
        """
        b, p = masked.shape
        x = self.embed(visible_tokens)
        n_visible = x.shape[1]
        visible_idx = (~masked).nonzero(as_tuple=False)[:, 1]
        visible_idx = visible_idx.reshape(b, n_visible)
        full = self.mask_token.expand(b, p, -1).to(x.dtype)
        full = torch.scatter(
            full, 1,
            visible_idx.unsqueeze(-1).expand(-1, -1, x.shape[-1]), x)
        x = full + self.pos_embed.to(full.dtype)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return self.pred(x)


@dataclass
class MAEOutput:
    reconstruction: torch.Tensor
    pooled: torch.Tensor
    masked: torch.Tensor


class MaskedAutoencoder(nn.Module):
    def __init__(self, config: MAEConfig):
        super().__init__()
        self.config = config
        self.encoder = MAEEncoder(config)
        self.decoder = MAEDecoder(config)

    def forward(self, images: torch.Tensor,
                masked: torch.Tensor) -> MAEOutput:
        images = torch.as_tensor(images)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        masked = torch.as_tensor(masked, dtype=torch.bool)
        if masked.dim() == 1:
            masked = masked.unsqueeze(0)
        tokens, pooled = self.encoder(images, masked)
        recon = self.decoder(tokens, masked)
        return MAEOutput(reconstruction=recon, pooled=pooled, masked=masked)


def plans_to_mask(plans: Sequence[MaskPlan]) -> torch.Tensor:
    """Stack per-image mask plans into the bool [B, P] tensor models take."""
    if not plans:
        raise ValueError("need at least one mask plan")
    sizes = {p.n_patches for p in plans}
    if len(sizes) != 1:
        raise ValueError("mask plans cover different grid sizes")
    return torch.from_numpy(np.stack([p.masked for p in plans]))


def mae_forward(model: MaskedAutoencoder, images: torch.Tensor,
                plans: Sequence[MaskPlan]) -> MAEOutput:
    """Run the autoencoder on a batch with one mask plan per image."""
    return model(images, plans_to_mask(plans))


def mae_loss(reconstruction: torch.Tensor, target_patches: torch.Tensor,
             masked: torch.Tensor,
             loss_on_all_patches: bool = False) -> torch.Tensor:
    """Mean squared pixel error, averaged over masked patches only.

    With loss_on_all_patches=True every patch contributes (visible ones act
    as a plain autoencoding term).
    """
    recon = torch.as_tensor(reconstruction)
    target = torch.as_tensor(target_patches, dtype=recon.dtype)
    if recon.dim() == 2:
        recon = recon.unsqueeze(0)
        target = target.unsqueeze(0)
    if recon.shape != target.shape:
        raise ValueError("reconstruction and target shapes differ")
    m = torch.as_tensor(masked, dtype=torch.bool)
    if m.dim() == 1:
        m = m.unsqueeze(0)
    if m.shape != recon.shape[:2]:
        raise ValueError("mask shape does not match patches")
    per_patch = ((recon - target) ** 2).mean(dim=-1)
    if loss_on_all_patches:
        return per_patch.mean()
    if int(m.sum()) == 0:
        raise ValueError("no masked patches to score")
    return per_patch[m].mean()


def pretrain(images: Union[np.ndarray, torch.Tensor], config: MAEConfig,
             opt: OptimizerSpec) -> tuple[MaskedAutoencoder, list[tuple[int, float]]]:
    """Train a fresh autoencoder on unlabeled frames.

    images is [N, H, W, C] float in [0, 1]. Runs opt.steps optimizer steps of
    AdamW with random minibatches and fresh random masks each step; fully
    deterministic given opt.seed. Returns (model, per-step loss history).
    """
    steps = require_steps(opt)
    data = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if data.dim() != 4:
        raise ValueError("images must be [N, H, W, C]")
    n = data.shape[0]
    if n == 0:
        raise ValueError("no images to pretrain on")
    torch.manual_seed(derive_seed(opt.seed, "mae-init"))
    model = MaskedAutoencoder(config)
    optimizer = opt.build(model.parameters())
    rng = np.random.default_rng(derive_seed(opt.seed, "mae-batches"))
    grid = config.grid
    history: list[tuple[int, float]] = []
    model.train()
    for step in range(1, steps + 1):
        take = min(opt.batch_size, n)
        idx = rng.choice(n, size=take, replace=False)
        batch = data[torch.from_numpy(np.ascontiguousarray(idx))]
        seeds = rng.integers(0, 2 ** 31 - 1, size=take)
        plans = [sample_mask(grid, config.mask_ratio, int(s)) for s in seeds]
        out = mae_forward(model, batch, plans)
        target = patchify(batch, grid)
        loss = mae_loss(out.reconstruction, target, out.masked,
                        config.loss_on_all_patches)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append((step, float(loss.detach())))
    return model, history


class FineTuneModel(nn.Module):
    """Encoder plus a task head; the pretraining decoder is dropped."""

    def __init__(self, encoder: MAEEncoder, task_spec: TaskSpec):
        super().__init__()
        self.encoder = encoder
        self.task_spec = task_spec
        self.head = nn.Linear(encoder.config.encoder_dim, task_spec.n_outputs)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Full-visibility encode, mean-pool, affine head -> raw logits."""
        images = torch.as_tensor(images)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        _, pooled = self.encoder(images)
        return self.head(pooled)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        return task_outputs(self.forward(images), self.task_spec.task)


def attach_head(model: Union[MaskedAutoencoder, MAEEncoder],
                task_spec: TaskSpec, freeze_encoder: bool = False,
                seed: int = 0) -> FineTuneModel:
    """Drop the decoder and bolt a per-task affine head onto the encoder.

    freeze_encoder leaves only the head trainable. Head init is deterministic
    per seed.
    """
    encoder = model.encoder if isinstance(model, MaskedAutoencoder) else model
    torch.manual_seed(derive_seed(seed, "task-head"))
    ft = FineTuneModel(encoder, task_spec)
    nn.init.xavier_uniform_(ft.head.weight)
    nn.init.zeros_(ft.head.bias)
    if freeze_encoder:
        for param in ft.encoder.parameters():
            param.requires_grad_(False)
    return ft


def _predict_in_batches(model: FineTuneModel, images: torch.Tensor,
                        batch_size: int) -> torch.Tensor:
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            outs.append(model.predict(images[i:i + batch_size]))
    return torch.cat(outs)


def _supervised_metric(pred: np.ndarray, target: np.ndarray,
                       task: Task) -> float:
    if task is Task.AU:
        return _metrics.score_au(_metrics.f1_per_class(
            _metrics.binarize_au(pred), target.astype(np.int64)))
    if task is Task.EXPR:
        pred_oh = _metrics.expr_to_onehot(pred.argmax(axis=1))
        true_oh = _metrics.expr_to_onehot(target.astype(np.int64))
        return _metrics.score_expr(_metrics.f1_per_class(pred_oh, true_oh))
    report = _metrics.score_va(pred[:, 0], pred[:, 1],
                               target[:, 0], target[:, 1])
    return report.aggregate


def _prep_targets(targets: np.ndarray, task: Task) -> torch.Tensor:
    t = np.asarray(targets)
    if task is Task.EXPR and t.ndim == 1:
        from .losses import onehot_expr
        return onehot_expr(t.astype(np.int64))
    return torch.as_tensor(t, dtype=torch.float32)


def finetune(model: FineTuneModel, images: Union[np.ndarray, torch.Tensor],
             targets: np.ndarray, opt: OptimizerSpec,
             val: Optional[tuple[np.ndarray, np.ndarray]] = None
             ) -> list[dict]:
    """Supervised training of the head (and unfrozen encoder) on labeled frames.

    targets are task-shaped: [N, 12] binary for AU, [N] class indices for
    EXPR, [N, 2] for VA. History rows carry per-epoch mean train loss and,
    when val=(images, targets) is given, the task metric on that split.
    """
    epochs = require_epochs(opt)
    task_spec = model.task_spec
    task = task_spec.task
    data = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    target_t = _prep_targets(targets, task)
    n = data.shape[0]
    if n == 0:
        raise ValueError("no labeled frames to finetune on")
    if task is Task.VA and opt.batch_size < 2:
        raise ValueError("VA finetuning needs batch_size >= 2")
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = opt.build(trainable)
    rng = np.random.default_rng(derive_seed(opt.seed, "finetune-batches"))
    history: list[dict] = []
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(n)
        losses_seen = []
        for i in range(0, n, opt.batch_size):
            idx = order[i:i + opt.batch_size]
            # A lone trailing frame cannot support the VA correlation loss.
            if task is Task.VA and idx.size < 2:
                continue
            batch_idx = torch.from_numpy(np.ascontiguousarray(idx))
            outputs = task_outputs(model(data[batch_idx]), task)
            loss = task_loss(outputs, target_t[batch_idx], task,
                             task_spec.class_weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses_seen.append(float(loss.detach()))
        row = {"epoch": epoch,
               "train_loss": float(np.mean(losses_seen)) if losses_seen else None}
        if val is not None:
            val_images = torch.as_tensor(np.asarray(val[0]),
                                         dtype=torch.float32)
            pred = _predict_in_batches(model, val_images,
                                       opt.batch_size).numpy()
            row["val_metric"] = _supervised_metric(pred, np.asarray(val[1]),
                                                   task)
        history.append(row)
    return history
