"""OCTraN variants B, V0 and V1: backbone, latent transformer, transpose-conv decoder, training."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as G
from . import tensor as T
from .attention import (
    AttentionConfig,
    FeaturePyramid,
    FourierEncoding,
    PerceiverBlock,
    PYRAMID_LEVELS,
    chunk_features,
    fourier_encode,
    grid_positions,
    level_shape,
)
from .kvfile import KVError, format_kv, parse_bool, parse_floats, parse_ints, read_kv
from .nn import Conv2d, ConvTranspose3d, Linear, Module
from .tensor import Tensor

VARIANTS = ("B", "V0", "V1")


class ConfigError(ValueError):
    pass


class EmptyLossError(ValueError):
    kind = "empty-loss"


class DivergedError(FloatingPointError):
    kind = "diverged"

    def __init__(self, step: int, loss: float):
        super().__init__(f"diverged: non-finite loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class OctranConfig:
    variant: str = "V0"
    # hyperparameter short names: ch, cdh, lmp, lr, bs, mf, d, lh, ldh
    ch: int = 8
    cdh: int = 32
    lmp: float = 0.5
    lr: float = 1e-4
    bs: int = 2
    mf: float = 500000.0
    d: int = 4
    lh: int = 8
    ldh: int = 32
    chunks: int = 1
    input_h: int = 32
    input_w: int = 128
    grid_dims: tuple[int, int, int] = (16, 4, 16)
    grid_extent: tuple[float, float, float] = (16.0, 4.0, 16.0)
    grid_origin: tuple[float, float, float] = (-8.0, -2.0, 0.0)
    latent_count: int = 32
    latent_dim: int = 64
    channels: int = 32
    decoder_stages: int = 3
    decoder_channels: int = 16
    num_bands: int = 6
    ff_mult: int = 2
    shared_chunk_weights: bool = True
    steps: int = 200
    threshold: float = 0.5
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "grid_dims", tuple(int(x) for x in self.grid_dims))
        object.__setattr__(self, "grid_extent", tuple(float(x) for x in self.grid_extent))
        object.__setattr__(self, "grid_origin", tuple(float(x) for x in self.grid_origin))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("ch", "cdh", "bs", "lh", "ldh", "chunks", "input_h", "input_w", "latent_count",
                     "latent_dim", "channels", "decoder_channels", "num_bands", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("d", "decoder_stages", "steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.lmp <= 1.0:
            raise ConfigError(f"lmp must lie in [0, 1], got {self.lmp}")
        if self.lr < 0 or self.mf <= 0:
            raise ConfigError("lr must be >= 0 and mf > 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        G.VoxelGridSpec(self.grid_dims, self.grid_extent, self.grid_origin)
        if self.variant != "B":
            if self.input_h % 32 or self.input_w % 32:
                raise ConfigError(f"input {self.input_h}x{self.input_w} must be divisible by 32 for the backbone")
        if self.variant == "V1":
            for j in self.pyramid_levels:
                w = level_shape(j, (self.input_h, self.input_w))[1]
                if w % self.chunks:
                    raise ConfigError(f"{self.chunks} chunks do not divide pyramid level {j} width {w}")
            if self.grid_dims[0] % self.chunks:
                raise ConfigError(f"{self.chunks} chunks do not divide grid width {self.grid_dims[0]}")
        cells = math.prod(decoder_layout(self.slab_dims, self.decoder_stages)[1])
        if self.latent_count % cells:
            raise ConfigError(
                f"latent_count {self.latent_count} must be a multiple of the {cells} coarse decoder cells"
            )

    @property
    def pyramid_levels(self) -> tuple[int, ...]:
        return tuple(j for j in PYRAMID_LEVELS if level_shape(j, (self.input_h, self.input_w)) is not None)

    @property
    def slab_dims(self) -> tuple[int, int, int]:
        nx, ny, nz = self.grid_dims
        return (nx // self.chunks, ny, nz) if self.variant == "V1" else (nx, ny, nz)

    @property
    def grid(self) -> G.VoxelGridSpec:
        return G.VoxelGridSpec(self.grid_dims, self.grid_extent, self.grid_origin)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.ch, self.cdh, self.lh, self.ldh, self.d, self.ff_mult)

    @property
    def encoding(self) -> FourierEncoding:
        return FourierEncoding(self.mf, self.num_bands, include_input=True)

    def replace(self, **kw) -> "OctranConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_kv(self) -> str:
        return format_kv(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "OctranConfig":
        return cls(**d)

    @classmethod
    def from_kv(cls, kv: dict[str, str], base: "OctranConfig | None" = None) -> "OctranConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(kv) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        values = (base or cls()).to_dict()
        try:
            for key, raw in kv.items():
                cur = values[key]
                if isinstance(cur, bool):
                    values[key] = parse_bool(raw)
                elif isinstance(cur, tuple):
                    parse = parse_ints if isinstance(cur[0], int) else parse_floats
                    values[key] = parse(raw, len(cur))
                elif isinstance(cur, int):
                    values[key] = int(raw)
                elif isinstance(cur, float):
                    values[key] = float(raw)
                else:
                    values[key] = raw
        except (ValueError, KVError) as e:
            raise ConfigError(str(e)) from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "OctranConfig":
        kv = read_kv(path)
        base = preset_config(kv["variant"]) if kv.get("variant") in VARIANT_PRESETS else None
        return cls.from_kv(kv, base)


# Per-variant hyperparameter presets (CH, CDH, LMP, LR, BS, MF, D, LH, LDH) and full-scale reference IoU (%).
VARIANT_PRESETS = {
    "B": dict(ch=1, cdh=64, lmp=0.0, lr=0.001, bs=1, mf=1000.0, d=1, lh=8, ldh=32),
    "V0": dict(ch=8, cdh=32, lmp=0.5, lr=0.0001, bs=2, mf=500000.0, d=4, lh=8, ldh=32),
    "V1": dict(ch=8, cdh=32, lmp=0.5, lr=0.0001, bs=4, mf=500000.0, d=8, lh=4, ldh=32),
}
REFERENCE_IOU = {"B": 18.818, "V0": 34.669, "V1": 28.408}


def preset_config(variant: str, **overrides) -> OctranConfig:
    """Desk-scale config carrying the preset hyperparameters for `variant`."""
    base = dict(variant=variant, **VARIANT_PRESETS[variant])
    if variant == "V1":
        base["chunks"] = 4
    base.update(overrides)
    return OctranConfig(**base)


def reference_config(variant: str = "V0", **overrides) -> OctranConfig:
    """Desk-scale training reference: the variant preset with lr raised to 1e-3 so 200 steps suffice."""
    return preset_config(variant, **{"lr": 1e-3, **overrides})


# --- backbone -------------------------------------------------------------------------------

class Backbone(Module):
    """Residual conv stages at strides 4..64 with an FPN-style top-down merge.

    Level j has stride 2^(6-j); only levels whose size is integral for the input are built.
    """

    def __init__(self, channels: int, levels: tuple[int, ...], rng):
        c = channels
        self.levels = levels
        self.stem = [Conv2d(3, c, 3, rng, stride=2, padding=1), Conv2d(c, c, 3, rng, stride=2, padding=1)]
        depth = 4 - min(levels)
        self.down = [Conv2d(c, c, 3, rng, stride=2, padding=1) for _ in range(depth)]
        self.res = [Conv2d(c, c, 3, rng, padding=1) for _ in range(depth + 1)]
        self.lateral = [Conv2d(c, c, 1, rng) for _ in range(depth + 1)]

    def forward(self, images: Tensor) -> FeaturePyramid:
        x = images
        for conv in self.stem:
            x = T.relu(conv(x))
        bottom_up = {}
        j = 4
        for k, res in enumerate(self.res):
            if k > 0:
                x = T.relu(self.down[k - 1](x))
            x = T.relu(x + res(x))
            bottom_up[j] = x
            j -= 1
        levels = {}
        top = None
        for k in reversed(range(len(self.res))):
            j = 4 - k
            lat = self.lateral[k](bottom_up[j])
            top = lat if top is None else lat + T.upsample_nearest2d(top, 2)
            levels[j] = top
        return FeaturePyramid({j: levels[j] for j in sorted(levels)})


def backbone_forward(backbone: Backbone, image) -> FeaturePyramid:
    """image: (H, W, 3) or (B, H, W, 3)."""
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    h, w = x.shape[1:3]
    if h % 32 or w % 32:
        raise ConfigError(f"input {h}x{w} must be divisible by 32")
    return backbone(Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2))))


# --- decoder --------------------------------------------------------------------------------

def _twos(n: int) -> int:
    return (n & -n).bit_length() - 1


def decoder_layout(slab_dims, stages: int):
    """Per-axis count of x2 upsampling stages and the coarse grid the decoder starts from."""
    ups = tuple(min(stages, _twos(n)) for n in slab_dims)
    coarse = tuple(n >> u for n, u in zip(slab_dims, ups))
    return ups, coarse


class Decoder(Module):
    """Latents -> coarse voxel grid -> stride-2 transpose convs -> one logit per voxel."""

    def __init__(self, latent_count, latent_dim, slab_dims, stages, channels, rng):
        self.slab_dims = tuple(slab_dims)
        self.ups, self.coarse = decoder_layout(slab_dims, stages)
        cells = math.prod(self.coarse)
        if latent_count % cells:
            raise ConfigError(f"{latent_count} latents cannot be grouped into {cells} cells")
        self.group = latent_count // cells
        self.channels = channels
        self.to_grid = Linear(self.group * latent_dim, channels, rng)
        self.stages = []
        for s in range(stages):
            up = [s < u for u in self.ups]
            self.stages.append(ConvTranspose3d(
                channels, channels, [4 if a else 3 for a in up], rng,
                stride=[2 if a else 1 for a in up], padding=1,
            ))
        self.head = ConvTranspose3d(channels, 1, 1, rng)

    def forward(self, latents: Tensor) -> Tensor:
        b, n, dim = latents.shape
        cells = math.prod(self.coarse)
        x = T.reshape(latents, (b, cells, self.group * dim))
        x = T.relu(self.to_grid(x, tag="decoder.to_grid"))
        x = T.permute(T.reshape(x, (b, *self.coarse, self.channels)), (0, 4, 1, 2, 3))
        for stage in self.stages:
            x = T.relu(stage(x))
        x = self.head(x)
        return T.reshape(x, (b, *self.slab_dims))


# --- the network ------------------------------------------------------------------------------

def _level_code(j: int) -> np.ndarray:
    code = np.zeros(len(PYRAMID_LEVELS))
    code[j] = 1.0
    return code


class Octran(Module):
    def __init__(self, cfg: OctranConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc = cfg.encoding
        pos_dim = enc.out_dim(2)
        if cfg.variant == "B":
            self.backbone = None
            token_dim = 3 + pos_dim
        else:
            self.backbone = Backbone(cfg.channels, cfg.pyramid_levels, rng)
            token_dim = cfg.channels + pos_dim + len(PYRAMID_LEVELS)
        self.token_dim = token_dim
        copies = cfg.chunks if cfg.variant == "V1" and not cfg.shared_chunk_weights else 1
        self.perceivers = [
            PerceiverBlock(token_dim, cfg.latent_count, cfg.latent_dim, cfg.attention, rng) for _ in range(copies)
        ]
        self.decoders = [
            Decoder(cfg.latent_count, cfg.latent_dim, cfg.slab_dims, cfg.decoder_stages, cfg.decoder_channels, rng)
            for _ in range(copies)
        ]
        self._pos_cache: dict = {}

    def _positions(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = fourier_encode(grid_positions(h, w), self.cfg.encoding)
        return self._pos_cache[key]

    def _level_tokens(self, feat: Tensor, j: int, h: int, w: int, cols: slice) -> Tensor:
        """Tokens of one (possibly column-sliced) level: features, Fourier position, level code."""
        b, c, hh, ww = feat.shape
        x = T.reshape(T.permute(feat, (0, 2, 3, 1)), (b, hh * ww, c))
        pos = self._positions(h, w)[:, cols].reshape(hh * ww, -1)
        extra = np.concatenate([pos, np.broadcast_to(_level_code(j), (hh * ww, len(PYRAMID_LEVELS)))], axis=1)
        return T.concat([x, Tensor(np.broadcast_to(extra, (b, *extra.shape)))], axis=2)

    def tokens(self, images: np.ndarray) -> list[Tensor]:
        """One token tensor (B, M, token_dim) per chunk (a single entry unless V1)."""
        cfg = self.cfg
        b, h, w, _ = images.shape
        if cfg.variant == "B":
            pix = images.reshape(b, h * w, 3)
            pos = np.broadcast_to(self._positions(h, w).reshape(h * w, -1), (b, h * w, self.token_dim - 3))
            return [Tensor(np.concatenate([pix, pos], axis=2))]
        pyramid = backbone_forward(self.backbone, images)
        if cfg.variant == "V0":
            parts = [self._level_tokens(t, j, t.shape[2], t.shape[3], slice(None)) for j, t in pyramid.levels.items()]
            return [T.concat(parts, axis=1)]
        out = []
        for i, chunk in enumerate(chunk_features(pyramid, cfg.chunks)):
            parts = []
            for j, t in chunk.items():
                full_w = pyramid.levels[j].shape[3]
                lo = i * full_w // cfg.chunks
                parts.append(self._level_tokens(t, j, t.shape[2], full_w, slice(lo, lo + t.shape[3])))
            out.append(T.concat(parts, axis=1))
        return out

    def forward(self, images) -> Tensor:
        """images: (B, H, W, 3) or (H, W, 3) in [0, 1] -> logits (B, N_x, N_y, N_z)."""
        cfg = self.cfg
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (cfg.input_h, cfg.input_w, 3):
            raise ConfigError(f"image shape {x.shape[1:]} != configured {(cfg.input_h, cfg.input_w, 3)}")
        chunks = self.tokens(x)
        b = x.shape[0]
        if len(chunks) == 1:
            return self.decoders[0](self.perceivers[0](chunks[0]))
        sx, ny, nz = cfg.slab_dims
        if cfg.shared_chunk_weights:
            stacked = T.concat(chunks, axis=0)
            slabs = self.decoders[0](self.perceivers[0](stacked))
            slabs = T.permute(T.reshape(slabs, (cfg.chunks, b, sx, ny, nz)), (1, 0, 2, 3, 4))
            return T.reshape(slabs, (b, cfg.chunks * sx, ny, nz))
        slabs = [dec(per(tok)) for tok, per, dec in zip(chunks, self.perceivers, self.decoders)]
        return T.concat(slabs, axis=1)


def slab_ranges(cfg: OctranConfig) -> list[tuple[int, int]]:
    """Grid x-index range [lo, hi) written by each chunk."""
    sx = cfg.slab_dims[0]
    return [(i * sx, (i + 1) * sx) for i in range(cfg.chunks if cfg.variant == "V1" else 1)]


# --- loss, optimisation, evaluation -------------------------------------------------------------

def loss_mask(target: np.ndarray, lmp: float, rng: np.random.Generator) -> np.ndarray:
    """Occupied voxels always count; each empty voxel is dropped with probability lmp."""
    draws = rng.random(target.shape)
    return (target > 0) | (draws >= lmp)


def masked_bce_loss(logits: Tensor, target, lmp: float, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= lmp <= 1.0:
        raise ConfigError(f"lmp must lie in [0, 1], got {lmp}")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise T.ShapeError(f"logits {logits.shape} vs target {target.shape}")
    keep = loss_mask(target, lmp, rng)
    if not keep.any():
        raise EmptyLossError("empty-loss: every voxel is masked out")
    return T.bce_with_logits(logits, target, keep.astype(np.float64))


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return T._sigmoid(logits) > threshold


def batch_iou(logits: np.ndarray, targets: np.ndarray, grid: G.VoxelGridSpec, threshold=0.5) -> float:
    pred = binarize(logits, threshold)
    return float(np.mean([
        G.iou(G.OccupancyGrid(grid, p), G.OccupancyGrid(grid, t.astype(bool))) for p, t in zip(pred, targets)
    ]))


@dataclass
class TrainState:
    model: Octran
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: OctranConfig) -> "TrainState":
        model = Octran(cfg)
        zeros = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        return cls(model, zeros, {n: z.copy() for n, z in zeros.items()},
                   np.random.default_rng([cfg.seed, 1]))


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def adam_update(state: TrainState, lr: float) -> None:
    b1, b2 = ADAM_BETAS
    t = state.step + 1
    for name, p in state.model.named_parameters():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.adam_m[name] = b1 * state.adam_m[name] + (1 - b1) * g
        v = state.adam_v[name] = b2 * state.adam_v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def train_step(state: TrainState, batch, cfg: OctranConfig) -> TrainState:
    images, targets = batch
    images = np.asarray(images, dtype=np.float64)
    targets = np.asarray(targets)
    if len(images) != cfg.bs or len(targets) != cfg.bs:
        raise ConfigError(f"batch holds {len(images)} samples, config batch size is {cfg.bs}")
    model = state.model
    model.zero_grad()
    logits = model(images)
    loss = masked_bce_loss(logits, targets, cfg.lmp, state.rng)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergedError(state.step + 1, value)
    loss.backward()
    adam_update(state, cfg.lr)
    state.step += 1
    state.history.append({
        "step": state.step,
        "loss": value,
        "iou": batch_iou(logits.data, targets, cfg.grid, cfg.threshold),
    })
    return state


def batches(samples, cfg: OctranConfig, step: int):
    n = len(samples)
    idx = [(step * cfg.bs + k) % n for k in range(cfg.bs)]
    return (np.stack([samples[i].image for i in idx]), np.stack([samples[i].gt.occupancy for i in idx]))


def train(cfg: OctranConfig, samples, steps: int | None = None, state: TrainState | None = None,
          on_step=None) -> TrainState:
    """Run until `state.step == steps` (default cfg.steps). Batches cycle through `samples` in order."""
    if not samples:
        raise ValueError("training set is empty")
    state = state or TrainState.fresh(cfg)
    steps = cfg.steps if steps is None else steps
    while state.step < steps:
        train_step(state, batches(samples, cfg, state.step), cfg)
        if on_step:
            on_step(state)
    return state


def predict(model: Octran, images, batch_size: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i:i + batch_size]).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Octran, samples, threshold: float = 0.5) -> float:
    """Mean per-sample IoU of sigmoid(logits) > threshold against the ground truth."""
    if not samples:
        raise ValueError("evaluation set is empty")
    logits = predict(model, np.stack([s.image for s in samples]))
    return batch_iou(logits, np.stack([s.gt.occupancy for s in samples]), samples[0].gt.spec, threshold)


def baseline_ious(samples) -> dict[str, float]:
    """Mean IoU of the constant all-empty and all-occupied predictions."""
    empty, full = [], []
    for s in samples:
        empty.append(G.iou(G.OccupancyGrid.empty(s.gt.spec), s.gt))
        full.append(G.iou(G.OccupancyGrid(s.gt.spec, np.ones(s.gt.spec.dims, bool)), s.gt))
    return {"empty": float(np.mean(empty)), "full": float(np.mean(full))}


# --- checkpoints ------------------------------------------------------------------------------
# <dir>/manifest.json (config, step, history, RNG state, tensor names and shapes) plus one
# TNSR blob per tensor under params/, adam_m/ and adam_v/, and history.csv.

CHECKPOINT_FORMAT = "octran-checkpoint"


class CheckpointError(ValueError):
    pass


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss", "iou"])
    for h in history:
        writer.writerow([h["step"], repr(h["loss"]), repr(h["iou"])])
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> None:
    root = Path(path)
    cfg = state.model.cfg
    names = [n for n, _ in state.model.named_parameters()]
    for sub, store in (("params", state.model.state_dict()), ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for name in names:
            T.save_tensor(store[name], root / sub / f"{name}.tnsr")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": cfg.to_dict(),
        "step": state.step,
        "history": state.history,
        "rng": state.rng.bit_generator.state,
        "tensors": {n: list(p.shape) for n, p in state.model.named_parameters()},
    }
    (root / "history.csv").write_text(history_csv(state.history))
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(root / "manifest.json")


def load_checkpoint(path) -> TrainState:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest in {root}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != 1:
        raise CheckpointError(f"{root} is not a version-1 OCTraN checkpoint")
    cfg = OctranConfig.from_dict(manifest["config"])
    state = TrainState.fresh(cfg)
    shapes = manifest["tensors"]
    stores = {}
    for sub in ("params", "adam_m", "adam_v"):
        stores[sub] = {}
        for name, shape in shapes.items():
            arr = T.load_tensor(root / sub / f"{name}.tnsr")
            if list(arr.shape) != shape:
                raise CheckpointError(f"{sub}/{name}: shape {arr.shape} != manifest {shape}")
            stores[sub][name] = arr
    state.model.load_state_dict(stores["params"])
    state.adam_m, state.adam_v = stores["adam_m"], stores["adam_v"]
    state.step = manifest["step"]
    state.history = manifest["history"]
    state.rng.bit_generator.state = manifest["rng"]
    return state
