"""Single-image volumetric reconstruction network.

A 2D convolutional encoder pools the image down to a coarse plane, which is
reshaped channel-wise into a tiny 3D seed grid. The decoder repeatedly
doubles the grid with transposed convolutions; after each doubling it
concatenates (a) image features gathered by projecting every grid point
through the camera onto an encoder plane of matching resolution and
sampling it bilinearly, and (b) the grid's sub-cell offset as three
constant channels, then mixes with 3D convolutions. A 1x1x1 head and a
softmax over channels yield per-point class probabilities.

All tensors are float32 and unbatched (leading axis 1). Volumes use
(1, C, D, H, W) layout internally; the public prediction is (W, H, D, C).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .camera import PinholeCamera
from .errors import ContractError, DimensionError
from .optim import AdamState
from .rng import substream
from .tensor import Tensor, read_tensor, write_tensor
from .volume import DecoderGrid, GridSpec, VolumeGrid

_SEED_RES = 4
_HEAD_SCALE = 0.1


@dataclass
class ModelConfig:
    num_classes: int
    image_size: int = 64
    in_channels: int = 3
    grid_shape: tuple[int, int, int] = (32, 32, 32)
    enc_channels: tuple[int, ...] = (16, 32, 64, 128)
    dec_channels: tuple[int, ...] = (48, 24, 12)
    mix_layers: tuple[int, ...] = (2, 1, 1)
    skip_fraction: float = 0.75
    use_skips: bool = True

    def __post_init__(self):
        w, h, d = self.grid_shape
        if not (w == h == d):
            raise ContractError(f"grid must be cubic, got {self.grid_shape}")
        if self.num_classes < 2:
            raise ContractError("need at least two classes (void + one)")
        n_enc = len(self.enc_channels)
        if self.image_size != _SEED_RES * (1 << n_enc):
            raise ContractError(
                f"image size {self.image_size} does not pool to a {_SEED_RES}px "
                f"plane over {n_enc} stride-2 stages")
        n_dec = len(self.dec_channels)
        if w != _SEED_RES * (1 << n_dec):
            raise ContractError(
                f"{n_dec} doublings from {_SEED_RES} reach {_SEED_RES * (1 << n_dec)}, "
                f"but grid is {w}")
        if len(self.mix_layers) != n_dec or any(m < 1 for m in self.mix_layers):
            raise ContractError("mix_layers must give >=1 conv per decoder stage")
        if n_enc < n_dec + 1:
            raise ContractError("every decoder stage needs an encoder plane of "
                                "matching resolution")
        if self.enc_channels[-1] % _SEED_RES != 0:
            raise ContractError("final encoder channels must split evenly over "
                                "the seed depth axis")
        if not 0 < self.skip_fraction <= 1:
            raise ContractError(f"skip_fraction in (0, 1], got {self.skip_fraction}")

    @property
    def seed_channels(self) -> int:
        return self.enc_channels[-1] // _SEED_RES

    def skip_channels(self, stage: int) -> int:
        return max(1, int(self.dec_channels[stage] * self.skip_fraction))

    def stage_resolutions(self) -> list[int]:
        return [_SEED_RES << (s + 1) for s in range(len(self.dec_channels))]

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        return ModelConfig(**fixed)

    @staticmethod
    def for_data(num_classes: int, image_size: int = 64,
                 grid_shape: tuple[int, int, int] = (32, 32, 32),
                 use_skips: bool = True, in_channels: int = 3) -> "ModelConfig":
        """Derive stage counts/widths from the image and grid resolutions.

        Reproduces the default channel tuples at 64px / 32^3 and scales the
        stage counts for other power-of-two sizes.
        """
        n_enc = int(round(np.log2(max(image_size, 1) / _SEED_RES)))
        n_dec = int(round(np.log2(max(grid_shape[0], 1) / _SEED_RES)))
        enc = tuple(min(128, 16 << i) for i in range(max(n_enc, 1)))
        dec = tuple(max(12, 48 >> s) for s in range(max(n_dec, 1)))
        mix = (2,) + (1,) * (len(dec) - 1)
        return ModelConfig(num_classes=num_classes, image_size=image_size,
                           in_channels=in_channels, grid_shape=tuple(grid_shape),
                           enc_channels=enc, dec_channels=dec, mix_layers=mix,
                           use_skips=use_skips)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """He-uniform kernels, zero biases; the head is scaled down so initial
    logits sit near zero and the softmax starts close to uniform."""
    p: dict[str, np.ndarray] = {}
    rng = substream(seed, "init")
    c_in = config.in_channels
    for i, c_out in enumerate(config.enc_channels):
        p[f"enc{i}a_w"] = _he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        p[f"enc{i}a_b"] = np.zeros(c_out, np.float32)
        p[f"enc{i}b_w"] = _he_uniform(rng, (c_out, c_out, 3, 3), c_out * 9)
        p[f"enc{i}b_b"] = np.zeros(c_out, np.float32)
        c_in = c_out
    c_prev = config.seed_channels
    enc_for_stage = list(reversed(config.enc_channels[:-1]))
    for s, c_out in enumerate(config.dec_channels):
        p[f"up{s}_w"] = _he_uniform(rng, (c_prev, c_out, 2, 2, 2), c_prev * 8)
        p[f"up{s}_b"] = np.zeros(c_out, np.float32)
        c_mix = c_out + 3
        if config.use_skips:
            k = config.skip_channels(s)
            c_enc = enc_for_stage[s]
            p[f"skip{s}_w"] = _he_uniform(rng, (k, c_enc, 1, 1), c_enc)
            p[f"skip{s}_b"] = np.zeros(k, np.float32)
            c_mix += k
        width = c_mix
        for m in range(config.mix_layers[s]):
            p[f"mix{s}{m}_w"] = _he_uniform(rng, (c_out, width, 3, 3, 3), width * 27)
            p[f"mix{s}{m}_b"] = np.zeros(c_out, np.float32)
            width = c_out
        c_prev = c_out
    p["head_w"] = _he_uniform(rng, (config.num_classes, c_prev, 1, 1, 1),
                              c_prev, gain=_HEAD_SCALE)
    p["head_b"] = np.zeros(config.num_classes, np.float32)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def _bias2d(x: Tensor, b: Tensor) -> Tensor:
    wide = ops.reshape(b, (1, b.data.shape[0], 1, 1))
    return ops.add(x, ops.broadcast_to(wide, x.data.shape))


def _bias3d(x: Tensor, b: Tensor) -> Tensor:
    wide = ops.reshape(b, (1, b.data.shape[0], 1, 1, 1))
    return ops.add(x, ops.broadcast_to(wide, x.data.shape))


class ReconModel:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = set(init_params(config, 0))
        if set(params) != expected:
            missing = expected - set(params)
            extra = set(params) - expected
            raise ContractError(f"parameter names mismatch: missing {sorted(missing)}, "
                                f"unexpected {sorted(extra)}")
        dtypes = {p.data.dtype for p in params.values()}
        if len(dtypes) != 1:
            raise ContractError(f"parameters mix dtypes: {sorted(map(str, dtypes))}")
        self.config = config
        self.params = params
        # Inputs are cast to the parameter dtype, so an all-float64 copy of
        # the parameters runs the whole forward pass in float64.
        self.dtype = dtypes.pop()

    @staticmethod
    def create(config: ModelConfig, seed: int = 0) -> "ReconModel":
        return ReconModel(config, init_params(config, seed))

    # -- encoder ------------------------------------------------------------------

    def encode(self, image: np.ndarray) -> tuple[Tensor, dict[int, Tensor]]:
        """Returns the seed volume and encoder planes keyed by resolution."""
        cfg = self.config
        if image.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"expected ({cfg.in_channels}, {cfg.image_size}, {cfg.image_size}) "
                f"image, got {image.shape}")
        x = Tensor(np.asarray(image, self.dtype)[None])
        planes: dict[int, Tensor] = {}
        p = self.params
        for i in range(len(cfg.enc_channels)):
            x = ops.leaky_relu(_bias2d(ops.conv2d(x, p[f"enc{i}a_w"],
                                                  stride=2, padding=1),
                                       p[f"enc{i}a_b"]))
            x = ops.leaky_relu(_bias2d(ops.conv2d(x, p[f"enc{i}b_w"],
                                                  stride=1, padding=1),
                                       p[f"enc{i}b_b"]))
            planes[cfg.image_size >> (i + 1)] = x
        n, c, h, w = x.data.shape
        seed = ops.reshape(x, (1, cfg.seed_channels, _SEED_RES, h, w))
        return seed, planes

    # -- ray-traced feature gather ----------------------------------------------

    def gather_skip(self, stage: int, plane: Tensor, grid: GridSpec,
                    camera: PinholeCamera) -> Tensor:
        """Project the stage's grid points into the image and sample features.

        Points follow (D, H, W) volume order so the result aligns with the
        decoder tensor layout.
        """
        p = self.params
        reduced = _bias2d(ops.conv2d(plane, p[f"skip{stage}_w"]),
                          p[f"skip{stage}_b"])
        k, he, we = reduced.data.shape[1:]
        pts = grid.positions().transpose(2, 1, 0, 3).reshape(-1, 3)
        uv, _ = camera.project_to_feature(pts, (we, he))
        feats = ops.bilinear_sample2d(ops.reshape(reduced, (k, he, we)),
                                      uv)                      # (M, K)
        d, h, w = grid.shape[2], grid.shape[1], grid.shape[0]
        return ops.reshape(ops.transpose(feats, (1, 0)), (1, k, d, h, w))

    # -- decoder ------------------------------------------------------------------

    def forward(self, image: np.ndarray, spec: GridSpec,
                camera: PinholeCamera) -> Tensor:
        """Class probabilities as (1, C, D, H, W), softmax over axis 1."""
        cfg = self.config
        if tuple(spec.shape) != tuple(cfg.grid_shape):
            raise ContractError(f"grid {tuple(spec.shape)} does not match model "
                                f"config {tuple(cfg.grid_shape)}")
        p = self.params
        x, planes = self.encode(image)
        off_frac = (spec.offset / spec.spacing).astype(self.dtype)
        for s in range(len(cfg.dec_channels)):
            x = _bias3d(ops.conv3d_transposed(x, p[f"up{s}_w"], stride=2),
                        p[f"up{s}_b"])
            r = x.data.shape[-1]
            parts = [x]
            if cfg.use_skips:
                stage_grid = DecoderGrid(spec, cfg.grid_shape[0] // r).spec
                parts.append(self.gather_skip(s, planes[r], stage_grid, camera))
            off = np.broadcast_to(off_frac[None, :, None, None, None],
                                  (1, 3, r, r, r))
            parts.append(Tensor(np.ascontiguousarray(off)))
            x = ops.concat(parts, axis=1)
            for m in range(cfg.mix_layers[s]):
                x = ops.leaky_relu(_bias3d(ops.conv3d(x, p[f"mix{s}{m}_w"],
                                                      stride=1, padding=1),
                                           p[f"mix{s}{m}_b"]))
        logits = _bias3d(ops.conv3d(x, p["head_w"]), p["head_b"])
        return ops.softmax(logits, axis=1)

    def predict_volume(self, image: np.ndarray, spec: GridSpec,
                       camera: PinholeCamera) -> VolumeGrid:
        """Inference convenience: detached probabilities as (W, H, D, C)."""
        probs = self.forward(image, spec, camera)
        vals = probs.data[0].transpose(3, 2, 1, 0)
        return VolumeGrid(spec, np.ascontiguousarray(vals))


def flatten_probs(probs: Tensor) -> Tensor:
    """(1, C, D, H, W) -> (D*H*W, C) keeping the graph, for the point losses."""
    n, c = probs.data.shape[:2]
    m = int(np.prod(probs.data.shape[2:]))
    moved = ops.transpose(probs, (0, 2, 3, 4, 1))
    return ops.reshape(moved, (m, c))


# -- checkpoints ---------------------------------------------------------------------

_CKPT_MAGIC = b"VWCK"


def save_checkpoint(path, model: ReconModel, adam: AdamState | None = None,
                    extra: dict | None = None) -> None:
    """Single-file checkpoint: JSON manifest + concatenated tensor records."""
    names = sorted(model.params)
    manifest = {
        "format": 1,
        "config": model.config.to_json(),
        "params": names,
        "extra": extra or {},
    }
    if adam is not None:
        manifest["adam_step"] = adam.step
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            write_tensor(fh, model.params[name].data)
        if adam is not None:
            for name in names:
                write_tensor(fh, adam.m[name])
            for name in names:
                write_tensor(fh, adam.v[name])


def load_checkpoint(path) -> tuple[ReconModel, AdamState | None, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ContractError(f"not a checkpoint file (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode("utf-8"))
        config = ModelConfig.from_json(manifest["config"])
        names = manifest["params"]
        params = {name: Tensor(read_tensor(fh), requires_grad=True)
                  for name in names}
        adam = None
        if "adam_step" in manifest:
            m = {name: read_tensor(fh) for name in names}
            v = {name: read_tensor(fh) for name in names}
            adam = AdamState(step=int(manifest["adam_step"]), m=m, v=v)
    model = ReconModel(config, params)
    return model, adam, manifest.get("extra", {})


def checkpoint_equal(a: ReconModel, b: ReconModel) -> bool:
    if a.config != b.config or set(a.params) != set(b.params):
        return False
    return all(np.array_equal(a.params[k].data, b.params[k].data)
               for k in a.params)
