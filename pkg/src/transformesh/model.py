"""Model assembly: shared spiral mesh encoder/decoder around a temporal core.

Three variants share one prediction interface:

* ``transformesh`` -- bidirectional transformer over per-visit latents (TTM/STM/BTM presets)
* ``fcbn`` -- fully connected bottleneck over the concatenated latents (no temporal modeling)
* ``meshae`` -- plain mesh autoencoder, reconstructs each shape from its own latent
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, ValidationError
from .hierarchy import MeshHierarchy
from .layers import Linear, Module, SpiralConv, TransformerEncoder, pool, unpool

OBSERVED, MISSING, AUGMENTED = 0, 1, 2
STATUS_NAMES = {OBSERVED: "observed", MISSING: "missing", AUGMENTED: "augmented"}

PRESET_DEPTHS = {"ttm": 1, "stm": 3, "btm": 12}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "transformesh"
    depth: int = 1
    width: int = 64
    heads: int = 4
    n_slots: int = 8
    channels: tuple = (16, 32)
    spiral_length: int = 9
    factors: tuple = (4, 4)
    mlp_ratio: int = 4
    final_norm: bool = True
    stop_grad_reference: bool = False
    seed: int = 0
    preset: str = ""

    def __post_init__(self):
        if self.variant not in ("transformesh", "fcbn", "meshae"):
            raise ConfigError(f"unknown variant {self.variant!r}", key="variant")
        if self.n_slots < 2:
            raise ConfigError("n_slots (S) must be >= 2", key="n_slots")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}", key="heads")
        if len(self.channels) != len(self.factors):
            raise ConfigError("need one encoder channel count per pooling level", key="channels")
        if self.preset in PRESET_DEPTHS and self.depth != PRESET_DEPTHS[self.preset]:
            raise ConfigError(f"preset {self.preset} requires depth {PRESET_DEPTHS[self.preset]}", key="depth")

    @classmethod
    def preset_config(cls, name: str, scale: str = "desk", **overrides) -> "ModelConfig":
        """Named presets: ttm/stm/btm (transformesh), fcbn, meshae at desk or full scale."""
        name = name.lower()
        base = {"desk": dict(width=64, heads=4), "full": dict(width=512, heads=8)}[scale]
        if name in PRESET_DEPTHS:
            base.update(variant="transformesh", depth=PRESET_DEPTHS[name], preset=name)
        elif name in ("fcbn", "meshae"):
            base.update(variant=name, depth=0, preset=name)
        else:
            raise ConfigError(f"unknown preset {name!r}", key="preset")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                continue
            if k in ("channels", "factors"):
                v = tuple(int(x) for x in (v.split(",") if isinstance(v, str) else v))
            kwargs[k] = v
        return cls(**kwargs)


@dataclass
class SequenceBatch:
    """One subject's visit slots.

    ``inputs`` is what the network may see; ``targets`` holds the true shapes
    used by the loss. For missing slots both may hold anything -- they are
    never read.
    """

    reference: np.ndarray  # (N, 3), the baseline scan
    inputs: np.ndarray  # (S, N, 3)
    targets: np.ndarray  # (S, N, 3)
    status: np.ndarray  # (S,) of OBSERVED / MISSING / AUGMENTED
    months: np.ndarray  # (S,)
    subject_id: str = ""

    def __post_init__(self):
        self.status = np.asarray(self.status, dtype=np.int64)
        if self.status[0] != OBSERVED:
            raise ValidationError("slot 0 must be observed (it is the reference)")
        if self.inputs.shape != self.targets.shape or self.inputs.shape[0] != len(self.status):
            raise ShapeError(f"inputs {self.inputs.shape}, targets {self.targets.shape}, status {self.status.shape}")

    @property
    def n_slots(self) -> int:
        return len(self.status)

    @property
    def key_mask(self) -> np.ndarray:
        return self.status == MISSING

    def encoder_inputs(self) -> np.ndarray:
        """Inputs with every missing slot replaced by the reference."""
        x = np.array(self.inputs, dtype=np.float64, copy=True)
        x[self.key_mask] = self.reference
        return x

    def with_status(self, status, inputs=None) -> "SequenceBatch":
        return replace(self, status=np.asarray(status), inputs=self.inputs if inputs is None else inputs)

    @classmethod
    def from_visits(cls, reference, visits: dict, months, subject_id: str = "") -> "SequenceBatch":
        """Build from ``{month: vertices}``; months absent from ``visits`` are missing."""
        reference = np.asarray(reference, dtype=np.float64)
        s = len(months)
        arr = np.zeros((s,) + reference.shape)
        status = np.full(s, MISSING)
        for k, m in enumerate(months):
            if m in visits:
                arr[k] = visits[m]
                status[k] = OBSERVED
        return cls(reference, arr, arr.copy(), status, np.asarray(months), subject_id)


class MeshEncoder(Module):
    """Spiral conv + pool per level, flatten, affine to the latent width."""

    def __init__(self, hierarchy: MeshHierarchy, channels, width: int, rng: np.random.Generator, in_channels: int = 3):
        self.hierarchy = hierarchy
        self.convs = []
        c = in_channels
        for k, c_out in enumerate(channels):
            self.convs.append(SpiralConv(hierarchy.levels[k].spirals, c, c_out, rng))
            c = c_out
        self.n_coarse = hierarchy.levels[len(channels)].mesh.n_vertices
        self.c_last = c
        self.fc = Linear(self.n_coarse * c, width, rng)

    def forward(self, x):
        x = ad._as_tensor(x)
        n0 = self.hierarchy.levels[0].mesh.n_vertices
        if x.ndim < 2 or x.shape[-2:] != (n0, 3):
            raise ShapeError(f"encode_mesh: expected (..., {n0}, 3) vertices, got {x.shape}")
        for k, conv in enumerate(self.convs):
            x = pool(conv(x), self.hierarchy.levels[k].down)
        x = ad.reshape(x, x.shape[:-2] + (self.n_coarse * self.c_last,))
        return self.fc(x)


class MeshDecoder(Module):
    """Affine to the coarsest level, then unpool + spiral conv up to a 3-channel field.

    The last convolution is zero-initialized so an untrained decoder outputs a
    zero deformation.
    """

    def __init__(self, hierarchy: MeshHierarchy, channels, width: int, rng: np.random.Generator, out_channels: int = 3):
        self.hierarchy = hierarchy
        n_pool = len(channels)
        self.n_coarse = hierarchy.levels[n_pool].mesh.n_vertices
        self.c_first = channels[-1]
        self.fc = Linear(width, self.n_coarse * self.c_first, rng)
        # mirrors the encoder: first deblock keeps the width, later ones step channels down
        self.convs = []
        for i, k in enumerate(reversed(range(n_pool))):
            c_in = channels[-1] if i == 0 else channels[-i]
            c_out = channels[-1] if i == 0 else channels[-i - 1]
            self.convs.append(SpiralConv(hierarchy.levels[k].spirals, c_in, c_out, rng))
        self.head = SpiralConv(
            hierarchy.levels[0].spirals, channels[0], out_channels, rng, activation="identity", zero_init=True
        )

    def forward(self, z):
        z = ad._as_tensor(z)
        x = ad.reshape(self.fc(z), z.shape[:-1] + (self.n_coarse, self.c_first))
        n_pool = len(self.convs)
        for i, conv in enumerate(self.convs):
            level = n_pool - 1 - i
            x = conv(unpool(x, self.hierarchy.levels[level].up))
        return self.head(x)


class _MLPBlock(Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, rng):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def forward(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class _TemporalModel(Module):
    """Shared encode -> core -> decode path; subclasses define ``core``."""

    def __init__(self, config: ModelConfig, hierarchy: MeshHierarchy):
        self.config = config
        self.hierarchy = hierarchy
        rng = np.random.default_rng(config.seed)
        self.encoder = MeshEncoder(hierarchy, config.channels, config.width, rng)
        self._build_core(rng)
        self.decoder = MeshDecoder(hierarchy, config.channels, config.width, rng)
        self.input_hook = None  # test instrumentation: called with the encoder input array

    def _build_core(self, rng):
        raise NotImplementedError

    def core(self, z: Tensor, key_mask: np.ndarray) -> Tensor:
        raise NotImplementedError

    def encode_mesh(self, vertices):
        return self.encoder(vertices)

    def decode_deformation(self, latent):
        return self.decoder(latent)

    def latents(self, batch: SequenceBatch) -> Tensor:
        """Per-slot latents ``(S, D)``; missing slots get the reference encoding.

        Slots whose encoder input is the reference (missing, augmented, slot 0)
        share a single encoder pass.
        """
        x = batch.encoder_inputs()
        if self.input_hook is not None:
            self.input_hook(x)
        uses_ref = (batch.status != OBSERVED) | (np.arange(batch.n_slots) == 0)
        distinct = [0] + [t for t in range(1, batch.n_slots) if not uses_ref[t]]
        slot_to_row = np.zeros(batch.n_slots, dtype=np.int64)
        slot_to_row[distinct] = np.arange(len(distinct))
        z = self.encoder(x[distinct])
        z = z[slot_to_row] if len(distinct) < batch.n_slots else z
        if self.config.stop_grad_reference and batch.key_mask.any():
            keep = np.broadcast_to((~batch.key_mask).astype(np.float64)[:, None], z.shape)
            z = z * keep + Tensor(z.data * (1.0 - keep))
        return z

    def forward(self, batch: SequenceBatch, slots=None) -> Tensor:
        """Predicted vertices, reference + decoded deformation.

        Returns ``(S, N, 3)``, or ``(len(slots), N, 3)`` when ``slots`` selects
        which slot outputs to decode.
        """
        if batch.n_slots != self.config.n_slots:
            raise ShapeError(f"batch has {batch.n_slots} slots, model expects {self.config.n_slots}")
        h = self.core(self.latents(batch), batch.key_mask)
        if slots is not None:
            h = h[np.asarray(slots, dtype=np.int64)]
        return self.decoder(h) + batch.reference

    def predict(self, batch: SequenceBatch, slots=None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(batch, slots).data


class TransforMesh(_TemporalModel):
    def _build_core(self, rng):
        c = self.config
        self.transformer = TransformerEncoder(c.depth, c.width, c.heads, c.n_slots, rng, c.mlp_ratio, c.final_norm)

    def core(self, z, key_mask):
        return self.transformer(z, key_mask)


class FCBN(_TemporalModel):
    """Concatenate the S latents and squeeze them through an S-wide bottleneck.

    Three MLP blocks (Linear-GELU-Linear, hidden width D) map
    ``S*D -> S -> S -> S*D``; the sequence length is baked into the weights.
    """

    def _build_core(self, rng):
        s, d = self.config.n_slots, self.config.width
        self.blocks = [_MLPBlock(s * d, d, s, rng), _MLPBlock(s, d, s, rng), _MLPBlock(s, d, s * d, rng)]

    def core(self, z, key_mask):
        s, d = self.config.n_slots, self.config.width
        if z.shape[-2] != s:
            raise ShapeError(f"FCBN is built for S={s}, got {z.shape[-2]} slots")
        x = ad.reshape(z, z.shape[:-2] + (1, s * d))
        for block in self.blocks:
            x = block(x)
        return ad.reshape(x, z.shape)


class MeshAE(Module):
    """Reconstruct each mesh as template + decode(encode(mesh)); no temporal path."""

    def __init__(self, config: ModelConfig, hierarchy: MeshHierarchy):
        self.config = config
        self.hierarchy = hierarchy
        rng = np.random.default_rng(config.seed)
        self.encoder = MeshEncoder(hierarchy, config.channels, config.width, rng)
        self.decoder = MeshDecoder(hierarchy, config.channels, config.width, rng)
        self.template = hierarchy.levels[0].mesh.vertices

    def encode_mesh(self, vertices):
        return self.encoder(vertices)

    def decode_deformation(self, latent):
        return self.decoder(latent)

    def forward(self, vertices) -> Tensor:
        return self.decoder(self.encoder(vertices)) + self.template

    def reconstruct(self, vertices) -> np.ndarray:
        with ad.no_grad():
            return self.forward(np.asarray(vertices, dtype=np.float64)).data


class CopyReference:
    """Degenerate predictor: the reference mesh at every slot."""

    config = None

    def predict(self, batch: SequenceBatch, slots=None) -> np.ndarray:
        n = batch.n_slots if slots is None else len(slots)
        return np.broadcast_to(batch.reference, (n,) + batch.reference.shape).copy()


def build_model(config: ModelConfig, hierarchy: MeshHierarchy):
    if config.variant == "transformesh":
        return TransforMesh(config, hierarchy)
    if config.variant == "fcbn":
        return FCBN(config, hierarchy)
    return MeshAE(config, hierarchy)
