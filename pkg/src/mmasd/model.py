"""Three-branch multimodal classifier.

A tubelet transformer reads the rendered mesh clip, a residual 3D CNN reads
the colorized flow clip and a stacked LSTM reads the skeleton sequence. The
three feature vectors are fused by cross-attention (skeleton features give
the keys, video features the queries and values) and two separate linear
heads predict the action class and the ASD label.

All inputs are batched: clips ``[B, C, F, H, W]``, skeletons ``[B, T, J*3]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mmasd import N_ACTIONS
from mmasd.autograd import functional as F
from mmasd.autograd.functional import AttentionWeights, BatchNormState
from mmasd.autograd.serialize import load_tensors, save_tensors
from mmasd.autograd.tensor import Parameter, Tensor, as_tensor
from mmasd.errors import ConfigurationError, DimensionError, ValidationError
from mmasd.preprocess import resize_planes, sample_frames

N_ASD = 2


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ViViTConfig:
    tubelet: int = 2
    patch: int = 10
    dim: int = 192
    heads: int = 12
    blocks: int = 4
    mlp_ratio: int = 2
    frames: int = 20
    image_size: int = 100
    channels: int = 3

    def __post_init__(self):
        if self.frames % self.tubelet:
            raise ConfigurationError(f"frame axis: {self.frames} frames not divisible by tubelet {self.tubelet}")
        if self.image_size % self.patch:
            raise ConfigurationError(f"spatial axes: size {self.image_size} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ConfigurationError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        if min(self.blocks, self.mlp_ratio, self.tubelet, self.patch) < 1:
            raise ConfigurationError("blocks, mlp_ratio, tubelet and patch must be >= 1")

    @property
    def tokens(self) -> int:
        return token_count(self.frames, self.image_size, self.image_size, self.tubelet, self.patch)


@dataclass
class Cnn3dConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    kernel: int = 3
    stage_stride: tuple = (2, 2, 2)
    frames: int = 40
    image_size: int = 100
    channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_stride = tuple(int(s) for s in self.stage_stride)
        if len(self.stage_channels) != 4:
            raise ConfigurationError(f"exactly 4 residual stages required, got {len(self.stage_channels)}")
        if self.kernel % 2 == 0 or self.blocks_per_stage < 1 or min(self.stage_channels) < 1:
            raise ConfigurationError("kernel must be odd; blocks and channels must be >= 1")


@dataclass
class LstmConfig:
    layers: int = 4
    hidden: int = 64
    joints: int = 33
    frames: int = 180

    def __post_init__(self):
        if min(self.layers, self.hidden, self.joints, self.frames) < 1:
            raise ConfigurationError("LSTM layers, hidden, joints and frames must be >= 1")

    @property
    def input_dim(self) -> int:
        return 3 * self.joints


@dataclass
class FusionConfig:
    dim: int = 128
    heads: int = 8
    w_action: float = 0.5
    w_asd: float = 0.5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"fusion dim {self.dim} not divisible by {self.heads} heads")
        if self.w_action < 0 or self.w_asd < 0:
            raise ConfigurationError("loss weights must be >= 0")


@dataclass
class ModelConfig:
    vivit: ViViTConfig = field(default_factory=ViViTConfig)
    cnn: Cnn3dConfig = field(default_factory=Cnn3dConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    n_actions: int = N_ACTIONS

    @classmethod
    def micro(cls, **fusion) -> "ModelConfig":
        """Desk-scale variant: 4/8 frames at 20x20, d=24, fusion dim 16, one 32-unit LSTM layer."""
        return cls(
            vivit=ViViTConfig(tubelet=2, patch=10, dim=24, heads=12, blocks=1, frames=4, image_size=20),
            cnn=Cnn3dConfig(stem_channels=4, stage_channels=(4, 8, 8, 16), frames=8, image_size=20),
            lstm=LstmConfig(layers=1, hidden=32),
            fusion=FusionConfig(dim=16, heads=8, **fusion),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(vivit=ViViTConfig(**d["vivit"]), cnn=Cnn3dConfig(**d["cnn"]), lstm=LstmConfig(**d["lstm"]),
                   fusion=FusionConfig(**d["fusion"]), n_actions=d.get("n_actions", N_ACTIONS))


# ---------------------------------------------------------------------------
# inputs


@dataclass
class Batch:
    mesh: np.ndarray       # [B, C, Fv, Hv, Wv] for the transformer
    flow: np.ndarray       # [B, C, Fc, Hc, Wc] for the CNN
    skeleton: np.ndarray   # [B, T, J*3]
    action: np.ndarray | None = None
    asd: np.ndarray | None = None

    def __len__(self) -> int:
        return self.mesh.shape[0]

    def subset(self, idx) -> "Batch":
        pick = lambda a: None if a is None else a[idx]
        return Batch(self.mesh[idx], self.flow[idx], self.skeleton[idx], pick(self.action), pick(self.asd))


def _fit_clip(clip: np.ndarray, frames: int, size: int) -> np.ndarray:
    clip = sample_frames(np.asarray(clip), frames)
    if clip.shape[-2:] != (size, size):
        clip = resize_planes(clip, size, size)
    return np.asarray(clip, dtype=np.float64)


def prepare_batch(samples: Sequence, cfg: ModelConfig) -> Batch:
    """Frame-sample and resize each modality to the model's input geometry."""
    if not samples:
        raise ValidationError("empty sample list")
    mesh = np.stack([_fit_clip(s.mesh_clip, cfg.vivit.frames, cfg.vivit.image_size) for s in samples])
    flow = np.stack([_fit_clip(s.flow_clip, cfg.cnn.frames, cfg.cnn.image_size) for s in samples])
    skel = np.stack([np.asarray(s.skeleton, dtype=np.float64) for s in samples])
    skel = skel.reshape(len(samples), skel.shape[1], -1)
    return Batch(mesh, flow, skel, np.array([s.action_label for s in samples]),
                 np.array([s.asd_label for s in samples]))


# ---------------------------------------------------------------------------
# stateless building blocks


def token_count(frames: int, height: int, width: int, tubelet: int, patch: int) -> int:
    return (frames // tubelet) * (height // patch) * (width // patch)


def tubelet_embed(clip, weight, bias, pos, tubelet: int, patch: int) -> Tensor:
    """Split ``[(B,) C, F, H, W]`` into T x P x P tubelets, project to ``d`` and add positions.

    Tokens are ordered time-major then row then column; each tubelet is
    flattened in (C, T, P, P) order to length ``C T P^2``.
    """
    x = as_tensor(clip)
    batched = x.ndim == 5
    if not batched:
        x = x.reshape(1, *x.shape)
    b, c, f, h, w = x.shape
    for axis, n, k in (("frame", f, tubelet), ("height", h, patch), ("width", w, patch)):
        if n % k:
            raise ConfigurationError(f"{axis} axis: extent {n} not divisible by {k}")
    nt, nh, nw = f // tubelet, h // patch, w // patch
    x = x.reshape(b, c, nt, tubelet, nh, patch, nw, patch)
    x = x.transpose(0, 2, 4, 6, 1, 3, 5, 7)
    x = x.reshape(b, nt * nh * nw, c * tubelet * patch * patch)
    tokens = F.linear(x, weight, bias)
    if pos.shape != tokens.shape[1:]:
        raise DimensionError(f"positional table {pos.shape} does not match tokens {tokens.shape[1:]}")
    tokens = tokens + pos
    return tokens if batched else tokens[0]


@dataclass
class ModelOutput:
    action_logits: Tensor
    asd_logits: Tensor
    fused: Tensor
    attention: dict = field(default_factory=dict)  # name -> attention weights (numpy)


def combined_loss(out: ModelOutput, action_label, asd_label, w_action: float = 0.5,
                  w_asd: float = 0.5) -> Tensor:
    """``w_action * CE(action) + w_asd * CE(asd)``; zero-weight terms are left out of the graph."""
    terms = []
    if w_action:
        terms.append(F.cross_entropy(out.action_logits, action_label) * w_action)
    if w_asd:
        terms.append(F.cross_entropy(out.asd_logits, asd_label) * w_asd)
    if not terms:
        raise ConfigurationError("at least one loss weight must be positive")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


# ---------------------------------------------------------------------------
# the model


class MultimodalModel:
    """Parameters live in ``self.params`` keyed by dotted names; batch-norm statistics in ``self.bn``."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._rng = np.random.default_rng(seed)
        self._build()

    # -- construction ------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter {name}")
        p = Parameter(data, name)
        self.params[name] = p
        return p

    def _uniform(self, name: str, shape: tuple, fan_in: int) -> Parameter:
        bound = math.sqrt(1.0 / fan_in)
        return self._add(name, self._rng.uniform(-bound, bound, shape))

    def _linear(self, name: str, d_in: int, d_out: int) -> None:
        self._uniform(f"{name}.w", (d_in, d_out), d_in)
        self._add(f"{name}.b", np.zeros(d_out))

    def _norm(self, name: str, d: int) -> None:
        self._add(f"{name}.gamma", np.ones(d))
        self._add(f"{name}.beta", np.zeros(d))

    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> None:
        self._uniform(f"{name}.w", (c_out, c_in, k, k, k), c_in * k ** 3)

    def _bn(self, name: str, c: int) -> None:
        self._norm(name, c)
        self.bn[name] = BatchNormState()

    def _attention(self, name: str, d: int) -> None:
        for p in ("q", "k", "v", "o"):
            self._linear(f"{name}.{p}", d, d)

    def _build(self) -> None:
        v, c, l, fu = self.cfg.vivit, self.cfg.cnn, self.cfg.lstm, self.cfg.fusion
        # transformer branch
        self._linear("vivit.embed", v.channels * v.tubelet * v.patch ** 2, v.dim)
        self._add("vivit.pos", self._rng.normal(0.0, 0.02, (v.tokens, v.dim)))
        for i in range(v.blocks):
            blk = f"vivit.block{i}"
            self._norm(f"{blk}.ln1", v.dim)
            self._attention(f"{blk}.attn", v.dim)
            self._norm(f"{blk}.ln2", v.dim)
            self._linear(f"{blk}.mlp1", v.dim, v.mlp_ratio * v.dim)
            self._linear(f"{blk}.mlp2", v.mlp_ratio * v.dim, v.dim)
        self._norm("vivit.ln_out", v.dim)
        self._linear("vivit.proj", v.dim, fu.dim)
        # CNN branch
        self._conv("cnn.stem", c.channels, c.stem_channels, c.kernel)
        self._bn("cnn.stem_bn", c.stem_channels)
        c_in = c.stem_channels
        for s, c_out in enumerate(c.stage_channels):
            for bi in range(c.blocks_per_stage):
                blk = f"cnn.stage{s}.block{bi}"
                self._conv(f"{blk}.conv1", c_in, c_out, c.kernel)
                self._bn(f"{blk}.bn1", c_out)
                self._conv(f"{blk}.conv2", c_out, c_out, c.kernel)
                self._bn(f"{blk}.bn2", c_out)
                if bi == 0:  # entry block changes resolution, so it always projects
                    self._conv(f"{blk}.short", c_in, c_out, 1)
                    self._bn(f"{blk}.short_bn", c_out)
                c_in = c_out
        self._linear("cnn.fc", c_in, fu.dim)
        # LSTM branch
        d_in = l.input_dim
        for i in range(l.layers):
            self._uniform(f"lstm.layer{i}.w_x", (d_in, 4 * l.hidden), d_in)
            self._uniform(f"lstm.layer{i}.w_h", (l.hidden, 4 * l.hidden), l.hidden)
            self._add(f"lstm.layer{i}.b", np.zeros(4 * l.hidden))
            d_in = l.hidden
        self._linear("lstm.fc", l.hidden, fu.dim)
        # fusion and heads
        self._linear("fusion.proj_q", fu.dim, fu.dim)
        self._linear("fusion.proj_k1", fu.dim, fu.dim)
        self._linear("fusion.proj_k2", fu.dim, fu.dim)
        self._attention("fusion.attn", fu.dim)
        self._norm("fusion.norm", 2 * fu.dim)
        self._linear("head_action", 2 * fu.dim, self.cfg.n_actions)
        self._linear("head_asd", 2 * fu.dim, N_ASD)

    # -- helpers -----------------------------------------------------------

    def p(self, name: str) -> Parameter:
        return self.params[name]

    def group(self, prefix: str) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _lin(self, name: str, x) -> Tensor:
        return F.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _ln(self, name: str, x) -> Tensor:
        return F.layer_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def _bnorm(self, name: str, x, training: bool) -> Tensor:
        return F.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn[name],
                            training, channel_axis=1)

    def _attn_weights(self, name: str) -> AttentionWeights:
        g = lambda s: self.params[f"{name}.{s}"]
        return AttentionWeights(g("q.w"), g("q.b"), g("k.w"), g("k.b"), g("v.w"), g("v.b"), g("o.w"), g("o.b"))

    # -- branches ----------------------------------------------------------

    def vivit_encode(self, clip, attention: dict | None = None) -> Tensor:
        """``[B, C, F, H, W]`` mesh clips to ``[B, d_f]`` features."""
        v = self.cfg.vivit
        clip = np.asarray(clip.data if isinstance(clip, Tensor) else clip)
        expect = (v.channels, v.frames, v.image_size, v.image_size)
        if clip.ndim != 5 or clip.shape[1:] != expect:
            raise DimensionError(f"transformer input must be [B, {', '.join(map(str, expect))}], got {clip.shape}")
        # per-clip standardization: rendered meshes are mostly constant background
        mu = clip.mean(axis=(1, 2, 3, 4), keepdims=True)
        sd = clip.std(axis=(1, 2, 3, 4), keepdims=True)
        clip = (clip - mu) / np.maximum(sd, 1e-6)
        x = tubelet_embed(Tensor(clip), self.p("vivit.embed.w"), self.p("vivit.embed.b"), self.p("vivit.pos"),
                          v.tubelet, v.patch)
        for i in range(v.blocks):
            blk = f"vivit.block{i}"
            h = self._ln(f"{blk}.ln1", x)
            a, w = F.multi_head_attention(h, h, h, v.heads, self._attn_weights(f"{blk}.attn"), return_weights=True)
            if attention is not None:
                attention[blk] = w.data
            x = x + a
            h = self._ln(f"{blk}.ln2", x)
            x = x + self._lin(f"{blk}.mlp2", F.relu(self._lin(f"{blk}.mlp1", h)))
        x = self._ln("vivit.ln_out", x)
        return self._lin("vivit.proj", x.mean(axis=1))

    def _residual_block(self, name: str, x: Tensor, stride, training: bool, project: bool) -> Tensor:
        pad = self.cfg.cnn.kernel // 2
        h = F.conv3d(x, self.p(f"{name}.conv1.w"), stride=stride, padding=pad)
        h = F.relu(self._bnorm(f"{name}.bn1", h, training))
        h = F.conv3d(h, self.p(f"{name}.conv2.w"), stride=1, padding=pad)
        h = self._bnorm(f"{name}.bn2", h, training)
        if project:
            s = F.conv3d(x, self.p(f"{name}.short.w"), stride=stride)
            s = self._bnorm(f"{name}.short_bn", s, training)
        else:
            s = x
        return F.relu(h + s)

    def cnn_encode(self, clip, training: bool) -> Tensor:
        """``[B, C, F, H, W]`` flow clips to ``[B, d_f]`` features."""
        c = self.cfg.cnn
        clip = np.asarray(clip.data if isinstance(clip, Tensor) else clip)
        expect = (c.channels, c.frames, c.image_size, c.image_size)
        if clip.ndim != 5 or clip.shape[1:] != expect:
            raise DimensionError(f"CNN input must be [B, {', '.join(map(str, expect))}], got {clip.shape}")
        x = F.conv3d(Tensor(clip), self.p("cnn.stem.w"), stride=(1, 2, 2), padding=c.kernel // 2)
        x = F.relu(self._bnorm("cnn.stem_bn", x, training))
        x = F.maxpool3d(x, 2)
        for s in range(4):
            for bi in range(c.blocks_per_stage):
                stride = c.stage_stride if bi == 0 else 1
                x = self._residual_block(f"cnn.stage{s}.block{bi}", x, stride, training, project=bi == 0)
        return self._lin("cnn.fc", F.global_avg_pool(x))

    def lstm_encode(self, skeleton) -> Tensor:
        """``[B, T, J*3]`` (or ``[B, T, J, 3]``) skeletons to ``[B, d_f]`` via the top layer's last state."""
        l = self.cfg.lstm
        seq = np.asarray(skeleton.data if isinstance(skeleton, Tensor) else skeleton, dtype=np.float64)
        if seq.ndim == 4:
            seq = seq.reshape(*seq.shape[:2], -1)
        if seq.ndim != 3 or seq.shape[1:] != (l.frames, l.input_dim):
            raise DimensionError(f"skeleton input must be [B, {l.frames}, {l.input_dim}], got {seq.shape}")
        b = seq.shape[0]
        inputs: list = [Tensor(seq[:, t]) for t in range(l.frames)]
        for i in range(l.layers):
            wx, wh, bias = (self.p(f"lstm.layer{i}.{n}") for n in ("w_x", "w_h", "b"))
            h = c = Tensor(np.zeros((b, l.hidden)))
            outs = []
            for x_t in inputs:
                h, c = F.lstm_step(x_t, h, c, wx, wh, bias)
                outs.append(h)
            inputs = outs
        return self._lin("lstm.fc", inputs[-1])

    def fuse(self, f_vivit, f_cnn, f_lstm, attention: dict | None = None) -> Tensor:
        """Cross-attention over two tokens; returns the concatenated outputs ``[B, 2 d_f]``."""
        fu = self.cfg.fusion
        qv = F.stack([self._lin("fusion.proj_q", f_vivit), self._lin("fusion.proj_q", f_cnn)], axis=-2)
        k = F.stack([self._lin("fusion.proj_k1", f_lstm), self._lin("fusion.proj_k2", f_lstm)], axis=-2)
        out, w = F.multi_head_attention(qv, k, qv, fu.heads, self._attn_weights("fusion.attn"), return_weights=True)
        if attention is not None:
            attention["fusion"] = w.data
        return out.reshape(*out.shape[:-2], 2 * fu.dim)

    def classify(self, fused) -> tuple[Tensor, Tensor]:
        return self._lin("head_action", fused), self._lin("head_asd", fused)

    # -- full model --------------------------------------------------------

    def forward(self, batch: Batch, training: bool | str = False) -> ModelOutput:
        if isinstance(training, str):
            if training not in ("train", "eval"):
                raise ConfigurationError(f"mode must be 'train' or 'eval', got {training!r}")
            training = training == "train"
        attn: dict = {}
        fv = self.vivit_encode(batch.mesh, attn)
        fc = self.cnn_encode(batch.flow, training)
        fl = self.lstm_encode(batch.skeleton)
        fused = self.fuse(fv, fc, fl, attn)
        # fused features start out tiny; normalizing them lets the heads learn at a usable rate
        a, s = self.classify(self._ln("fusion.norm", fused))
        return ModelOutput(a, s, fused, attn)

    def forward_samples(self, samples: Sequence, training: bool | str = False) -> ModelOutput:
        return self.forward(prepare_batch(samples, self.cfg), training)

    def loss(self, batch: Batch, training: bool = True, weights: tuple[float, float] | None = None):
        wa, ws = weights if weights is not None else (self.cfg.fusion.w_action, self.cfg.fusion.w_asd)
        out = self.forward(batch, training)
        return combined_loss(out, batch.action, batch.asd, wa, ws), out

    # -- checkpoints -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {n: p.data for n, p in self.params.items()}
        for n, st in self.bn.items():
            if st.initialized:
                arrays[f"bnstat.{n}.mean"] = st.running_mean
                arrays[f"bnstat.{n}.var"] = st.running_var
        return arrays

    def save(self, directory, extra: dict | None = None):
        meta = {"config": self.cfg.to_dict(), "seed": self.seed,
                "bn_batches": {n: st.num_batches for n, st in self.bn.items()}}
        meta.update(extra or {})
        return save_tensors(directory, self.state_arrays(), meta)

    @classmethod
    def load(cls, directory) -> "MultimodalModel":
        arrays, manifest = load_tensors(directory)
        if "config" not in manifest:
            raise ValidationError(f"{directory}: checkpoint manifest has no config", "checkpoint")
        model = cls(ModelConfig.from_dict(manifest["config"]), seed=manifest.get("seed", 0))
        for name, p in model.params.items():
            if name not in arrays:
                raise ValidationError(f"{directory}: missing parameter {name}", "checkpoint")
            if arrays[name].shape != p.shape:
                raise ValidationError(f"{directory}: {name} has shape {arrays[name].shape}, expected {p.shape}",
                                      "checkpoint")
            p.data[...] = arrays[name]
        for name, st in model.bn.items():
            if f"bnstat.{name}.mean" in arrays:
                st.running_mean = arrays[f"bnstat.{name}.mean"].copy()
                st.running_var = arrays[f"bnstat.{name}.var"].copy()
                st.num_batches = manifest.get("bn_batches", {}).get(name, 1)
        return model
