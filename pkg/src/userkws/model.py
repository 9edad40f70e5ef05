"""DS-CNN backbones with a speaker-embedding table fused before the classifier."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .audio import FeatureStats
from .tensor import Parameter, Tensor

SIZES = {"S": (64, 4), "M": (172, 4), "L": (276, 5)}
FUSIONS = ("none", "add", "mul", "concat-bc", "concat-cc")
POLICIES = ("embedding-only", "classifier-only", "backbone-only", "full")
INPUT_SHAPE = (49, 10)
FIRST_KERNEL = (10, 4)
FIRST_STRIDE = (2, 2)
FIRST_PADDING = (5, 1)


class ConfigError(ValueError):
    pass


class UnknownSpeakerError(KeyError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    size: str = "S"
    num_classes: int = 10
    fusion: str = "mul"
    embedding_width: int | None = None  # derived from size/fusion when None
    input_shape: tuple = INPUT_SHAPE

    @property
    def channels(self):
        return SIZES[self.size][0]

    @property
    def blocks(self):
        return SIZES[self.size][1]

    @property
    def width(self):
        """Embedding row width n (0 without fusion)."""
        if self.fusion == "none":
            return 0
        if self.embedding_width is not None:
            return self.embedding_width
        return self.channels // 4 if self.fusion == "concat-cc" else self.channels

    @property
    def pooled_width(self):
        """Channels leaving the backbone (reduced under CC concatenation)."""
        return self.channels - self.width if self.fusion == "concat-cc" else self.channels

    @property
    def classifier_width(self):
        return 2 * self.channels if self.fusion == "concat-bc" else self.channels

    def validate(self):
        if self.size not in SIZES:
            raise ConfigError(f"size must be one of {sorted(SIZES)}, got {self.size!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        n, c = self.width, self.channels
        if self.fusion in ("add", "mul", "concat-bc") and n != c:
            raise ConfigError(f"{self.fusion} fusion needs embedding width {c}, got {n}")
        if self.fusion == "concat-cc" and not 0 < n < c:
            raise ConfigError(f"concat-cc embedding width must be in (0, {c}), got {n}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d.get("input_shape", INPUT_SHAPE))
        return cls(**d)


@dataclass(frozen=True)
class ConvSpec:
    """One convolution (+ batchnorm + ReLU) of the backbone."""

    name: str
    kind: str  # "conv" or "depthwise"
    kernel: tuple
    in_channels: int
    out_channels: int
    stride: tuple
    padding: tuple
    in_hw: tuple
    out_hw: tuple


def _out(hw, k, s, p):
    return tuple((hw[i] + 2 * p[i] - k[i]) // s[i] + 1 for i in range(2))


def layer_plan(config: ModelConfig):
    """The backbone's convolutions in order, with their spatial extents."""
    c, hw = config.channels, tuple(config.input_shape)
    out_hw = _out(hw, FIRST_KERNEL, FIRST_STRIDE, FIRST_PADDING)
    plan = [ConvSpec("conv0", "conv", FIRST_KERNEL, 1, c, FIRST_STRIDE, FIRST_PADDING, hw, out_hw)]
    hw = out_hw
    for b in range(1, config.blocks + 1):
        plan.append(ConvSpec(f"dw{b}", "depthwise", (3, 3), c, c, (1, 1), (1, 1), hw, hw))
        last = b == config.blocks
        co = config.pooled_width if last else c
        plan.append(ConvSpec(f"pw{b}", "conv", (1, 1), c, co, (1, 1), (0, 0), hw, hw))
    return plan


class EmbeddingTable:
    """Speaker id -> row of a (rows, n) trainable matrix. Rows are append-only."""

    def __init__(self, width, dtype=np.float32):
        self.width = width
        self.ids = []
        self.rows = {}
        self.weight = Parameter(np.zeros((0, width)), dtype=dtype, name="embedding")

    def __len__(self):
        return len(self.ids)

    def __contains__(self, speaker):
        return speaker in self.rows

    def lookup(self, speakers):
        try:
            return np.array([self.rows[s] for s in speakers], dtype=np.int64)
        except KeyError as exc:
            raise UnknownSpeakerError(f"speaker {exc.args[0]!r} is not registered") from None

    def append(self, speaker, row):
        if speaker in self.rows:
            raise ValueError(f"speaker {speaker!r} already registered")
        self.rows[speaker] = len(self.ids)
        self.ids.append(speaker)
        row = np.asarray(row, dtype=self.weight.data.dtype).reshape(1, self.width)
        self.weight.data = np.concatenate([self.weight.data, row])
        self.weight.grad = None
        self.weight.state = None
        return self.rows[speaker]


def fuse(activation, user, mode):
    """Combine the pooled backbone vector with the speaker's embedding row."""
    if mode == "none":
        return activation
    if mode == "add":
        return T.add(activation, user)
    if mode == "mul":
        return T.mul(activation, user)
    if mode in ("concat-bc", "concat-cc"):
        return T.concat(activation, user)
    raise ConfigError(f"unknown fusion {mode!r}")


class KwsModel:
    """Backbone, speaker-embedding table and affine classifier.

    ``params`` holds every trainable tensor except the embedding table, keyed by
    blob name; ``buffers`` holds batchnorm running statistics.
    """

    def __init__(self, config: ModelConfig, vocabulary=None, stats=None):
        self.config = config.validate()
        self.vocabulary = list(vocabulary) if vocabulary else [str(i) for i in range(config.num_classes)]
        self.stats = stats or FeatureStats.identity(config.input_shape[1])
        self.plan = layer_plan(config)
        self.params = {}
        self.buffers = {}
        self.embedding = EmbeddingTable(config.width)
        self.policy = "full"
        self.active_speaker = None

    # parameters -----------------------------------------------------------
    def named_parameters(self):
        yield from self.params.items()
        if self.config.fusion != "none":
            yield "embedding", self.embedding.weight

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def backbone_parameters(self):
        return [p for k, p in self.params.items() if not k.startswith("classifier.")]

    def classifier_parameters(self):
        return [self.params["classifier.weight"], self.params["classifier.bias"]]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    @property
    def backbone_frozen(self):
        return not any(p.trainable for p in self.backbone_parameters())

    # forward --------------------------------------------------------------
    def backbone(self, x, training=False):
        """(N, H, W, 1) features -> pooled (N, C') tensor.

        Batchnorm uses batch statistics only when training with a trainable
        backbone; running statistics stay frozen otherwise.
        """
        bn_train = training and not self.backbone_frozen
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.params["conv0.weight"].dtype)
        for spec in self.plan:
            p = spec.name
            if spec.kind == "conv":
                h = T.conv2d(h, self.params[f"{p}.weight"], self.params[f"{p}.bias"], spec.stride, spec.padding)
            else:
                h = T.depthwise_conv2d(h, self.params[f"{p}.weight"], self.params[f"{p}.bias"],
                                       spec.stride, spec.padding)
            h = T.batchnorm(h, self.params[f"{p}.bn.gamma"], self.params[f"{p}.bn.beta"], bn_train,
                            self.buffers[f"{p}.bn.running_mean"], self.buffers[f"{p}.bn.running_var"])
            h = T.relu(h)
        return T.avgpool_global(h)

    def user_features(self, speakers):
        rows = self.embedding.lookup(speakers)
        return T.embedding(self.embedding.weight, rows)

    def head(self, pooled, speakers=None, user=None):
        """Fuse the pooled activations with user features and classify."""
        if self.config.fusion != "none":
            if user is None:
                user = self.user_features(speakers)
            pooled = fuse(pooled, user, self.config.fusion)
        return T.linear(pooled, self.params["classifier.weight"], self.params["classifier.bias"])

    def forward(self, features, speakers, training=False):
        return self.head(self.backbone(features, training), speakers)

    __call__ = forward

    def identity_row(self):
        """Initial row for a new speaker: the fusion identity (ones for mul,
        zeros for add) or, for concatenation, the mean of existing rows."""
        n, mode = self.config.width, self.config.fusion
        dtype = self.embedding.weight.dtype
        if mode == "mul":
            return np.ones(n, dtype)
        if mode in ("concat-bc", "concat-cc") and len(self.embedding):
            return self.embedding.weight.data.mean(axis=0).astype(dtype)
        return np.zeros(n, dtype)

    def add_speaker(self, speaker, row=None):
        return self.embedding.append(speaker, self.identity_row() if row is None else row)

    def copy(self):
        return copy.deepcopy(self)

    # state ----------------------------------------------------------------
    def state_dict(self):
        """Name -> array for every parameter and buffer (copies)."""
        out = {k: p.data.copy() for k, p in self.named_parameters()}
        out.update({k: b.copy() for k, b in self.buffers.items()})
        return out

    def load_state_dict(self, state):
        for k, p in self.named_parameters():
            p.data = state[k].copy()
        for k in self.buffers:
            self.buffers[k][...] = state[k]


def _init_conv(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_model(config: ModelConfig, seed=0, vocabulary=None, speakers=(), stats=None,
                embedding_noise=0.01, dtype=np.float32) -> KwsModel:
    """Seeded DS-CNN with He-normal convolutions, zero biases, unit batchnorm
    scale, and one embedding row per entry of ``speakers`` (fusion identity plus
    Gaussian noise of std ``embedding_noise``)."""
    model = KwsModel(config, vocabulary, stats)
    rng = np.random.default_rng(seed)
    for spec in model.plan:
        kh, kw = spec.kernel
        if spec.kind == "conv":
            shape, fan_in = (kh, kw, spec.in_channels, spec.out_channels), kh * kw * spec.in_channels
        else:
            shape, fan_in = (kh, kw, spec.in_channels), kh * kw
        co = spec.out_channels
        model.params[f"{spec.name}.weight"] = Parameter(_init_conv(rng, shape, fan_in, dtype), dtype=dtype)
        model.params[f"{spec.name}.bias"] = Parameter(np.zeros(co), dtype=dtype)
        model.params[f"{spec.name}.bn.gamma"] = Parameter(np.ones(co), dtype=dtype)
        model.params[f"{spec.name}.bn.beta"] = Parameter(np.zeros(co), dtype=dtype)
        model.buffers[f"{spec.name}.bn.running_mean"] = np.zeros(co, dtype)
        model.buffers[f"{spec.name}.bn.running_var"] = np.ones(co, dtype)
    f, k = config.classifier_width, config.num_classes
    model.params["classifier.weight"] = Parameter(_init_conv(rng, (f, k), f, dtype) / np.sqrt(2.0), dtype=dtype)
    model.params["classifier.bias"] = Parameter(np.zeros(k), dtype=dtype)
    for name, p in model.params.items():
        p.name = name
    model.embedding = EmbeddingTable(config.width, dtype)
    for s in speakers:
        base = model.identity_row() if config.fusion in ("add", "mul") else np.zeros(config.width)
        model.add_speaker(s, base + embedding_noise * rng.standard_normal(config.width))
    return model


def apply_policy(model: KwsModel, policy: str, speaker=None):
    """Set trainable flags for an update policy.

    With ``speaker`` given, embedding updates are confined to that speaker's row.
    """
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {policy!r}")
    train_backbone = policy in ("backbone-only", "full")
    train_classifier = policy in ("classifier-only", "full")
    train_embedding = policy in ("embedding-only", "full") and model.config.fusion != "none"
    for p in model.backbone_parameters():
        p.trainable = train_backbone
    for p in model.classifier_parameters():
        p.trainable = train_classifier
    emb = model.embedding.weight
    emb.trainable = train_embedding
    emb.row_mask = None
    if speaker is not None and train_embedding:
        emb.row_mask = model.embedding.lookup([speaker])
    model.policy = policy
    model.active_speaker = speaker
    return model


# checkpoint ---------------------------------------------------------------
MAGIC = b"UKWSCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model: KwsModel, path, extra=None):
    """Binary checkpoint: 8-byte magic, uint32 version, uint32 header length,
    UTF-8 JSON header, then little-endian float32 blobs in header order."""
    blobs = [(k, "param", p.data) for k, p in model.named_parameters()]
    blobs += [(k, "buffer", b) for k, b in model.buffers.items()]
    header = {
        "config": model.config.to_dict(),
        "vocabulary": model.vocabulary,
        "feature_stats": model.stats.to_dict(),
        "speakers": model.embedding.ids,
        "blobs": [{"name": k, "kind": kind, "shape": list(a.shape)} for k, kind, a in blobs],
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(raw)) + raw)
        for _, _, a in blobs:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path):
    """Returns (header, {name: array}) without building a model."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[16 : 16 + hlen])
    offset, arrays = 16 + hlen, {}
    for blob in header["blobs"]:
        count = int(np.prod(blob["shape"]))
        arrays[blob["name"]] = np.frombuffer(buf, "<f4", count, offset).reshape(blob["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(buf):
        raise ValueError(f"{path}: {len(buf) - offset} trailing bytes")
    return header, arrays


def load_checkpoint(path) -> KwsModel:
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    model = build_model(config, vocabulary=header["vocabulary"],
                        stats=FeatureStats.from_dict(header["feature_stats"]))
    for s in header["speakers"]:
        model.add_speaker(s)
    expected = model.state_dict()
    for name, arr in expected.items():
        if name not in arrays:
            raise ValueError(f"{path}: missing blob {name}")
        if arrays[name].shape != arr.shape:
            raise ValueError(f"{path}: blob {name} has shape {arrays[name].shape}, config needs {arr.shape}")
    model.load_state_dict(arrays)
    return model
