"""CRNN detector: dynamic-convolution CNN stack plus twin recurrent decoders.

The convolutional front end uses frequency-adaptive convolutions (a softmax
mix of basis kernels, weighted per frequency bin) and large-kernel
attention. Two structurally identical GRU decoders sit on top: the main
decoder (optionally fused with precomputed clip embeddings) produces the
deployed predictions, while the auxiliary decoder exists only at training
time to give the CNN a second, embedding-free gradient path. The decoders
never share weights.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass
class ModelConfig:
    n_classes: int
    in_channels: int = 3
    n_mels: int = 128
    conv_channels: tuple = (16, 32, 64, 128, 128, 128, 128)
    time_pool: tuple = (2, 2, 1, 1, 1, 1, 1)
    freq_pool: tuple = (2, 2, 2, 2, 2, 2, 2)
    basis_kernels: int = 4
    attention_temperature: float = 31.0
    rnn_hidden: int = 192
    rnn_layers: int = 2
    dropout: float = 0.5
    embedding_dim: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.time_pool = tuple(self.time_pool)
        self.freq_pool = tuple(self.freq_pool)
        if not (len(self.conv_channels) == len(self.time_pool) == len(self.freq_pool)):
            raise ConfigError("conv_channels, time_pool, freq_pool lengths differ")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.basis_kernels < 1:
            raise ConfigError("basis_kernels must be >= 1")
        freq_prod = math.prod(self.freq_pool)
        if freq_prod != self.n_mels:
            raise ConfigError(
                f"freq_pool must collapse all {self.n_mels} mel bins, "
                f"product is {freq_prod}"
            )

    @property
    def time_reduction(self):
        return math.prod(self.time_pool)

    @property
    def conv_dim(self):
        return self.conv_channels[-1]

    def to_dict(self):
        d = asdict(self)
        for key in ("conv_channels", "time_pool", "freq_pool"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FreqDynamicConv2d(nn.Module):
    """3x3 convolution whose kernel is a per-frequency softmax mix of
    ``n_basis`` basis kernels.

    The mixing weights come from a time-pooled per-frequency descriptor fed
    through a 1x1 map; the softmax over basis kernels uses a temperature to
    keep the mix soft. With a single basis kernel this is exactly a plain
    convolution.
    """

    def __init__(self, in_channels, out_channels, n_basis=4, temperature=31.0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.n_basis = n_basis
        self.temperature = temperature
        self.weight = nn.Parameter(
            torch.empty(n_basis, out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(n_basis, out_channels))
        self.attention = nn.Conv1d(in_channels, n_basis, kernel_size=1)

    def mixing_weights(self, x):
        descriptor = x.mean(dim=2)  # (B, C, F): pool over time
        logits = self.attention(descriptor) / self.temperature
        return torch.softmax(logits, dim=1)  # (B, K, F)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, T, F) input, got {tuple(x.shape)}"
            )
        attn = self.mixing_weights(x)
        kernels = self.weight.reshape(-1, self.in_channels, 3, 3)
        stacked = F.conv2d(x, kernels, self.bias.reshape(-1), padding=1)
        stacked = stacked.reshape(
            x.shape[0], self.n_basis, self.out_channels, x.shape[2], x.shape[3])
        return (attn[:, :, None, None, :] * stacked).sum(dim=1)


class LargeKernelAttention(nn.Module):
    """Multiplicative attention map from decomposed large-kernel convs:
    5x5 depthwise, 7x7 depthwise with dilation 3, then 1x1 pointwise."""

    def __init__(self, channels):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, 5, padding=2, groups=channels)
        self.dilated = nn.Conv2d(channels, channels, 7, padding=9, dilation=3,
                                 groups=channels)
        self.pointwise = nn.Conv2d(channels, channels, 1)

    def attention_map(self, x):
        return self.pointwise(self.dilated(self.depthwise(x)))

    def forward(self, x):
        return x * self.attention_map(x)


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_pool, freq_pool,
                 n_basis, temperature, dropout):
        super().__init__()
        self.conv = FreqDynamicConv2d(in_channels, out_channels, n_basis, temperature)
        self.norm = nn.BatchNorm2d(out_channels)
        self.act = nn.SiLU()
        self.attention = LargeKernelAttention(out_channels)
        self.pool = (nn.AvgPool2d((time_pool, freq_pool))
                     if (time_pool, freq_pool) != (1, 1) else nn.Identity())
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = self.act(self.norm(self.conv(x)))
        x = self.attention(x)
        return self.drop(self.pool(x))


class CNNEncoder(nn.Module):
    """Feature stack -> frame sequence. Frames beyond a multiple of the
    total time pooling are dropped (1001 -> 1000 -> 250 for the default)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        blocks = []
        prev = config.in_channels
        for ch, tp, fp in zip(config.conv_channels, config.time_pool, config.freq_pool):
            blocks.append(ConvBlock(prev, ch, tp, fp, config.basis_kernels,
                                    config.attention_temperature, config.dropout))
            prev = ch
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        if x.dim() != 4:
            raise ShapeError(f"expected (B, C, T, F) features, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels or x.shape[3] != self.config.n_mels:
            raise ShapeError(
                f"expected {self.config.in_channels} channels x "
                f"{self.config.n_mels} bins, got {tuple(x.shape)}"
            )
        reduction = self.config.time_reduction
        keep = (x.shape[2] // reduction) * reduction
        if keep == 0:
            raise ShapeError(f"too few frames ({x.shape[2]}) for pooling x{reduction}")
        x = x[:, :, :keep, :]
        for block in self.blocks:
            x = block(x)
        # frequency axis is fully pooled away by construction
        return x.squeeze(3).transpose(1, 2)  # (B, T', D)


class Decoder(nn.Module):
    """Bi-GRU over frame features with a per-frame sigmoid classifier and a
    softmax-attention pooling head for clip-level probabilities."""

    def __init__(self, input_dim, hidden, layers, n_classes, dropout):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden, num_layers=layers, batch_first=True,
                          bidirectional=True, dropout=dropout if layers > 1 else 0.0)
        self.strong_head = nn.Linear(2 * hidden, n_classes)
        self.pool_head = nn.Linear(2 * hidden, n_classes)

    def forward(self, x):
        h, _ = self.gru(x)
        strong = torch.sigmoid(self.strong_head(h))       # (B, T, C)
        pooling = torch.softmax(self.pool_head(h), dim=1)  # over time
        weak = (pooling * strong).sum(dim=1)               # (B, C)
        return strong, weak


@dataclass
class ForwardOutput:
    main_strong: torch.Tensor
    main_weak: torch.Tensor
    aux_strong: torch.Tensor = None
    aux_weak: torch.Tensor = None
    conv_features: torch.Tensor = None


class CRNN(nn.Module):
    """Encoder plus main/auxiliary decoders.

    The auxiliary decoder mirrors the main decoder's structure but owns its
    parameters and never sees embeddings; it is computed only in training
    mode, so evaluation cost and outputs are independent of its weights.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = CNNEncoder(config)
        d = config.conv_dim
        self.main_decoder = Decoder(d + config.embedding_dim, config.rnn_hidden,
                                    config.rnn_layers, config.n_classes,
                                    config.dropout)
        self.aux_decoder = Decoder(d, config.rnn_hidden, config.rnn_layers,
                                   config.n_classes, config.dropout)

    def _align_embeddings(self, embeddings, n_frames):
        if embeddings.dim() != 3 or embeddings.shape[2] != self.config.embedding_dim:
            raise ShapeError(
                f"expected (B, T, {self.config.embedding_dim}) embeddings, "
                f"got {tuple(embeddings.shape)}"
            )
        if embeddings.shape[1] == n_frames:
            return embeddings
        resized = F.interpolate(embeddings.transpose(1, 2), size=n_frames,
                                mode="linear", align_corners=False)
        return resized.transpose(1, 2)

    def forward(self, features, embeddings=None) -> ForwardOutput:
        conv = self.encoder(features)
        if self.config.embedding_dim > 0:
            if embeddings is None:
                raise ShapeError(
                    "model was configured with embedding fusion but no "
                    "embeddings were provided"
                )
            fused = torch.cat([conv, self._align_embeddings(embeddings, conv.shape[1])],
                              dim=2)
        else:
            fused = conv
        main_strong, main_weak = self.main_decoder(fused)
        if self.training:
            aux_strong, aux_weak = self.aux_decoder(conv)
        else:
            aux_strong = aux_weak = None
        return ForwardOutput(main_strong=main_strong, main_weak=main_weak,
                             aux_strong=aux_strong, aux_weak=aux_weak,
                             conv_features=conv)


def xavier_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def _fan_in_out(tensor):
    shape = tensor.shape
    if tensor.dim() == 2:
        return shape[1], shape[0]
    if tensor.dim() == 5:  # basis-kernel bank: (K, out, in, kh, kw)
        receptive = shape[3] * shape[4]
        return shape[2] * receptive, shape[1] * receptive
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def init_params(model: nn.Module, seed: int):
    """Seed-deterministic init: Xavier-uniform weights, unit norm scales,
    zero biases. Returns the model."""
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() >= 2:
                bound = xavier_bound(*_fan_in_out(param))
                param.uniform_(-bound, bound, generator=generator)
            elif name.endswith("weight"):  # norm-layer scale
                param.fill_(1.0)
            else:
                param.fill_(0.0)
        for module in model.modules():
            if isinstance(module, nn.BatchNorm2d):
                module.reset_running_stats()
    return model


def build_model(config: ModelConfig, seed=0) -> CRNN:
    return init_params(CRNN(config), seed)


def model_to_tensors(model: nn.Module):
    """state_dict as float32 numpy arrays (checkpoint payload)."""
    out = {}
    for name, value in model.state_dict().items():
        out[name] = value.detach().cpu().numpy().astype(np.float32)
    return out


def tensors_to_model(model: nn.Module, tensors, prefix=""):
    """Load a checkpoint tensor dict back into ``model`` (strict)."""
    state = {}
    for name, value in model.state_dict().items():
        key = prefix + name
        if key not in tensors:
            raise ConfigError(f"checkpoint is missing tensor {key!r}")
        arr = np.asarray(tensors[key])
        if tuple(arr.shape) != tuple(value.shape):
            raise ConfigError(
                f"checkpoint tensor {key!r} has shape {arr.shape}, "
                f"model expects {tuple(value.shape)}"
            )
        state[name] = torch.as_tensor(arr).to(value.dtype)
    model.load_state_dict(state)
    return model


def forward(model: CRNN, features, embeddings=None, mode="eval") -> ForwardOutput:
    """Run the model in an explicit mode; eval mode never touches the
    auxiliary decoder and is repeatable."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    was_training = model.training
    model.train(mode == "train")
    try:
        if mode == "eval":
            with torch.no_grad():
                return model(features, embeddings)
        return model(features, embeddings)
    finally:
        model.train(was_training)
