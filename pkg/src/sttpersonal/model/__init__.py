"""CONV → BLSTM → FC のCTC音響モデル。

双方向の出力は要素ごとの和でまとめます。ソフトマックスはCTC損失の中で適用するので、
順伝播はロジットを返します。
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import IntFlag
from typing import Iterator, Mapping, Self, Sequence

import numpy as np

from ..alphabet import ALPHABET_SIZE
from ..audio import N_MELS, FeatureMatrix
from ..errors import ConfigError, ShapeMismatch, TapeReuse
from .layers import (
    ConvCache,
    LstmCache,
    conv2d_backward,
    conv2d_forward,
    lstm_backward,
    lstm_forward,
    reverse_index,
    take_frames,
)

_logger = logging.getLogger(__name__)

Gradients = dict[str, np.ndarray]


class ParamGroup(IntFlag):
    CONV = 0x01
    BLSTM = 0x02
    FC = 0x04

    @staticmethod
    def all() -> "ParamGroup":
        return ParamGroup.CONV | ParamGroup.BLSTM | ParamGroup.FC

    @staticmethod
    def members() -> tuple["ParamGroup", ...]:
        return (ParamGroup.CONV, ParamGroup.BLSTM, ParamGroup.FC)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = N_MELS
    conv_channels: tuple[int, ...] = (8, 8, 8)
    conv_kernels: tuple[tuple[int, int], ...] = ((3, 3), (3, 3), (3, 3))
    num_blstm_layers: int = 4
    blstm_units: int = 64
    fc_units: int = 64
    alphabet_size: int = ALPHABET_SIZE
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "conv_kernels", tuple((int(k[0]), int(k[1])) for k in self.conv_kernels))
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ConfigError("conv_channels and conv_kernels must have the same length")
        sizes = (
            self.input_dim,
            self.num_conv_layers,
            self.num_blstm_layers,
            self.blstm_units,
            self.fc_units,
            *self.conv_channels,
            *(k for kernel in self.conv_kernels for k in kernel),
        )
        if min(sizes) < 1:
            raise ConfigError("all model sizes must be >= 1")
        ConfigError.throw_if(self.alphabet_size < 2, "alphabet_size must be >= 2 (one symbol plus blank)")
        ConfigError.throw_if(self.dtype not in ("float32", "float64"), f"dtype must be float32 or float64, not {self.dtype!r}")

    @property
    def num_conv_layers(self) -> int:
        return len(self.conv_channels)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def blstm_input_dim(self) -> int:
        return self.input_dim * self.conv_channels[-1]

    def structure_dict(self) -> dict[str, object]:
        """形状を決める項目だけの辞書。dtypeは含みません。"""
        d = asdict(self)
        del d["dtype"]
        d["conv_kernels"] = [list(k) for k in self.conv_kernels]
        d["conv_channels"] = list(self.conv_channels)
        return d

    @property
    def hash64(self) -> int:
        canonical = json.dumps(self.structure_dict(), sort_keys=True, separators=(",", ":"))
        return int.from_bytes(hashlib.blake2b(canonical.encode(), digest_size=8).digest(), "little")

    def with_dtype(self, dtype: str) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), "dtype": dtype})


@dataclass(frozen=True)
class FreezeSpec:
    frozen: ParamGroup = ParamGroup(0)

    # プリセット名 (CLI・設定ファイル・スイープの表記)
    PRESETS = ("NoFrozen", "FrozenConv", "FrozenConvBlstm")

    @staticmethod
    def no_frozen() -> "FreezeSpec":
        return FreezeSpec(ParamGroup(0))

    @staticmethod
    def frozen_conv() -> "FreezeSpec":
        return FreezeSpec(ParamGroup.CONV)

    @staticmethod
    def frozen_conv_blstm() -> "FreezeSpec":
        return FreezeSpec(ParamGroup.CONV | ParamGroup.BLSTM)

    @staticmethod
    def from_name(name: str) -> "FreezeSpec":
        match name:
            case "NoFrozen":
                return FreezeSpec.no_frozen()
            case "FrozenConv":
                return FreezeSpec.frozen_conv()
            case "FrozenConvBlstm":
                return FreezeSpec.frozen_conv_blstm()
            case _:
                raise ConfigError(f"unknown freeze preset {name!r}, expected one of {', '.join(FreezeSpec.PRESETS)}")

    @property
    def name(self) -> str:
        for preset in FreezeSpec.PRESETS:
            if FreezeSpec.from_name(preset) == self:
                return preset
        return "+".join(g.name or "" for g in ParamGroup.members() if g in self.frozen) or "NoFrozen"

    def is_frozen(self, group: ParamGroup) -> bool:
        return bool(group & self.frozen)

    @property
    def trainable(self) -> ParamGroup:
        return ParamGroup.all() & ~self.frozen

    @property
    def has_trainable(self) -> bool:
        return bool(self.trainable)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], ParamGroup]]:
    """(名前, 形状, グループ) を順伝播の順に列挙します。"""
    shapes: list[tuple[str, tuple[int, ...], ParamGroup]] = []
    cin = 1
    for n, (cout, (kh, kw)) in enumerate(zip(config.conv_channels, config.conv_kernels), 1):
        shapes.append((f"conv{n}.w", (kh, kw, cin, cout), ParamGroup.CONV))
        shapes.append((f"conv{n}.b", (cout,), ParamGroup.CONV))
        cin = cout
    din = config.blstm_input_dim
    units = config.blstm_units
    for n in range(1, config.num_blstm_layers + 1):
        for direction in ("fwd", "bwd"):
            shapes.append((f"blstm{n}.{direction}.wx", (din, 4 * units), ParamGroup.BLSTM))
            shapes.append((f"blstm{n}.{direction}.wh", (units, 4 * units), ParamGroup.BLSTM))
            shapes.append((f"blstm{n}.{direction}.b", (4 * units,), ParamGroup.BLSTM))
        din = units
    shapes.append(("fc1.w", (units, config.fc_units), ParamGroup.FC))
    shapes.append(("fc1.b", (config.fc_units,), ParamGroup.FC))
    shapes.append(("fc2.w", (config.fc_units, config.alphabet_size), ParamGroup.FC))
    shapes.append(("fc2.b", (config.alphabet_size,), ParamGroup.FC))
    return shapes


class ParamSet:
    """名前付きテンソルの順序付き集合。値として扱い、更新は :meth:`replace` で新しい集合を作ります。"""

    __slots__ = ("_config", "_tensors", "_groups")
    _config: ModelConfig
    _tensors: dict[str, np.ndarray]
    _groups: dict[str, ParamGroup]

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], groups: Mapping[str, ParamGroup]) -> None:
        if tensors.keys() != groups.keys():
            raise ShapeMismatch("every tensor needs exactly one group")
        self._config = config
        self._tensors = dict(tensors)
        self._groups = {name: ParamGroup(groups[name]) for name in self._tensors}

    @classmethod
    def from_config(cls, config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> Self:
        """``param_shapes`` と照合して作ります。"""
        expected = param_shapes(config)
        if list(tensors) != [name for name, _, _ in expected]:
            raise ShapeMismatch("tensor names do not match the model configuration")
        for name, shape, _ in expected:
            if tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: shape {tensors[name].shape}, expected {shape}")
        return cls(config, tensors, {name: group for name, _, group in expected})

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def group_of(self, name: str) -> ParamGroup:
        return self._groups[name]

    def names_in(self, groups: ParamGroup) -> tuple[str, ...]:
        return tuple(name for name, g in self._groups.items() if g & groups)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        tensors = dict(self._tensors)
        for name, value in updates.items():
            if name not in tensors:
                raise KeyError(name)
            if value.shape != tensors[name].shape:
                raise ShapeMismatch(f"{name}: shape {value.shape}, expected {tensors[name].shape}")
            tensors[name] = value
        return ParamSet(self._config, tensors, self._groups)

    @property
    def signature(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, t.shape) for n, t in self._tensors.items())


def init_model(config: ModelConfig, seed: int) -> ParamSet:
    """重みは一様分布 [-k, k] (k = 1/sqrt(fan_in))、バイアスは0で初期化します。"""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape, _ in param_shapes(config):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=config.np_dtype)
            continue
        match len(shape):
            case 4:
                fan_in = shape[0] * shape[1] * shape[2]
            case _:
                fan_in = shape[0]
        k = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-k, k, size=shape).astype(config.np_dtype)
    return ParamSet.from_config(config, tensors)


def count_params(config: ModelConfig, freeze: FreezeSpec = FreezeSpec()) -> dict[str, int]:
    counts = {g.name or "": 0 for g in ParamGroup.members()}
    for _, shape, group in param_shapes(config):
        counts[group.name or ""] += int(np.prod(shape))
    total = sum(counts.values())
    trainable = sum(counts[g.name or ""] for g in ParamGroup.members() if not freeze.is_frozen(g))
    return {**counts, "total": total, "trainable": trainable}


@dataclass(slots=True)
class ActivationTape:
    """1回の順伝播の中間値。逆伝播で1度だけ消費されます。"""

    signature: tuple[tuple[str, tuple[int, ...]], ...]
    lengths: np.ndarray
    mask: np.ndarray
    conv: list[ConvCache]
    blstm: list[tuple[LstmCache, LstmCache]]
    reverse: np.ndarray
    conv_out_shape: tuple[int, ...]
    fc_in: np.ndarray
    fc_hidden: np.ndarray
    logits_shape: tuple[int, ...]
    consumed: bool = field(default=False)


def pad_batch(features: Sequence[np.ndarray | FeatureMatrix], dtype: np.dtype) -> tuple[np.ndarray, np.ndarray]:
    mats = [f.frames if isinstance(f, FeatureMatrix) else np.asarray(f) for f in features]
    if not mats:
        raise ShapeMismatch("empty batch")
    widths = {m.shape[1] if m.ndim == 2 else -1 for m in mats}
    if len(widths) != 1 or -1 in widths:
        raise ShapeMismatch("every feature matrix must be 2-D with the same width")
    lengths = np.array([m.shape[0] for m in mats], dtype=np.int64)
    padded = np.zeros((len(mats), int(lengths.max()), mats[0].shape[1]), dtype=dtype)
    for b, m in enumerate(mats):
        padded[b, : m.shape[0]] = m
    return padded, lengths


def forward_batch(params: ParamSet, features: Sequence[np.ndarray | FeatureMatrix]) -> tuple[np.ndarray, ActivationTape]:
    """ロジット (B, T, A) を返します。T は最長の系列長で、各系列の長さを超える行は無意味な値です。"""
    config = params.config
    dtype = config.np_dtype
    x, lengths = pad_batch(features, dtype)
    batch, frames, width = x.shape
    ShapeMismatch.throw_if(width != config.input_dim, f"feature width {width}, model expects {config.input_dim}")
    ShapeMismatch.throw_if(frames == 0, "feature matrix has no frames")
    mask = (np.arange(frames)[None, :] < lengths[:, None]).astype(dtype)

    h = x[:, :, :, None]
    conv_caches: list[ConvCache] = []
    for n in range(1, config.num_conv_layers + 1):
        h, cache = conv2d_forward(h, params[f"conv{n}.w"], params[f"conv{n}.b"], mask)
        conv_caches.append(cache)
    conv_out_shape = h.shape
    h = h.reshape(batch, frames, -1)

    rev = reverse_index(lengths, frames)
    blstm_caches: list[tuple[LstmCache, LstmCache]] = []
    for n in range(1, config.num_blstm_layers + 1):
        p = f"blstm{n}"
        h_fwd, cache_fwd = lstm_forward(h, params[f"{p}.fwd.wx"], params[f"{p}.fwd.wh"], params[f"{p}.fwd.b"], mask)
        h_rev, cache_bwd = lstm_forward(
            take_frames(h, rev), params[f"{p}.bwd.wx"], params[f"{p}.bwd.wh"], params[f"{p}.bwd.b"], mask
        )
        h = h_fwd + take_frames(h_rev, rev)
        blstm_caches.append((cache_fwd, cache_bwd))

    hidden = np.maximum(h @ params["fc1.w"] + params["fc1.b"], 0.0)
    logits = hidden @ params["fc2.w"] + params["fc2.b"]

    tape = ActivationTape(
        signature=params.signature,
        lengths=lengths,
        mask=mask,
        conv=conv_caches,
        blstm=blstm_caches,
        reverse=rev,
        conv_out_shape=conv_out_shape,
        fc_in=h,
        fc_hidden=hidden,
        logits_shape=logits.shape,
    )
    return logits, tape


def forward(params: ParamSet, features: np.ndarray | FeatureMatrix) -> tuple[np.ndarray, ActivationTape]:
    """1発話分の順伝播。ロジットは T×alphabet_size です。"""
    logits, tape = forward_batch(params, [features])
    return logits[0], tape


def backward(params: ParamSet, tape: ActivationTape, dlogits: np.ndarray, freeze: FreezeSpec) -> Gradients:
    """凍結していないグループのテンソルの勾配だけを返します。

    最下層の学習対象より下へは逆伝播しません。
    """
    TapeReuse.throw_if(tape.consumed, "activation tape was already consumed by a backward pass")
    if dlogits.ndim == 2:
        dlogits = dlogits[None]
    if dlogits.shape != tape.logits_shape:
        raise ShapeMismatch(f"dlogits shape {dlogits.shape}, tape expects {tape.logits_shape}")
    ShapeMismatch.throw_if(params.signature != tape.signature, "parameters do not match the tape's forward pass")
    tape.consumed = True

    config = params.config
    dtype = config.np_dtype
    train_conv = not freeze.is_frozen(ParamGroup.CONV)
    train_blstm = not freeze.is_frozen(ParamGroup.BLSTM)
    train_fc = not freeze.is_frozen(ParamGroup.FC)
    need_blstm = train_blstm or train_conv

    grads: Gradients = {}
    dlog = (dlogits * tape.mask[:, :, None]).astype(dtype, copy=False)
    batch, frames, _ = dlog.shape

    hidden = tape.fc_hidden
    if train_fc:
        grads["fc2.w"] = hidden.reshape(-1, hidden.shape[-1]).T @ dlog.reshape(-1, dlog.shape[-1])
        grads["fc2.b"] = dlog.sum(axis=(0, 1))
    if not (train_fc or need_blstm):
        return _ordered(params, grads)
    dhidden = np.where(hidden > 0.0, dlog @ params["fc2.w"].T, 0.0).astype(dtype, copy=False)
    if train_fc:
        fc_in = tape.fc_in
        grads["fc1.w"] = fc_in.reshape(-1, fc_in.shape[-1]).T @ dhidden.reshape(-1, dhidden.shape[-1])
        grads["fc1.b"] = dhidden.sum(axis=(0, 1))
    if not need_blstm:
        return _ordered(params, grads)

    dh = dhidden @ params["fc1.w"].T
    rev = tape.reverse
    for n in range(config.num_blstm_layers, 0, -1):
        p = f"blstm{n}"
        cache_fwd, cache_bwd = tape.blstm[n - 1]
        need_dx = n > 1 or train_conv
        g_fwd, dx_fwd = lstm_backward(
            dh, params[f"{p}.fwd.wx"], params[f"{p}.fwd.wh"], cache_fwd, tape.mask, train_blstm, need_dx
        )
        g_bwd, dx_rev = lstm_backward(
            take_frames(dh, rev), params[f"{p}.bwd.wx"], params[f"{p}.bwd.wh"], cache_bwd, tape.mask, train_blstm, need_dx
        )
        for key, value in g_fwd.items():
            grads[f"{p}.fwd.{key}"] = value
        for key, value in g_bwd.items():
            grads[f"{p}.bwd.{key}"] = value
        if not need_dx:
            break
        assert dx_fwd is not None and dx_rev is not None
        dh = dx_fwd + take_frames(dx_rev, rev)

    if train_conv:
        dconv = dh.reshape(tape.conv_out_shape)
        for n in range(config.num_conv_layers, 0, -1):
            dw, db, dx = conv2d_backward(dconv, params[f"conv{n}.w"], tape.conv[n - 1], True, n > 1)
            assert dw is not None and db is not None
            grads[f"conv{n}.w"] = dw
            grads[f"conv{n}.b"] = db
            if dx is not None:
                dconv = dx
    _logger.debug("backward: %d gradient tensors over %d frames x %d items", len(grads), frames, batch)
    return _ordered(params, grads)


def _ordered(params: ParamSet, grads: Gradients) -> Gradients:
    return {name: grads[name] for name in params.names if name in grads}

