"""The full crowd-count regression network.

Two cross-modal streams run side by side: the vision-length stream queries
WiFi features ("wv") and the wifi-length stream queries vision features
("vw"). Each stream is N blocks of multi-head attention -> multi-scale conv ->
FFN with pre-norm sublayers and normalized residuals, followed by one
self-attention block. The final sequence element of each stream feeds a small
fully connected head that emits one real count.

Single-modality ablations keep the same block structure but the surviving
stream attends over its own layer-0 features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import layers as L
from .tensor import (
    MagicError,
    NumericError,
    PayloadError,
    ShapeError,
    Tensor,
    VersionError,
    absval,
    add,
    concat,
    get_default_dtype,
    reduce_mean,
    relu,
    reshape,
    slice_axis,
    sub,
    tensor_from_bytes,
    tensor_to_bytes,
)

STREAM_MODES = ("both", "wifi_only", "vision_only")
RESIDUAL_MODES = ("normalized", "raw")
ABLATIONS = ("vision_stream", "wifi_stream", "multiscale_cnn", "linear_attention")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    kernel_sizes: tuple[int, ...] = (1, 3, 5)
    attention_kernel: str = "linear"
    l_w: int = 100
    d_w: int = 30
    l_v: int = 16
    d_v: int = 256
    streams: str = "both"
    use_multiscale: bool = True
    scale_qk: bool = True
    residual: str = "normalized"
    embed_kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.streams not in STREAM_MODES:
            raise ValueError(f"streams must be one of {STREAM_MODES}")
        if self.residual not in RESIDUAL_MODES:
            raise ValueError(f"residual must be one of {RESIDUAL_MODES}")
        if self.attention_kernel not in L.ATTENTION_KERNELS:
            raise ValueError(f"attention_kernel must be one of {L.ATTENTION_KERNELS}")
        if self.embed_kernel_size % 2 == 0 or self.embed_kernel_size < 1:
            raise ValueError("embed_kernel_size must be odd and positive")
        if min(self.l_w, self.d_w, self.l_v, self.d_v, self.d_ff) < 1:
            raise ValueError("sequence/feature dims must be positive")
        self._attn_cfg = L.AttentionHeadConfig.from_d_model(
            self.d_model, self.n_heads, kernel=self.attention_kernel, scale_qk=self.scale_qk
        )
        self._msconv_cfg = L.MultiScaleConvConfig(self.kernel_sizes, self.d_model)

    def attention_cfg(self) -> L.AttentionHeadConfig:
        return self._attn_cfg

    def msconv_cfg(self) -> L.MultiScaleConvConfig:
        return self._msconv_cfg

    def to_json(self) -> str:
        d = asdict(self)
        d["kernel_sizes"] = list(d["kernel_sizes"])
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        d = json.loads(text)
        d["kernel_sizes"] = tuple(d["kernel_sizes"])
        return ModelConfig(**d)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-size configuration used by the gradient self-check."""
    base = dict(
        d_model=8,
        n_heads=2,
        n_layers=1,
        d_ff=16,
        kernel_sizes=(1, 3),
        l_w=6,
        d_w=5,
        l_v=4,
        d_v=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class CrossModalBlockParams:
    ln_q: L.LayerNormParams
    ln_kv: L.LayerNormParams
    ln_mid: L.LayerNormParams | None
    ln_out: L.LayerNormParams
    mha: L.MultiHeadAttentionParams
    msconv: L.MultiScaleConvParams | None
    ffn: L.FeedForwardParams

    @staticmethod
    def init(rng, cfg: ModelConfig, dtype=None) -> "CrossModalBlockParams":
        d = cfg.d_model
        return CrossModalBlockParams(
            ln_q=L.LayerNormParams.init(d, dtype),
            ln_kv=L.LayerNormParams.init(d, dtype),
            ln_mid=L.LayerNormParams.init(d, dtype) if cfg.use_multiscale else None,
            ln_out=L.LayerNormParams.init(d, dtype),
            mha=L.MultiHeadAttentionParams.init(rng, cfg.attention_cfg(), d, d, dtype),
            msconv=L.MultiScaleConvParams.init(rng, cfg.msconv_cfg(), dtype) if cfg.use_multiscale else None,
            ffn=L.FeedForwardParams.init(rng, d, cfg.d_ff, dtype),
        )


@dataclass
class StreamParams:
    blocks: list[CrossModalBlockParams]
    self_block: CrossModalBlockParams

    @staticmethod
    def init(rng, cfg: ModelConfig, dtype=None) -> "StreamParams":
        return StreamParams(
            blocks=[CrossModalBlockParams.init(rng, cfg, dtype) for _ in range(cfg.n_layers)],
            self_block=CrossModalBlockParams.init(rng, cfg, dtype),
        )


class TransFusionModel:
    """Parameter set plus architecture config for the fusion network."""

    def __init__(self, cfg: ModelConfig, wifi_embed, vision_embed, streams, head_inner, head_outer):
        self.cfg = cfg
        self.wifi_embed: L.Conv1dParams | None = wifi_embed
        self.vision_embed: L.Conv1dParams | None = vision_embed
        self.streams: dict[str, StreamParams] = streams
        self.head_inner: L.LinearLayer = head_inner
        self.head_outer: L.LinearLayer = head_outer
        self._param_cache: dict[str, Tensor] | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        # parameter structure is fixed after build; tensors are mutated in place
        if self._param_cache is not None:
            return self._param_cache
        out: dict[str, Tensor] = {}

        def put(prefix, obj):
            if obj is None:
                return
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif isinstance(obj, L.LinearLayer):
                put(f"{prefix}.weight", obj.weight)
                put(f"{prefix}.bias", obj.bias)
            elif isinstance(obj, L.LayerNormParams):
                put(f"{prefix}.gain", obj.gain)
                put(f"{prefix}.bias", obj.bias)
            elif isinstance(obj, L.Conv1dParams):
                put(f"{prefix}.kernel", obj.kernel)
                put(f"{prefix}.bias", obj.bias)
            elif isinstance(obj, L.MultiScaleConvParams):
                for i, br in enumerate(obj.branches):
                    put(f"{prefix}.branch{i}", br)
            elif isinstance(obj, L.MultiHeadAttentionParams):
                put(f"{prefix}.proj_q", obj.proj_q)
                put(f"{prefix}.proj_k", obj.proj_k)
                put(f"{prefix}.proj_v", obj.proj_v)
                put(f"{prefix}.proj_out", obj.proj_out)
            elif isinstance(obj, L.FeedForwardParams):
                put(f"{prefix}.inner", obj.inner)
                put(f"{prefix}.outer", obj.outer)
            elif isinstance(obj, CrossModalBlockParams):
                put(f"{prefix}.ln_q", obj.ln_q)
                put(f"{prefix}.ln_kv", obj.ln_kv)
                put(f"{prefix}.ln_mid", obj.ln_mid)
                put(f"{prefix}.ln_out", obj.ln_out)
                put(f"{prefix}.mha", obj.mha)
                put(f"{prefix}.msconv", obj.msconv)
                put(f"{prefix}.ffn", obj.ffn)
            else:
                raise TypeError(f"unknown parameter container {type(obj)}")

        put("wifi_embed", self.wifi_embed)
        put("vision_embed", self.vision_embed)
        for key, stream in self.streams.items():
            for i, blk in enumerate(stream.blocks):
                put(f"stream_{key}.block{i:02d}", blk)
            put(f"stream_{key}.self_block", stream.self_block)
        put("head.inner", self.head_inner)
        put("head.outer", self.head_outer)
        self._param_cache = out
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grads(self) -> None:
        for t in self.parameters():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(params) != set(state):
            missing = set(params) ^ set(state)
            raise KeyError(f"parameter name mismatch: {sorted(missing)[:4]}...")
        for name, t in params.items():
            arr = state[name]
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def state_copy(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}


def build(cfg: ModelConfig, dtype=None) -> TransFusionModel:
    """Initialize all parameters deterministically from cfg.seed.

    Weights are uniform(-sqrt(1/fan_in), sqrt(1/fan_in)), biases zero, layer
    norm gain one. Ablated variants omit the corresponding parameters.
    """
    dt = dtype or get_default_dtype()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.embed_kernel_size
    wifi_embed = None
    vision_embed = None
    if cfg.streams in ("both", "wifi_only"):
        wifi_embed = L.Conv1dParams.init(rng, k, cfg.d_w, cfg.d_model, dt)
    if cfg.streams in ("both", "vision_only"):
        vision_embed = L.Conv1dParams.init(rng, k, cfg.d_v, cfg.d_model, dt)
    if cfg.streams == "both":
        streams = {
            "wv": StreamParams.init(rng, cfg, dt),
            "vw": StreamParams.init(rng, cfg, dt),
        }
        head_in = 2 * cfg.d_model
    elif cfg.streams == "wifi_only":
        streams = {"w": StreamParams.init(rng, cfg, dt)}
        head_in = cfg.d_model
    else:
        streams = {"v": StreamParams.init(rng, cfg, dt)}
        head_in = cfg.d_model
    head_inner = L.LinearLayer.init(rng, head_in, cfg.d_model, dt)
    head_outer = L.LinearLayer.init(rng, cfg.d_model, 1, dt)
    return TransFusionModel(cfg, wifi_embed, vision_embed, streams, head_inner, head_outer)


def _as_input(x, shape, name) -> Tensor:
    if x is None:
        raise ShapeError(f"{name} input is required for this stream configuration")
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.shape != shape:
        raise ShapeError(f"{name} input shape {t.shape} != configured {shape}")
    return t


def embed(x_w, x_v, model: TransFusionModel) -> tuple[Tensor | None, Tensor | None]:
    """Per-modality temporal conv to d_model plus sinusoidal position features."""
    cfg = model.cfg
    z_w = z_v = None
    if model.wifi_embed is not None:
        xw = _as_input(x_w, (cfg.l_w, cfg.d_w), "wifi")
        pe = L.positional_encoding(cfg.l_w, cfg.d_model, dtype=xw.data.dtype)
        z_w = add(L.conv1d(xw, model.wifi_embed), pe)
    if model.vision_embed is not None:
        xv = _as_input(x_v, (cfg.l_v, cfg.d_v), "vision")
        pe = L.positional_encoding(cfg.l_v, cfg.d_model, dtype=xv.data.dtype)
        z_v = add(L.conv1d(xv, model.vision_embed), pe)
    return z_w, z_v


def cross_modal_block(
    z_prev: Tensor, z_kv: Tensor, params: CrossModalBlockParams, cfg: ModelConfig
) -> Tensor:
    """One fusion block: attention, optional multi-scale conv, FFN.

    Pre-norm sublayers; the residual term is the normalized input (the 'raw'
    config switch restores the conventional unnormalized residual).
    """
    normalized = cfg.residual == "normalized"
    ln_prev = L.layer_norm(z_prev, params.ln_q)
    ln_kv = L.layer_norm(z_kv, params.ln_kv)
    attended = L.multi_head_attention(ln_prev, ln_kv, cfg.attention_cfg(), params.mha)
    z_hat = add(attended, ln_prev if normalized else z_prev)
    if cfg.use_multiscale:
        ln_mid = L.layer_norm(z_hat, params.ln_mid)
        conv_out = L.multi_scale_conv(ln_mid, cfg.msconv_cfg(), params.msconv)
        z_mid = add(conv_out, ln_mid if normalized else z_hat)
    else:
        z_mid = z_hat
    ln_last = L.layer_norm(z_mid, params.ln_out)
    return add(L.ffn(ln_last, params.ffn), ln_last if normalized else z_mid)


def _run_stream(z0_q: Tensor, z0_kv: Tensor, stream: StreamParams, cfg: ModelConfig) -> Tensor:
    z = z0_q
    for blk in stream.blocks:
        z = cross_modal_block(z, z0_kv, blk, cfg)
    return cross_modal_block(z, z, stream.self_block, cfg)


def _last_row(z: Tensor) -> Tensor:
    l = z.shape[0]
    return slice_axis(z, 0, l - 1, l)  # [1, d_model]


def _check_finite(t: Tensor, stage: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values produced by {stage}")
    return t


def forward(model: TransFusionModel, x_w, x_v) -> Tensor:
    """Predict the crowd count for one preprocessed sample pair.

    Returns a length-1 tensor. Ablated configurations ignore the missing
    modality's input entirely.
    """
    cfg = model.cfg
    z_w, z_v = embed(
        x_w if cfg.streams != "vision_only" else None,
        x_v if cfg.streams != "wifi_only" else None,
        model,
    )
    if z_w is not None:
        _check_finite(z_w, "wifi embedding")
    if z_v is not None:
        _check_finite(z_v, "vision embedding")
    if cfg.streams == "both":
        s_wv = _check_finite(_run_stream(z_v, z_w, model.streams["wv"], cfg), "stream wv")
        s_vw = _check_finite(_run_stream(z_w, z_v, model.streams["vw"], cfg), "stream vw")
        fused = concat([_last_row(s_wv), _last_row(s_vw)], axis=1)  # [1, 2*d_model]
    elif cfg.streams == "wifi_only":
        s = _check_finite(_run_stream(z_w, z_w, model.streams["w"], cfg), "stream w")
        fused = _last_row(s)
    else:
        s = _check_finite(_run_stream(z_v, z_v, model.streams["v"], cfg), "stream v")
        fused = _last_row(s)
    hidden = L.linear(fused, model.head_inner)
    out = L.linear(relu(hidden), model.head_outer)  # [1, 1]
    return _check_finite(reshape(out, (1,)), "prediction head")


def l1_loss(preds: Tensor, labels) -> Tensor:
    """Mean absolute error between predictions and ground-truth counts."""
    labels_t = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=preds.data.dtype))
    if preds.shape != labels_t.shape:
        raise ShapeError(f"preds {preds.shape} vs labels {labels_t.shape}")
    if preds.data.size < 1:
        raise ShapeError("need at least one sample")
    return reduce_mean(absval(sub(preds, labels_t)))


def ablate(cfg: ModelConfig, which: str) -> ModelConfig:
    """Return a config with exactly one component removed (Table-style rows)."""
    if which == "vision_stream":
        return replace(cfg, streams="wifi_only")
    if which == "wifi_stream":
        return replace(cfg, streams="vision_only")
    if which == "multiscale_cnn":
        return replace(cfg, use_multiscale=False)
    if which == "linear_attention":
        return replace(cfg, attention_kernel="softmax")
    raise ValueError(f"unknown ablation {which!r}; expected one of {ABLATIONS}")


# ---------------------------------------------------------------------------
# checkpoint format: "TFCK", version, config JSON, named tensors sorted by name

_TFCK_MAGIC = b"TFCK"
_TFCK_VERSION = 1


def model_to_bytes(model: TransFusionModel) -> bytes:
    cfg_json = model.cfg.to_json().encode("utf-8")
    blob = bytearray(_TFCK_MAGIC)
    blob += struct.pack("<I", _TFCK_VERSION)
    blob += struct.pack("<I", len(cfg_json)) + cfg_json
    for name in sorted(model.named_parameters()):
        name_b = name.encode("utf-8")
        rec = tensor_to_bytes(model.named_parameters()[name])
        blob += struct.pack("<I", len(name_b)) + name_b
        blob += struct.pack("<I", len(rec)) + rec
    return bytes(blob)


def model_from_bytes(buf: bytes) -> TransFusionModel:
    if len(buf) < 4 or buf[:4] != _TFCK_MAGIC:
        raise MagicError("bad checkpoint magic (expected TFCK)")
    if len(buf) < 12:
        raise PayloadError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _TFCK_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", buf, 8)
    off = 12
    if len(buf) < off + cfg_len:
        raise PayloadError("truncated checkpoint config block")
    cfg = ModelConfig.from_json(buf[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    state: dict[str, np.ndarray] = {}
    while off < len(buf):
        if len(buf) < off + 4:
            raise PayloadError("truncated checkpoint tensor name")
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) < off + name_len + 4:
            raise PayloadError("truncated checkpoint tensor record")
        name = buf[off : off + name_len].decode("utf-8")
        off += name_len
        (rec_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) < off + rec_len:
            raise PayloadError("truncated checkpoint tensor payload")
        state[name] = tensor_from_bytes(buf[off : off + rec_len]).data
        off += rec_len
    stored_dtype = next(iter(state.values())).dtype if state else None
    model = build(cfg, dtype=stored_dtype)
    model.load_state(state)
    return model
