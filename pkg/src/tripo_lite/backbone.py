"""Camera-free image-to-triplane transformer (forward pass only).

Image patches are embedded and run through a self-attention encoder. A set
of learned triplane tokens is then refined by backbone layers, each made of
self-attention over the triplane tokens, cross-attention onto the image
tokens and a feed-forward sublayer (pre-norm, residual). The refined tokens
are folded into three coarse planes and passed through the upsampler.

Nothing here takes a camera: the network has to infer the viewpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .triplane import Triplane, UpsamplerParams, upsample


@dataclass(frozen=True)
class BackboneConfig:
    image_resolution: int = 512
    patch_size: int = 16
    encoder_layers: int = 12
    encoder_channels: int = 768
    encoder_heads: int = 12
    triplane_res: int = 32
    triplane_token_channels: int = 16
    backbone_channels: int = 1024
    backbone_layers: int = 16
    heads: int = 16
    head_dim: int = 64
    cross_attention_dim: int = 768
    upsample_factor: int = 2
    triplane_channels: int = 40
    extent: float = 0.87

    def __post_init__(self):
        if self.image_resolution % self.patch_size:
            raise ValueError("image resolution must be divisible by the patch size")
        if self.encoder_channels % self.encoder_heads:
            raise ValueError("encoder channels must split evenly across heads")

    @classmethod
    def paper(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls(image_resolution=64, patch_size=16, encoder_layers=2, encoder_channels=32,
                   encoder_heads=4, triplane_res=4, triplane_token_channels=8, backbone_channels=32,
                   backbone_layers=2, heads=4, head_dim=8, cross_attention_dim=32,
                   triplane_channels=8)

    @property
    def n_image_tokens(self) -> int:
        return (self.image_resolution // self.patch_size) ** 2

    @property
    def n_triplane_tokens(self) -> int:
        return 3 * self.triplane_res ** 2

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (n, width)
    kind: str  # "image" | "triplane"

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def __len__(self):
        return self.tokens.shape[0]


def shape_trace(cfg: BackboneConfig) -> list[tuple[str, tuple]]:
    """Closed-form tensor shapes of every stage, without allocating weights."""
    R, f = cfg.triplane_res, cfg.upsample_factor
    return [
        ("image", (cfg.image_resolution, cfg.image_resolution, 3)),
        ("image tokens", (cfg.n_image_tokens, cfg.encoder_channels)),
        ("triplane tokens", (cfg.n_triplane_tokens, cfg.triplane_token_channels)),
        ("backbone tokens", (cfg.n_triplane_tokens, cfg.backbone_channels)),
        ("attention heads", (cfg.heads, cfg.head_dim)),
        ("coarse planes", (3, R, R, cfg.backbone_channels)),
        ("final planes", (3, R * f, R * f, cfg.triplane_channels)),
    ]


def _dense(rng, fan_in, fan_out):
    return {"w": rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), "b": np.zeros(fan_out)}


def _norm(width):
    return {"gain": np.ones(width), "bias": np.zeros(width)}


def init_attention(rng, width, context_width, heads, head_dim):
    inner = heads * head_dim
    return {"norm": _norm(width), "q": _dense(rng, width, inner), "k": _dense(rng, context_width, inner),
            "v": _dense(rng, context_width, inner), "o": _dense(rng, inner, width),
            "heads": heads, "head_dim": head_dim}


def init_ffn(rng, width, expansion=4):
    return {"norm": _norm(width), "up": _dense(rng, width, expansion * width),
            "down": _dense(rng, expansion * width, width)}


@dataclass
class BackboneParams:
    patch_embed: dict
    image_pos: np.ndarray
    encoder: list
    triplane_tokens: np.ndarray
    token_proj: dict
    layers: list
    final_norm: dict
    upsampler: UpsamplerParams

    @classmethod
    def init(cls, rng, cfg: BackboneConfig) -> "BackboneParams":
        pdim = cfg.patch_size ** 2 * 3
        E = cfg.encoder_channels
        eh = cfg.encoder_heads
        encoder = [{"attn": init_attention(rng, E, E, eh, E // eh), "ffn": init_ffn(rng, E)}
                   for _ in range(cfg.encoder_layers)]
        B = cfg.backbone_channels
        layers = [{"self": init_attention(rng, B, B, cfg.heads, cfg.head_dim),
                   "cross": init_attention(rng, B, cfg.cross_attention_dim, cfg.heads, cfg.head_dim),
                   "ffn": init_ffn(rng, B)}
                  for _ in range(cfg.backbone_layers)]
        up = UpsamplerParams.init(rng, B, cfg.triplane_channels, cfg.upsample_factor, dtype=np.float64)
        return cls(_dense(rng, pdim, E), 0.02 * rng.normal(size=(cfg.n_image_tokens, E)), encoder,
                   rng.normal(size=(cfg.n_triplane_tokens, cfg.triplane_token_channels)),
                   _dense(rng, cfg.triplane_token_channels, B), layers, _norm(B), up)

    def flat(self, prefix="backbone"):
        """(name, array) pairs for checkpoint sections."""
        out = []

        def walk(name, obj):
            if isinstance(obj, dict):
                for k in sorted(obj):
                    walk(f"{name}.{k}", obj[k])
            elif isinstance(obj, list):
                for i, item in enumerate(obj):
                    walk(f"{name}.{i}", item)
            elif isinstance(obj, np.ndarray):
                out.append((name, obj))

        for fname in ("patch_embed", "image_pos", "encoder", "triplane_tokens", "token_proj", "layers",
                      "final_norm"):
            walk(f"{prefix}.{fname}", getattr(self, fname))
        out += [(f"{prefix}.upsampler.weight", self.upsampler.weight),
                (f"{prefix}.upsampler.bias", self.upsampler.bias)]
        return out


def layer_norm(x, p, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p["gain"] + p["bias"]


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def multi_head_attention(x, context, p):
    """Scaled dot-product attention before the output projection.

    ``x`` is (n, width), ``context`` (m, context_width). Returns the
    concatenated head outputs (n, heads*head_dim) and the weights
    (heads, n, m).
    """
    if x.shape[1] != p["q"]["w"].shape[0] or context.shape[1] != p["k"]["w"].shape[0]:
        raise ValueError("token width does not match attention projections")
    h, d = p["heads"], p["head_dim"]
    q = (x @ p["q"]["w"] + p["q"]["b"]).reshape(-1, h, d).transpose(1, 0, 2)
    k = (context @ p["k"]["w"] + p["k"]["b"]).reshape(-1, h, d).transpose(1, 0, 2)
    v = (context @ p["v"]["w"] + p["v"]["b"]).reshape(-1, h, d).transpose(1, 0, 2)
    weights = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d))
    out = (weights @ v).transpose(1, 0, 2).reshape(x.shape[0], h * d)
    return out, weights


def attend(x, context, p, self_attention=False):
    """Pre-norm attention sublayer with residual."""
    xn = layer_norm(x, p["norm"])
    ctx = xn if self_attention else context
    out, _ = multi_head_attention(xn, ctx, p)
    return x + out @ p["o"]["w"] + p["o"]["b"]


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def feed_forward(x, p):
    h = _gelu(layer_norm(x, p["norm"]) @ p["up"]["w"] + p["up"]["b"])
    return x + h @ p["down"]["w"] + p["down"]["b"]


def attention_layer(queries: TokenSequence, context: TokenSequence, params: dict) -> TokenSequence:
    """One attention sublayer (self if ``context is queries``) plus feed-forward."""
    is_self = context is queries
    x = attend(queries.tokens, context.tokens, params["attn"], self_attention=is_self)
    return TokenSequence(feed_forward(x, params["ffn"]), queries.kind)


def tokenize_image(img: np.ndarray, cfg: BackboneConfig, params: BackboneParams) -> TokenSequence:
    img = np.asarray(img, dtype=np.float64)
    res, ps = cfg.image_resolution, cfg.patch_size
    if img.shape != (res, res, 3):
        raise ValueError(f"expected a {res}x{res}x3 image, got {img.shape}")
    n = res // ps
    patches = img.reshape(n, ps, n, ps, 3).transpose(0, 2, 1, 3, 4).reshape(n * n, ps * ps * 3)
    tokens = patches @ params.patch_embed["w"] + params.patch_embed["b"] + params.image_pos
    return TokenSequence(tokens, "image")


def init_triplane_tokens(cfg: BackboneConfig, params: BackboneParams) -> TokenSequence:
    t = params.triplane_tokens @ params.token_proj["w"] + params.token_proj["b"]
    return TokenSequence(t, "triplane")


def encode_image(img, cfg: BackboneConfig, params: BackboneParams) -> TokenSequence:
    seq = tokenize_image(img, cfg, params)
    for layer in params.encoder:
        seq = attention_layer(seq, seq, layer)
    return seq


def decode_triplane_tokens(cfg: BackboneConfig, params: BackboneParams, image_tokens=None):
    """Backbone over triplane tokens; ``image_tokens=None`` skips cross-attention."""
    x = init_triplane_tokens(cfg, params).tokens
    for layer in params.layers:
        x = attend(x, x, layer["self"], self_attention=True)
        if image_tokens is not None:
            x = attend(x, image_tokens.tokens, layer["cross"])
        x = feed_forward(x, layer["ffn"])
    return TokenSequence(layer_norm(x, params.final_norm), "triplane")


def tokens_to_planes(seq: TokenSequence, cfg: BackboneConfig) -> Triplane:
    R = cfg.triplane_res
    return Triplane(seq.tokens.reshape(3, R, R, seq.width), cfg.extent)


def image_to_triplane(img, cfg: BackboneConfig, params: BackboneParams, return_coarse=False):
    image_tokens = encode_image(img, cfg, params)
    coarse = tokens_to_planes(decode_triplane_tokens(cfg, params, image_tokens), cfg)
    final = upsample(coarse, params.upsampler)
    return (coarse, final) if return_coarse else final


def zero_cross_values(params: BackboneParams) -> BackboneParams:
    """Copy of ``params`` whose cross-attention value projections are zero."""
    layers = []
    for layer in params.layers:
        cross = dict(layer["cross"])
        cross["v"] = {"w": np.zeros_like(cross["v"]["w"]), "b": np.zeros_like(cross["v"]["b"])}
        layers.append({**layer, "cross": cross})
    return replace(params, layers=layers)
