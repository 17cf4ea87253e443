"""Frozen RGB foundation tracker: patch embedding, ViT encoder, center head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import FoundationConfig
from .params import ParamSpec
from .tensor import ShapeError, Tensor

HEAD_MAPS = (("cls", 1), ("offset", 2), ("size", 2))


@dataclass
class TokenSeq:
    """``[N_z + N_x, D]`` tokens, exemplar first."""

    tokens: Tensor
    n_z: int
    n_x: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.n_z + self.n_x:
            raise ShapeError(f"token count {self.tokens.shape[0]} != {self.n_z} + {self.n_x}")

    @property
    def template(self) -> Tensor:
        return self.tokens[: self.n_z]

    @property
    def search(self) -> Tensor:
        return self.tokens[self.n_z :]

    def with_tokens(self, tokens: Tensor) -> "TokenSeq":
        return TokenSeq(tokens, self.n_z, self.n_x)


@dataclass
class BoxPrediction:
    cls_map: Tensor  # [1, S, S]
    offset_map: Tensor  # [2, S, S]
    size_map: Tensor  # [2, S, S]
    box: tuple[float, float, float, float]  # cx, cy, w, h normalised to the search crop

    @property
    def score(self) -> float:
        return float(self.cls_map.data.max())


def foundation_specs(cfg: FoundationConfig) -> dict[str, ParamSpec]:
    d, f, p, c = cfg.dim, cfg.ffn_dim, cfg.patch, cfg.in_channels
    specs: dict[str, ParamSpec] = {}

    def add(name, shape, init):
        specs[f"foundation.{name}"] = ParamSpec(tuple(shape), "foundation", init)

    add("patch.weight", (c * p * p, d), "normal002")
    add("patch.bias", (d,), "zeros")
    add("pos_z", (cfg.n_z, d), "normal002")
    add("pos_x", (cfg.n_x, d), "normal002")
    for i in range(cfg.layers):
        b = f"blocks.{i}"
        add(f"{b}.ln1.gamma", (d,), "ones")
        add(f"{b}.ln1.beta", (d,), "zeros")
        add(f"{b}.attn.qkv.weight", (d, 3 * d), "normal002")
        add(f"{b}.attn.qkv.bias", (3 * d,), "zeros")
        add(f"{b}.attn.proj.weight", (d, d), "normal002")
        add(f"{b}.attn.proj.bias", (d,), "zeros")
        add(f"{b}.ln2.gamma", (d,), "ones")
        add(f"{b}.ln2.beta", (d,), "zeros")
        add(f"{b}.ffn.fc1.weight", (d, f), "normal002")
        add(f"{b}.ffn.fc1.bias", (f,), "zeros")
        add(f"{b}.ffn.fc2.weight", (f, d), "normal002")
        add(f"{b}.ffn.fc2.bias", (d,), "zeros")
    add("norm.gamma", (d,), "ones")
    add("norm.beta", (d,), "zeros")
    widths = (d, d // 2, d // 4)
    for name, out in HEAD_MAPS:
        chans = (*widths, out)
        for k in range(3):
            add(f"head.{name}.conv{k + 1}.weight", (chans[k + 1], chans[k], 3, 3), "kaiming")
            add(f"head.{name}.conv{k + 1}.bias", (chans[k + 1],), "zeros")
    return specs


def patchify(image: Tensor, patch: int) -> Tensor:
    """``[C, H, W]`` -> ``[(H/p)(W/p), C*p*p]``, patches in row-major grid order."""
    c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(image, (c, gh, patch, gw, patch))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    return T.reshape(x, (gh * gw, c * patch * patch))


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor, pos: Tensor, patch: int) -> Tensor:
    tokens = T.linear_per_token(patchify(T.as_tensor(image), patch), weight, bias)
    if tokens.shape != pos.shape:
        raise ShapeError(f"patch grid gives {tokens.shape}, positional table is {pos.shape}")
    return tokens + pos


def patch_embed_rgb(image, params, cfg: FoundationConfig, part: str) -> Tensor:
    """Embed the exemplar (``part='z'``) or search (``part='x'``) RGB crop."""
    return patch_embed(
        image,
        params["foundation.patch.weight"],
        params["foundation.patch.bias"],
        params[f"foundation.pos_{part}"],
        cfg.patch,
    )


def embed_rgb(z_img, x_img, params, cfg: FoundationConfig) -> TokenSeq:
    hz = patch_embed_rgb(z_img, params, cfg, "z")
    hx = patch_embed_rgb(x_img, params, cfg, "x")
    return TokenSeq(T.concat([hz, hx], axis=0), hz.shape[0], hx.shape[0])


def multi_head_attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    qkv = T.linear_per_token(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (n, 3, heads, dh)), (1, 2, 0, 3))  # [3, h, N, dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    out = T.reshape(T.transpose(T.matmul(att, v), (1, 0, 2)), (n, d))
    return T.linear_per_token(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def encoder_layer(h: TokenSeq, params, cfg: FoundationConfig, index: int) -> TokenSeq:
    """Pre-norm transformer layer ``index`` (0-based)."""
    b = f"foundation.blocks.{index}"
    x = h.tokens
    y = T.layer_norm(x, params[f"{b}.ln1.gamma"], params[f"{b}.ln1.beta"], cfg.ln_eps)
    x = x + multi_head_attention(y, params, f"{b}.attn", cfg.heads)
    y = T.layer_norm(x, params[f"{b}.ln2.gamma"], params[f"{b}.ln2.beta"], cfg.ln_eps)
    y = T.gelu(T.linear_per_token(y, params[f"{b}.ffn.fc1.weight"], params[f"{b}.ffn.fc1.bias"]))
    y = T.linear_per_token(y, params[f"{b}.ffn.fc2.weight"], params[f"{b}.ffn.fc2.bias"])
    return h.with_tokens(x + y)


def decode_box(cls_map: np.ndarray, offset_map: np.ndarray, size_map: np.ndarray) -> tuple[float, ...]:
    """Box at the cls argmax; ties go to the lowest flat index."""
    s = cls_map.shape[-1]
    i, j = divmod(int(np.argmax(cls_map.reshape(-1))), s)
    box = (
        (j + offset_map[0, i, j]) / s,
        (i + offset_map[1, i, j]) / s,
        size_map[0, i, j],
        size_map[1, i, j],
    )
    return tuple(float(np.clip(v, 0.0, 1.0)) for v in box)


def box_head(search_tokens: Tensor, params) -> BoxPrediction:
    n, d = search_tokens.shape
    s = int(round(np.sqrt(n)))
    if s * s != n:
        raise ShapeError(f"search token count {n} is not a perfect square")
    fmap = T.reshape(T.transpose(search_tokens, (1, 0)), (d, s, s))
    maps = {}
    for name, _ in HEAD_MAPS:
        y = fmap
        for k in (1, 2, 3):
            pre = f"foundation.head.{name}.conv{k}"
            y = T.conv2d(y, params[f"{pre}.weight"], params[f"{pre}.bias"])
            y = T.relu(y) if k < 3 else T.sigmoid(y)
        maps[name] = y
    box = decode_box(maps["cls"].data, maps["offset"].data, maps["size"].data)
    return BoxPrediction(maps["cls"], maps["offset"], maps["size"], box)


def finish(h: TokenSeq, params, cfg: FoundationConfig) -> tuple[TokenSeq, BoxPrediction]:
    """Final layer norm, then the head on the search tokens."""
    out = h.with_tokens(
        T.layer_norm(h.tokens, params["foundation.norm.gamma"], params["foundation.norm.beta"], cfg.ln_eps)
    )
    return out, box_head(out.search, params)


def forward_foundation(z_img, x_img, params, cfg: FoundationConfig) -> tuple[TokenSeq, BoxPrediction]:
    h = embed_rgb(z_img, x_img, params, cfg)
    for i in range(cfg.layers):
        h = encoder_layer(h, params, cfg, i)
    return finish(h, params, cfg)
