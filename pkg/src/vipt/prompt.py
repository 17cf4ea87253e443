"""Modality-complementary prompters and the prompted forward pass.

The RGB flow runs through the frozen encoder untouched; a second flow built
from the auxiliary image is turned into prompts by MCP blocks and added to
the RGB tokens as residuals in front of selected encoder layers.
"""

from __future__ import annotations

from . import tensor as T
from .config import FoundationConfig, PromptConfig
from .foundation import BoxPrediction, TokenSeq, embed_rgb, encoder_layer, finish, patchify
from .params import ParamSpec
from .tensor import ShapeError, Tensor


def prompt_specs(fcfg: FoundationConfig, pcfg: PromptConfig) -> dict[str, ParamSpec]:
    d, lat, p = fcfg.dim, pcfg.latent, fcfg.patch
    specs = {
        "prompt.patch.weight": ParamSpec((pcfg.aux_channels * p * p, d), "prompt", "xavier"),
        "prompt.patch.bias": ParamSpec((d,), "prompt", "zeros"),
    }
    if pcfg.mode == "vipt":
        for l in pcfg.layers(fcfg.layers):
            b = f"prompt.mcp.{l}"
            specs[f"{b}.g1.weight"] = ParamSpec((d, lat), "prompt", "xavier")
            specs[f"{b}.g1.bias"] = ParamSpec((lat,), "prompt", "zeros")
            specs[f"{b}.g2.weight"] = ParamSpec((d, lat), "prompt", "xavier")
            specs[f"{b}.g2.bias"] = ParamSpec((lat,), "prompt", "zeros")
            specs[f"{b}.g3.weight"] = ParamSpec((lat, d), "prompt", "xavier")
            specs[f"{b}.g3.bias"] = ParamSpec((d,), "prompt", "zeros")
            specs[f"{b}.lam"] = ParamSpec((), "prompt", "const:1.0")
    else:
        n = fcfg.n_z + fcfg.n_x
        for l in pcfg.layers(fcfg.layers):
            specs[f"prompt.table.{l}"] = ParamSpec((n, d), "prompt", "xavier")
    return specs


def mcp_block_size(dim: int, latent: int) -> int:
    return 2 * (dim * latent + latent) + (latent * dim + dim) + 1


def aux_embed_size(channels: int, patch: int, dim: int) -> int:
    return channels * patch * patch * dim + dim


def patch_embed_aux(z_aux, x_aux, params, fcfg: FoundationConfig) -> TokenSeq:
    """Auxiliary tokens ``[z; x]`` from the trainable embedding (no positional term)."""
    w, b = params["prompt.patch.weight"], params["prompt.patch.bias"]
    hz = T.linear_per_token(patchify(T.as_tensor(z_aux), fcfg.patch), w, b)
    hx = T.linear_per_token(patchify(T.as_tensor(x_aux), fcfg.patch), w, b)
    if hz.shape[0] != fcfg.n_z or hx.shape[0] != fcfg.n_x:
        raise ShapeError(f"aux token counts {hz.shape[0]}/{hx.shape[0]} != {fcfg.n_z}/{fcfg.n_x}")
    return TokenSeq(T.concat([hz, hx], axis=0), hz.shape[0], hx.shape[0])


def fovea(m: Tensor, lam: Tensor) -> Tensor:
    """Per-channel spatial softmax scaled by ``lam``, used as a mask on ``m[d, H, W]``."""
    c, h, w = m.shape
    flat = T.reshape(m, (c, h * w))
    mask = T.softmax(flat, axis=1) * lam
    return T.reshape(flat * mask, (c, h, w))


def fovea_mask(m: Tensor, lam: Tensor) -> Tensor:
    c, h, w = m.shape
    return T.reshape(T.softmax(T.reshape(m, (c, h * w)), axis=1) * lam, (c, h, w))


def _fovea_tokens(m: Tensor, lam: Tensor, grid: int) -> Tensor:
    # [n, c] token group -> [c, g, g] grid -> fovea -> back to [n, c]
    n, c = m.shape
    grid_map = T.reshape(T.transpose(m, (1, 0)), (c, grid, grid))
    return T.transpose(T.reshape(fovea(grid_map, lam), (c, n)), (1, 0))


def mcp_block(h_prev: TokenSeq, p_prev: TokenSeq, params, prefix: str, fcfg: FoundationConfig) -> TokenSeq:
    """One prompter: project both flows down, fovea on the RGB flow, add, project up."""
    m_rgb = T.linear_per_token(h_prev.tokens, params[f"{prefix}.g1.weight"], params[f"{prefix}.g1.bias"])
    m_aux = T.linear_per_token(p_prev.tokens, params[f"{prefix}.g2.weight"], params[f"{prefix}.g2.bias"])
    lam = params[f"{prefix}.lam"]
    nz = h_prev.n_z
    m_e = T.concat(
        [_fovea_tokens(m_rgb[:nz], lam, fcfg.grid_z), _fovea_tokens(m_rgb[nz:], lam, fcfg.grid_x)],
        axis=0,
    )
    out = T.linear_per_token(m_e + m_aux, params[f"{prefix}.g3.weight"], params[f"{prefix}.g3.bias"])
    return h_prev.with_tokens(out)


def inject(h: TokenSeq, p: TokenSeq) -> TokenSeq:
    if h.tokens.shape != p.tokens.shape:
        raise ShapeError(f"inject: {h.tokens.shape} vs {p.tokens.shape}")
    return h.with_tokens(h.tokens + p.tokens)


def _check_aligned(rgb, aux, what: str) -> None:
    if T.as_tensor(rgb).shape[1:] != T.as_tensor(aux).shape[1:]:
        raise ShapeError(f"{what}: aux geometry {T.as_tensor(aux).shape} differs from rgb {T.as_tensor(rgb).shape}")


def forward_prompted(
    z_rgb, x_rgb, z_aux, x_aux, params, fcfg: FoundationConfig, pcfg: PromptConfig
) -> tuple[TokenSeq, BoxPrediction]:
    if pcfg.mode == "vpt_sum":
        return vpt_sum_forward(z_rgb, x_rgb, z_aux, x_aux, params, fcfg, pcfg)
    _check_aligned(z_rgb, z_aux, "template")
    _check_aligned(x_rgb, x_aux, "search")
    placement = set(pcfg.layers(fcfg.layers))
    h = embed_rgb(z_rgb, x_rgb, params, fcfg)
    p = patch_embed_aux(z_aux, x_aux, params, fcfg)
    for l in range(1, fcfg.layers + 1):
        if l in placement:
            p = mcp_block(h, p, params, f"prompt.mcp.{l}", fcfg)
            h = encoder_layer(inject(h, p), params, fcfg, l - 1)
        else:
            h = encoder_layer(h, params, fcfg, l - 1)
    return finish(h, params, fcfg)


def vpt_sum_forward(
    z_rgb, x_rgb, z_aux, x_aux, params, fcfg: FoundationConfig, pcfg: PromptConfig
) -> tuple[TokenSeq, BoxPrediction]:
    """Aux embedding summed into the input; ``deep`` adds a token table before every layer."""
    _check_aligned(z_rgb, z_aux, "template")
    _check_aligned(x_rgb, x_aux, "search")
    h = inject(embed_rgb(z_rgb, x_rgb, params, fcfg), patch_embed_aux(z_aux, x_aux, params, fcfg))
    tables = set(pcfg.layers(fcfg.layers))
    for l in range(1, fcfg.layers + 1):
        if l in tables:
            h = h.with_tokens(h.tokens + params[f"prompt.table.{l}"])
        h = encoder_layer(h, params, fcfg, l - 1)
    return finish(h, params, fcfg)
