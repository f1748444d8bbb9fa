"""Four-stage pyramid encoder over a concatenated text+image sequence.

Each stage re-embeds both modalities at the stage width, concatenates the
language sequence (fixed length L) with the flattened vision grid, and runs
a stack of pre-norm transformer layers whose attention keys/values use a
spatially reduced copy of the vision part. Only the vision grid shrinks
from stage to stage.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .modules import LayerNorm, Linear, Module, PatchConv, uniform_init


class LanguageEmbed(Module):
    """Project the previous language state (or look up token ids) and add
    a learned per-position matrix."""

    def __init__(self, out_dim: int, length: int, rng,
                 in_dim: int | None = None, vocab_size: int | None = None):
        if vocab_size is not None:
            self.table = uniform_init(rng, (vocab_size, out_dim), out_dim)
        else:
            self.proj = Linear(in_dim, out_dim, rng)
        self.pos = ad.parameter(np.zeros((length, out_dim)))

    def __call__(self, x) -> Tensor:
        if hasattr(self, "table"):
            embedded = ad.take_rows(self.table, x)
        else:
            embedded = self.proj(x)
        return ad.add(embedded, self.pos)


class VisionEmbed(Module):
    """Strided patch conv to the stage width, flattened to a sequence."""

    def __init__(self, in_ch: int, out_dim: int, stride: int,
                 n_positions: int, rng):
        self.conv = PatchConv(in_ch, out_dim, stride, rng)
        self.pos = ad.parameter(np.zeros((n_positions, out_dim)))

    def __call__(self, x: Tensor):
        y = self.conv(x)
        d, h, w = y.shape
        seq = ad.transpose(ad.reshape(y, (d, h * w)), (1, 0))
        return ad.add(seq, self.pos), (h, w)


class EncoderLayer(Module):
    """Pre-norm block: reduced-key attention, then a two-layer MLP."""

    def __init__(self, dim: int, heads: int, sr: int, mlp_ratio: int, rng):
        self.norm1 = LayerNorm(dim)
        self.to_q = Linear(dim, dim, rng)
        self.to_k = Linear(dim, dim, rng)
        self.to_v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        if sr > 1:
            self.reduce = PatchConv(dim, dim, sr, rng)
            self.norm_kv = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)
        self.heads = heads
        self.sr = sr

    def __call__(self, z: Tensor, lang_len: int, grid, mask=None, capture=None):
        a = self.norm1(z)
        q = self.to_q(a)
        if self.sr > 1:
            h, w = grid
            d = z.shape[1]
            lang = ad.slice_rows(a, 0, lang_len)
            vis = ad.slice_rows(a, lang_len, z.shape[0])
            vmap = ad.transpose(ad.reshape(vis, (h, w, d)), (2, 0, 1))
            red = self.reduce(vmap)
            _, hr, wr = red.shape
            red_seq = ad.transpose(ad.reshape(red, (d, hr * wr)), (1, 0))
            kv_src = ad.concat([lang, self.norm_kv(red_seq)], axis=0)
        else:
            kv_src = a
        att = ad.attention(q, self.to_k(kv_src), self.to_v(kv_src), self.heads,
                           mask=mask, need_weights=capture is not None)
        if capture is not None:
            att, weights = att
            capture.append(weights)
        z = ad.add(z, self.out(att))
        b = self.norm2(z)
        return ad.add(z, self.fc2(ad.gelu(self.fc1(b))))


class Stage(Module):
    def __init__(self, lang: LanguageEmbed, vis: VisionEmbed, layers: list):
        self.lang = lang
        self.vis = vis
        self.layers = layers


class PyramidEncoder(Module):
    """The full four-stage encoder.

    ``forward`` takes a channel-first image tensor and integer token ids and
    returns the per-stage language states (each L x D_k) and vision states
    (each D_k x H/R_k x W/R_k).
    """

    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.length = cfg.length
        self.pad_attention_mask = cfg.pad_attention_mask
        self.stages = []
        grid = cfg.image_size
        prev_dim = None
        in_ch = 3
        for k, st in enumerate(cfg.stages()):
            grid //= st.stride
            lang = LanguageEmbed(st.dim, cfg.length, rng,
                                 in_dim=prev_dim,
                                 vocab_size=vocab_size if k == 0 else None)
            vis = VisionEmbed(in_ch, st.dim, st.stride, grid * grid, rng)
            layers = [EncoderLayer(st.dim, st.heads, st.sr, st.mlp_ratio, rng)
                      for _ in range(st.layers)]
            self.stages.append(Stage(lang, vis, layers))
            prev_dim = st.dim
            in_ch = st.dim
        self._stage_cfg = cfg.stages()

    def _key_mask(self, pad: np.ndarray | None, n_q: int, n_kv: int):
        if pad is None or not pad.any():
            return None
        mask = np.zeros((n_q, n_kv), dtype=bool)
        mask[:, : self.length] = pad[None, :]
        return mask

    def run_stage(self, k: int, lang_in, vis_in: Tensor,
                  pad: np.ndarray | None = None, capture=None):
        """One stage: embed both parts, encode, split back apart."""
        stage = self.stages[k]
        st = self._stage_cfg[k]
        m = stage.lang(lang_in)
        n, (h, w) = stage.vis(vis_in)
        z = ad.concat([m, n], axis=0)
        n_red = (h // st.sr) * (w // st.sr) if st.sr > 1 else h * w
        mask = self._key_mask(pad, self.length + h * w, self.length + n_red)
        for layer in stage.layers:
            z = layer(z, self.length, (h, w), mask=mask, capture=capture)
        t_out = ad.slice_rows(z, 0, self.length)
        v_seq = ad.slice_rows(z, self.length, z.shape[0])
        v_out = ad.transpose(ad.reshape(v_seq, (h, w, st.dim)), (2, 0, 1))
        return t_out, v_out

    def forward(self, image: Tensor, token_ids: np.ndarray,
                valid: np.ndarray | None = None, capture=None):
        if token_ids.shape[0] != self.length:
            raise ad.ShapeError(f"token sequence length {token_ids.shape[0]} != {self.length}")
        pad = None
        if self.pad_attention_mask and valid is not None:
            pad = ~valid
        lang_states, vision_states = [], []
        lang_in, vis_in = token_ids, image
        for k in range(4):
            t_out, v_out = self.run_stage(k, lang_in, vis_in, pad=pad, capture=capture)
            lang_states.append(t_out)
            vision_states.append(v_out)
            lang_in, vis_in = t_out, v_out
        return lang_states, vision_states
