"""Two-branch masked autoencoder over point clusters and image patches.

Data flow per scene:

  visible clusters -> point embed -> E_P -+
                                          +-> concat -> E_S -> project
  visible patches  -> patch embed -> E_I -+                     |
                                                                v
  mask tokens (+PE +ME) fill the masked slots -> D_S -> split into D_P and
  D_I -> reconstruction heads

Token order is fixed everywhere: point slots first (cluster index order),
then image slots (patch index order). Within the encoder only visible
tokens exist; the decoder always sees every slot.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ShapeMismatch, UnknownToken
from .geometry import PatchGrid
from .tokenizer import ImagePatchSet, PointTokenSet

BRANCH_MODES = ("both", "point_only", "image_only")


@dataclass(frozen=True)
class ModelConfig:
    enc_dim: int = 256
    enc_heads: int = 4
    dec_dim: int = 192
    dec_heads: int = 3
    depth_specific_enc: int = 3
    depth_shared_enc: int = 3
    depth_shared_dec: int = 1
    depth_specific_dec: int = 2
    patch_size: int = 16
    num_clusters: int = 128
    group_size: int = 16
    branches: str = "both"
    cross_modal: bool = True
    point_mlp_hidden: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.enc_dim % self.enc_heads:
            raise ShapeMismatch("enc_dim must divide evenly into enc_heads")
        if self.dec_dim % self.dec_heads:
            raise ShapeMismatch("dec_dim must divide evenly into dec_heads")
        for d in (self.depth_specific_enc, self.depth_shared_enc,
                  self.depth_shared_dec, self.depth_specific_dec):
            if d < 0:
                raise ShapeMismatch("stack depths must be >= 0")
        if self.branches not in BRANCH_MODES:
            raise ShapeMismatch(f"branches must be one of {BRANCH_MODES}")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ShapeMismatch("dims must be multiples of 4 for sin-cos tables")

    @property
    def point_branch(self) -> bool:
        return self.branches in ("both", "point_only")

    @property
    def image_branch(self) -> bool:
        return self.branches in ("both", "image_only")

    @property
    def cross_enabled(self) -> bool:
        return self.cross_modal and self.branches == "both"

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class LatentBatch:
    """Per-stage activations plus slot bookkeeping for one scene."""
    l1_point: dc.Tensor | None = None   # visible point tokens after E_P
    l1_image: dc.Tensor | None = None   # visible image tokens after E_I
    l2: dc.Tensor | None = None         # joint visible tokens after E_S
    l3_point: dc.Tensor | None = None   # all m point slots after the shared decoder
    l3_image: dc.Tensor | None = None   # all patch slots after the shared decoder
    d_point: dc.Tensor | None = None    # D_P output
    d_image: dc.Tensor | None = None    # D_I output
    visible_point_ids: np.ndarray | None = None
    masked_point_ids: np.ndarray | None = None
    visible_patch_ids: np.ndarray | None = None
    masked_patch_ids: np.ndarray | None = None
    attn: dict = field(default_factory=dict)   # layer name -> (heads, n, n)
    attn_order: list = field(default_factory=list)

    @property
    def n_visible_point(self) -> int:
        return 0 if self.visible_point_ids is None else len(self.visible_point_ids)

    @property
    def n_visible_image(self) -> int:
        return 0 if self.visible_patch_ids is None else len(self.visible_patch_ids)


@dataclass
class Predictions:
    image_pixels: dc.Tensor | None   # (masked patches, S*S*3)
    point_offsets: dc.Tensor | None  # (masked clusters, k, 3)
    cross: dc.Tensor | None          # (masked clusters, dec_dim)


# --- parameters ---

def param_shapes(cfg: ModelConfig) -> dict:
    """Every learned tensor's shape, in a fixed order."""
    e, d = cfg.enc_dim, cfg.dec_dim
    shapes = {}

    def stack(prefix, depth, dim):
        hidden = dim * cfg.mlp_ratio
        for i in range(depth):
            p = f"{prefix}.{i}"
            shapes[f"{p}.ln1.g"] = (dim,)
            shapes[f"{p}.ln1.b"] = (dim,)
            for name in ("q", "k", "v", "o"):
                shapes[f"{p}.attn.{name}.w"] = (dim, dim)
                # no key bias: softmax is shift-invariant per row, so a key
                # bias adds a constant to every score and can never train
                if name != "k":
                    shapes[f"{p}.attn.{name}.b"] = (dim,)
            shapes[f"{p}.ln2.g"] = (dim,)
            shapes[f"{p}.ln2.b"] = (dim,)
            shapes[f"{p}.mlp.fc1.w"] = (dim, hidden)
            shapes[f"{p}.mlp.fc1.b"] = (hidden,)
            shapes[f"{p}.mlp.fc2.w"] = (hidden, dim)
            shapes[f"{p}.mlp.fc2.b"] = (dim,)
        if depth > 0:
            shapes[f"{prefix}.norm.g"] = (dim,)
            shapes[f"{prefix}.norm.b"] = (dim,)

    if cfg.point_branch:
        shapes["point_mlp.fc1.w"] = (3, cfg.point_mlp_hidden)
        shapes["point_mlp.fc1.b"] = (cfg.point_mlp_hidden,)
        shapes["point_mlp.fc2.w"] = (cfg.point_mlp_hidden, e)
        shapes["point_mlp.fc2.b"] = (e,)
        shapes["pos_enc.fc1.w"] = (3, e)
        shapes["pos_enc.fc1.b"] = (e,)
        shapes["pos_enc.fc2.w"] = (e, e)
        shapes["pos_enc.fc2.b"] = (e,)
        shapes["pos_dec.fc1.w"] = (3, d)
        shapes["pos_dec.fc1.b"] = (d,)
        shapes["pos_dec.fc2.w"] = (d, d)
        shapes["pos_dec.fc2.b"] = (d,)
        shapes["me_enc.point"] = (e,)
        shapes["me_dec.point"] = (d,)
        shapes["mask_token.point"] = (d,)
    if cfg.image_branch:
        shapes["image_embed.w"] = (cfg.patch_dim, e)
        shapes["image_embed.b"] = (e,)
        shapes["me_enc.image"] = (e,)
        shapes["me_dec.image"] = (d,)
        shapes["mask_token.image"] = (d,)

    if cfg.point_branch:
        stack("enc_point", cfg.depth_specific_enc, e)
    if cfg.image_branch:
        stack("enc_image", cfg.depth_specific_enc, e)
    stack("enc_shared", cfg.depth_shared_enc, e)
    shapes["enc_to_dec.w"] = (e, d)
    shapes["enc_to_dec.b"] = (d,)
    stack("dec_shared", cfg.depth_shared_dec, d)
    if cfg.point_branch:
        stack("dec_point", cfg.depth_specific_dec, d)
        shapes["head_point.w"] = (d, cfg.group_size * 3)
        shapes["head_point.b"] = (cfg.group_size * 3,)
    if cfg.image_branch:
        stack("dec_image", cfg.depth_specific_dec, d)
        shapes["head_image.w"] = (d, cfg.patch_dim)
        shapes["head_image.b"] = (cfg.patch_dim,)
    if cfg.cross_enabled:
        shapes["head_cross.w"] = (d, d)
        shapes["head_cross.b"] = (d,)
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn until everything lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameter dict: trunc-normal linears, zero biases, unit LN."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "b":
            data = np.zeros(shape)
        elif leaf == "g":
            data = np.ones(shape)
        else:
            data = _trunc_normal(rng, shape)
        weights[name] = dc.parameter(data)
    return weights


def zero_grads(weights: dict):
    for p in weights.values():
        p.zero_grad()


# --- positional tables ---

_SINCOS_CACHE: dict = {}


def sincos_table(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2D sin-cos embedding, row-major patch order, shape (rows*cols, dim)."""
    key = (rows, cols, dim)
    if key not in _SINCOS_CACHE:
        if dim % 4:
            raise ShapeMismatch("sin-cos dim must be a multiple of 4")
        half = dim // 2

        def axis(n):
            omega = 1.0 / 10000.0 ** (np.arange(half // 2) / (half // 2))
            ang = np.arange(n)[:, None] * omega[None, :]
            return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

        re, ce = axis(rows), axis(cols)
        table = np.concatenate(
            [np.repeat(re, cols, axis=0), np.tile(ce, (rows, 1))], axis=1)
        _SINCOS_CACHE[key] = table
    return _SINCOS_CACHE[key]


# --- building blocks ---

def _cols(t, lo, hi):
    # column slice via the row primitives
    return dc.transpose(dc.gather_rows(dc.transpose(t), np.arange(lo, hi)))


def _attention(x, weights, prefix, heads, latents):
    n, dim = x.shape
    hd = dim // heads
    q = dc.linear(x, weights[f"{prefix}.attn.q.w"], weights[f"{prefix}.attn.q.b"])
    k = dc.matmul(x, weights[f"{prefix}.attn.k.w"])
    v = dc.linear(x, weights[f"{prefix}.attn.v.w"], weights[f"{prefix}.attn.v.b"])
    outs, maps = [], []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        scores = dc.matmul(_cols(q, lo, hi), dc.transpose(_cols(k, lo, hi)))
        attn = dc.softmax(dc.scale(scores, 1.0 / math.sqrt(hd)), axis=-1)
        if latents is not None:
            maps.append(attn.data.copy())
        outs.append(dc.matmul(attn, _cols(v, lo, hi)))
    if latents is not None:
        latents.attn[prefix] = np.stack(maps)
        latents.attn_order.append(prefix)
    merged = dc.concat(outs, axis=1) if heads > 1 else outs[0]
    return dc.linear(merged, weights[f"{prefix}.attn.o.w"], weights[f"{prefix}.attn.o.b"])


def _block(x, weights, prefix, heads, latents):
    h = dc.layer_norm(x, weights[f"{prefix}.ln1.g"], weights[f"{prefix}.ln1.b"])
    x = dc.add(x, _attention(h, weights, prefix, heads, latents))
    h = dc.layer_norm(x, weights[f"{prefix}.ln2.g"], weights[f"{prefix}.ln2.b"])
    h = dc.linear(h, weights[f"{prefix}.mlp.fc1.w"], weights[f"{prefix}.mlp.fc1.b"])
    h = dc.linear(dc.gelu(h), weights[f"{prefix}.mlp.fc2.w"], weights[f"{prefix}.mlp.fc2.b"])
    return dc.add(x, h)


def run_stack(x, weights, stack, depth, heads, latents=None):
    """Depth pre-norm blocks plus a closing LayerNorm; depth 0 is identity."""
    if depth == 0:
        return x
    for i in range(depth):
        x = _block(x, weights, f"{stack}.{i}", heads, latents)
    return dc.layer_norm(x, weights[f"{stack}.norm.g"], weights[f"{stack}.norm.b"])


def _pos_mlp(centers, weights, prefix):
    x = dc.tensor(np.asarray(centers, dtype=np.float64))
    h = dc.gelu(dc.linear(x, weights[f"{prefix}.fc1.w"], weights[f"{prefix}.fc1.b"]))
    return dc.linear(h, weights[f"{prefix}.fc2.w"], weights[f"{prefix}.fc2.b"])


def _group_max_pool(x, n, k, d):
    """Channelwise max over each group of k rows; exact subgradient routing."""
    cube = dc.reshape(x, (n, k, d))
    arg = cube.data.argmax(axis=1)
    onehot = np.zeros((n, k, d))
    onehot[np.arange(n)[:, None], arg, np.arange(d)[None, :]] = 1.0
    return dc.scale(dc.mean_reduce(dc.mul(cube, dc.tensor(onehot)), axis=1), float(k))


def _row(weights, name):
    return dc.reshape(weights[name], (1, weights[name].shape[0]))


# --- embedders ---

def embed_point_tokens(tokens: PointTokenSet, points, weights, cfg: ModelConfig):
    """Visible clusters -> enc_dim tokens: MLP over center-relative points,
    max-pooled per group, plus positional MLP(center) and the modality vector."""
    vis = tokens.visible_ids
    groups = tokens.groups[vis]
    centers = tokens.centers[vis]
    rel = np.asarray(points)[groups] - centers[:, None, :]
    h = dc.tensor(rel.reshape(-1, 3))
    h = dc.gelu(dc.linear(h, weights["point_mlp.fc1.w"], weights["point_mlp.fc1.b"]))
    h = dc.linear(h, weights["point_mlp.fc2.w"], weights["point_mlp.fc2.b"])
    pooled = _group_max_pool(h, len(vis), tokens.k, cfg.enc_dim)
    pe = _pos_mlp(centers, weights, "pos_enc")
    return dc.add(dc.add(pooled, pe), _row(weights, "me_enc.point"))


def embed_image_tokens(patches: ImagePatchSet, weights, cfg: ModelConfig):
    """Visible patches -> enc_dim tokens: linear embed + sin-cos PE + ME."""
    vis = patches.visible_ids
    x = dc.tensor(patches.patches[vis])
    t = dc.linear(x, weights["image_embed.w"], weights["image_embed.b"])
    table = sincos_table(patches.grid.rows, patches.grid.cols, cfg.enc_dim)
    pe = dc.tensor(table[vis])
    return dc.add(dc.add(t, pe), _row(weights, "me_enc.image"))


# --- encoder / decoder ---

def encode(vis_pc, vis_img, weights, cfg: ModelConfig, latents=None) -> LatentBatch:
    """Specific stacks per modality, then the shared stack over the
    concatenation. Either input may be None when its branch is off."""
    if latents is None:
        latents = LatentBatch()
    parts = []
    if vis_pc is not None:
        latents.l1_point = run_stack(vis_pc, weights, "enc_point",
                                     cfg.depth_specific_enc, cfg.enc_heads, latents)
        parts.append(latents.l1_point)
    if vis_img is not None:
        latents.l1_image = run_stack(vis_img, weights, "enc_image",
                                     cfg.depth_specific_enc, cfg.enc_heads, latents)
        parts.append(latents.l1_image)
    if not parts:
        raise ShapeMismatch("encode called with both branches empty")
    joint = dc.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    latents.l2 = run_stack(joint, weights, "enc_shared",
                           cfg.depth_shared_enc, cfg.enc_heads, latents)
    return latents


def _assemble(visible_rows, masked_rows, visible_ids, masked_ids):
    """Interleave decoder rows back into slot order."""
    if len(masked_ids) == 0:
        stacked, order = visible_rows, visible_ids
    elif len(visible_ids) == 0:
        stacked, order = masked_rows, masked_ids
    else:
        stacked = dc.concat([visible_rows, masked_rows], axis=0)
        order = np.concatenate([visible_ids, masked_ids])
    return dc.gather_rows(stacked, np.argsort(order, kind="stable"))


def decode(latents: LatentBatch, tokens, patches, weights, cfg: ModelConfig) -> LatentBatch:
    """Project encoder tokens to dec_dim, fill masked slots with mask tokens
    (plus PE and ME), run shared then specific decoder stacks."""
    proj = dc.linear(latents.l2, weights["enc_to_dec.w"], weights["enc_to_dec.b"])
    n_p = len(tokens.visible_ids) if cfg.point_branch else 0
    seqs = []

    if cfg.point_branch:
        vis_ids, mask_ids = tokens.visible_ids, tokens.masked_ids
        proj_p = dc.gather_rows(proj, np.arange(n_p))
        if len(mask_ids):
            base = dc.add(_row(weights, "mask_token.point"), _row(weights, "me_dec.point"))
            masked_rows = dc.add(_pos_mlp(tokens.centers[mask_ids], weights, "pos_dec"), base)
        else:
            masked_rows = None
        seq_p = _assemble(proj_p, masked_rows, vis_ids, mask_ids)
        latents.visible_point_ids = vis_ids
        latents.masked_point_ids = mask_ids
        seqs.append(seq_p)

    if cfg.image_branch:
        vis_ids, mask_ids = patches.visible_ids, patches.masked_ids
        off = n_p if cfg.point_branch else 0
        proj_i = dc.gather_rows(proj, np.arange(off, off + len(vis_ids)))
        if len(mask_ids):
            table = sincos_table(patches.grid.rows, patches.grid.cols, cfg.dec_dim)
            base = dc.add(_row(weights, "mask_token.image"), _row(weights, "me_dec.image"))
            masked_rows = dc.add(dc.tensor(table[mask_ids]), base)
        else:
            masked_rows = None
        seq_i = _assemble(proj_i, masked_rows, vis_ids, mask_ids)
        latents.visible_patch_ids = vis_ids
        latents.masked_patch_ids = mask_ids
        seqs.append(seq_i)

    joint = dc.concat(seqs, axis=0) if len(seqs) > 1 else seqs[0]
    l3 = run_stack(joint, weights, "dec_shared",
                   cfg.depth_shared_dec, cfg.dec_heads, latents)

    m = tokens.m if cfg.point_branch else 0
    if cfg.point_branch:
        latents.l3_point = dc.gather_rows(l3, np.arange(m))
        latents.d_point = run_stack(latents.l3_point, weights, "dec_point",
                                    cfg.depth_specific_dec, cfg.dec_heads, latents)
    if cfg.image_branch:
        pc = patches.patch_count
        latents.l3_image = dc.gather_rows(l3, np.arange(m, m + pc))
        latents.d_image = run_stack(latents.l3_image, weights, "dec_image",
                                    cfg.depth_specific_dec, cfg.dec_heads, latents)
    return latents


def heads(latents: LatentBatch, weights, cfg: ModelConfig) -> Predictions:
    """Reconstruction heads over the masked slots of the specific decoders."""
    image_pixels = point_offsets = cross = None
    if cfg.image_branch and len(latents.masked_patch_ids):
        rows = dc.gather_rows(latents.d_image, latents.masked_patch_ids)
        image_pixels = dc.linear(rows, weights["head_image.w"], weights["head_image.b"])
    if cfg.point_branch and len(latents.masked_point_ids):
        rows = dc.gather_rows(latents.d_point, latents.masked_point_ids)
        flat = dc.linear(rows, weights["head_point.w"], weights["head_point.b"])
        point_offsets = dc.reshape(flat, (len(latents.masked_point_ids), cfg.group_size, 3))
        if cfg.cross_enabled:
            cross = dc.linear(rows, weights["head_cross.w"], weights["head_cross.b"])
    return Predictions(image_pixels=image_pixels, point_offsets=point_offsets,
                       cross=cross)


def attention_maps(latents: LatentBatch, layer, head: int, query: int) -> np.ndarray:
    """One softmax row from a retained attention map.

    layer is either an integer index into the forward order or a block name
    such as "enc_shared.0".
    """
    if isinstance(layer, int):
        if not 0 <= layer < len(latents.attn_order):
            raise UnknownToken(f"layer {layer} not retained (have {len(latents.attn_order)})")
        name = latents.attn_order[layer]
    else:
        name = str(layer)
        if name not in latents.attn:
            raise UnknownToken(f"layer {name!r} not retained")
    maps = latents.attn[name]
    if not 0 <= head < maps.shape[0]:
        raise UnknownToken(f"head {head} out of range for {name}")
    if not 0 <= query < maps.shape[1]:
        raise UnknownToken(f"query {query} out of range for {name}")
    return maps[head, query].copy()


def forward_pass(points, tokens, patches, weights, cfg: ModelConfig,
                 retain_attention: bool = False):
    """Embed, encode, decode, predict. Returns (LatentBatch, Predictions)."""
    vis_pc = embed_point_tokens(tokens, points, weights, cfg) if cfg.point_branch else None
    vis_img = embed_image_tokens(patches, weights, cfg) if cfg.image_branch else None
    latents = encode(vis_pc, vis_img, weights, cfg)
    latents = decode(latents, tokens, patches, weights, cfg)
    if not retain_attention:
        latents.attn.clear()
        latents.attn_order.clear()
    return latents, heads(latents, weights, cfg)
