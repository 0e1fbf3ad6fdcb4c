"""Toy vision experts: two trainable encoder families plus the resolution
adaptation paths (position-embedding interpolation, tiling) and token-count
normalization.

Architectures:

* ``patch-linear``: patchify -> linear projection -> learned position grid
  -> ``depth`` mixing blocks ``x + W2*tanh(W1*x) + alpha*mean(x)``. The mean
  term gives every block a full-grid receptive field with a one-parameter
  backward pass.
* ``conv-stack``: ``depth`` stride-2 3x3 convolutions with tanh, channels
  doubling per layer from a base of 8, then a 1x1 linear projection to the
  embed dim. Purely local receptive fields, native high resolution.

Both forward passes carry caches so the analytic backward passes below can
push loss gradients into every parameter group and the input pixels.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensorlab import FeatureMap
from .fusion import TokenSequence

ARCH_PATCH_LINEAR = "patch-linear"
ARCH_CONV_STACK = "conv-stack"
CONV_BASE_CHANNELS = 8


class SpecValidationError(ValueError):
    """An ExpertSpec violates one of its structural invariants."""


class AdaptationRequiredError(ValueError):
    """An image resolution the expert cannot ingest without adaptation."""


@dataclass(frozen=True)
class ExpertSpec:
    """Configuration of one toy vision expert.

    ``post_process`` is ``none``, ``resize``, or ``pixel-unshuffle:<r>``;
    it is applied by :func:`normalize_tokens` before the resize to the
    target grid. ``patch_or_stride`` is the patch size for patch-linear
    and is ignored for conv-stack (whose downsampling is 2**depth).
    """

    name: str
    arch: str
    native_resolution: int
    patch_or_stride: int
    embed_dim: int
    depth: int = 0
    post_process: str = "none"
    frozen_default: bool = False


def validate_spec(spec: ExpertSpec) -> None:
    problems = []
    if not spec.name or not spec.name.replace("_", "").isalnum():
        problems.append(f"name {spec.name!r} is not an identifier")
    if spec.arch not in (ARCH_PATCH_LINEAR, ARCH_CONV_STACK):
        problems.append(f"unknown arch {spec.arch!r}")
    if spec.native_resolution < 1:
        problems.append("native_resolution must be positive")
    if spec.patch_or_stride < 1:
        problems.append("patch_or_stride must be positive")
    if spec.embed_dim < 1:
        problems.append("embed_dim must be positive")
    if spec.depth < 0:
        problems.append("depth must be nonnegative")
    if spec.arch == ARCH_PATCH_LINEAR and spec.patch_or_stride >= 1:
        if spec.native_resolution % spec.patch_or_stride != 0:
            problems.append(
                f"native_resolution {spec.native_resolution} not divisible by "
                f"patch size {spec.patch_or_stride}")
    if spec.arch == ARCH_CONV_STACK and spec.depth >= 0:
        if spec.native_resolution % (2 ** spec.depth) != 0:
            problems.append(
                f"native_resolution {spec.native_resolution} not divisible by "
                f"2^depth = {2 ** spec.depth}")
    kind, factor = parse_post_process(spec.post_process, strict=False)
    if kind is None:
        problems.append(f"unknown post_process {spec.post_process!r}")
    elif kind == "pixel-unshuffle" and factor < 1:
        problems.append("pixel-unshuffle factor must be positive")
    if problems:
        raise SpecValidationError("; ".join(problems))


def parse_post_process(post: str, strict: bool = True):
    """Split a post-process setting into (kind, factor)."""
    if post in ("none", "resize"):
        return post, 1
    if post.startswith("pixel-unshuffle"):
        _, _, tail = post.partition(":")
        try:
            return "pixel-unshuffle", int(tail) if tail else 2
        except ValueError:
            pass
    if strict:
        raise ValueError(f"unknown post_process {post!r}")
    return None, 0


@dataclass
class ExpertState:
    """An expert's spec plus its named parameter arrays."""

    spec: ExpertSpec
    params: dict
    frozen: bool = False

    def pos_grid_side(self) -> int:
        if self.spec.arch == ARCH_PATCH_LINEAR:
            return self.params["pos"].shape[0]
        return self.spec.native_resolution // (2 ** self.spec.depth)

    def accepted_resolution(self) -> int:
        if self.spec.arch == ARCH_PATCH_LINEAR:
            return self.pos_grid_side() * self.spec.patch_or_stride
        return self.spec.native_resolution

    def grid_side(self) -> int:
        return self.accepted_resolution() // _downsample(self.spec)


def _downsample(spec: ExpertSpec) -> int:
    if spec.arch == ARCH_PATCH_LINEAR:
        return spec.patch_or_stride
    return 2 ** spec.depth


def conv_channel_plan(spec: ExpertSpec):
    """(in, out) channels per stride-2 layer, doubling from the base."""
    plan = []
    cin = 3
    for k in range(spec.depth):
        cout = CONV_BASE_CHANNELS * (2 ** k)
        plan.append((cin, cout))
        cin = cout
    return plan


def init_bound(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def build_expert(spec: ExpertSpec, seed: int) -> ExpertState:
    """Initialize parameters from one seeded stream, uniform [-s, s] with
    s = 1/sqrt(fan_in) per group (embed_dim serves as the position grid's
    fan-in). Identical (spec, seed) gives bit-identical states."""
    validate_spec(spec)
    rng = np.random.default_rng([seed, hash_name(spec.name)])
    params = {}
    if spec.arch == ARCH_PATCH_LINEAR:
        p = spec.patch_or_stride
        grid = spec.native_resolution // p
        fan = p * p * 3
        s = init_bound(fan)
        params["patch_w"] = rng.uniform(-s, s, size=(fan, spec.embed_dim))
        params["patch_b"] = rng.uniform(-s, s, size=spec.embed_dim)
        sd = init_bound(spec.embed_dim)
        params["pos"] = rng.uniform(-sd, sd, size=(grid, grid, spec.embed_dim))
        for k in range(spec.depth):
            params[f"blk{k}.w1"] = rng.uniform(
                -sd, sd, size=(spec.embed_dim, spec.embed_dim))
            params[f"blk{k}.w2"] = rng.uniform(
                -sd, sd, size=(spec.embed_dim, spec.embed_dim))
            params[f"blk{k}.alpha"] = rng.uniform(-sd, sd, size=1)
    else:
        for k, (cin, cout) in enumerate(conv_channel_plan(spec)):
            s = init_bound(9 * cin)
            params[f"conv{k}.w"] = rng.uniform(-s, s, size=(3, 3, cin, cout))
            params[f"conv{k}.b"] = rng.uniform(-s, s, size=cout)
        cin = conv_channel_plan(spec)[-1][1] if spec.depth else 3
        s = init_bound(cin)
        params["proj_w"] = rng.uniform(-s, s, size=(cin, spec.embed_dim))
        params["proj_b"] = rng.uniform(-s, s, size=spec.embed_dim)
    return ExpertState(spec=spec, params=params, frozen=spec.frozen_default)


def hash_name(name: str) -> int:
    """Stable small integer from a name (process-independent)."""
    h = 0
    for ch in name:
        h = (h * 131 + ord(ch)) % (2 ** 31 - 1)
    return h


@dataclass(frozen=True)
class Image:
    """Square RGB image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != arr.shape[1] or arr.shape[2] != 3:
            raise ValueError(f"image must be (R, R, 3), got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def resolution(self):
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# batched forward/backward


def _patchify(images, patch):
    n, r = images.shape[0], images.shape[1]
    g = r // patch
    return (images.reshape(n, g, patch, g, patch, 3)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, g * g, patch * patch * 3))


def _unpatchify(grad_patches, patch, r):
    n = grad_patches.shape[0]
    g = r // patch
    return np.ascontiguousarray(
        grad_patches.reshape(n, g, g, patch, patch, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, r, r, 3))


def encode_fwd(spec: ExpertSpec, params: dict, images: np.ndarray):
    """Batched encoder forward. images: (N, R, R, 3) at the accepted
    resolution. Returns ((N, g, g, D) maps, cache for encode_bwd)."""
    n, r = images.shape[0], images.shape[1]
    if spec.arch == ARCH_PATCH_LINEAR:
        patch = spec.patch_or_stride
        g = r // patch
        patches = _patchify(images, patch)
        h = patches @ params["patch_w"] + params["patch_b"]
        h = h + params["pos"].reshape(1, g * g, spec.embed_dim)
        blocks = []
        for k in range(spec.depth):
            t = np.tanh(h @ params[f"blk{k}.w1"])
            m = h.mean(axis=1, keepdims=True)
            blocks.append((h, t, m))
            h = h + t @ params[f"blk{k}.w2"] + params[f"blk{k}.alpha"][0] * m
        cache = ("patch", patches, blocks, r)
        return h.reshape(n, g, g, spec.embed_dim), cache
    layers = []
    x = images
    for k in range(spec.depth):
        z = kernels.conv3x3s2_fwd(x, params[f"conv{k}.w"], params[f"conv{k}.b"])
        t = np.tanh(z)
        layers.append((x, t))
        x = t
    y = x @ params["proj_w"] + params["proj_b"]
    cache = ("conv", layers, x, r)
    return y, cache


def encode_bwd(spec: ExpertSpec, params: dict, cache, grad_maps: np.ndarray):
    """Backward of encode_fwd: (param grads, image grads)."""
    grads = {}
    if cache[0] == "patch":
        _, patches, blocks, r = cache
        n = grad_maps.shape[0]
        d = spec.embed_dim
        g = grad_maps.reshape(n, -1, d)
        t_count = g.shape[1]
        for k in reversed(range(spec.depth)):
            h_in, t, m = blocks[k]
            grads[f"blk{k}.w2"] = np.einsum("ntd,nte->de", t, g)
            dt = g @ params[f"blk{k}.w2"].T
            du = dt * (1.0 - t * t)
            grads[f"blk{k}.w1"] = np.einsum("ntd,nte->de", h_in, du)
            grads[f"blk{k}.alpha"] = np.array(
                [np.einsum("ntd,nd->", g, m[:, 0, :])])
            g = (g + du @ params[f"blk{k}.w1"].T
                 + params[f"blk{k}.alpha"][0] * g.sum(axis=1, keepdims=True) / t_count)
        grads["pos"] = g.sum(axis=0).reshape(params["pos"].shape)
        grads["patch_b"] = g.sum(axis=(0, 1))
        grads["patch_w"] = np.einsum("ntf,ntd->fd", patches, g)
        grad_images = _unpatchify(g @ params["patch_w"].T,
                                  spec.patch_or_stride, r)
        return grads, grad_images
    _, layers, x_last, r = cache
    n = grad_maps.shape[0]
    cd = x_last.shape[-1]
    g2 = grad_maps.reshape(-1, spec.embed_dim)
    grads["proj_w"] = x_last.reshape(-1, cd).T @ g2
    grads["proj_b"] = g2.sum(axis=0)
    gx = (grad_maps @ params["proj_w"].T)
    for k in reversed(range(spec.depth)):
        x_in, t = layers[k]
        gz = np.ascontiguousarray(gx * (1.0 - t * t))
        gx, gw, gb = kernels.conv3x3s2_bwd(
            x_in, params[f"conv{k}.w"], gz)
        grads[f"conv{k}.w"] = gw
        grads[f"conv{k}.b"] = gb
    return grads, gx


# ---------------------------------------------------------------------------
# public single-image ops


def encode(expert: ExpertState, image: Image) -> FeatureMap:
    """Run one image through the expert. The image must already be at the
    expert's accepted resolution; adapt first otherwise."""
    expected = expert.accepted_resolution()
    if image.resolution != expected:
        raise AdaptationRequiredError(
            f"expert {expert.spec.name!r} accepts {expected}x{expected} input, "
            f"got {image.resolution}x{image.resolution}; interpolate the position "
            f"embeddings or resize the image first")
    maps, _ = encode_fwd(expert.spec, expert.params, image.data[None])
    return FeatureMap(maps[0], source_resolution=image.resolution)


def interpolate_pos_embed(expert: ExpertState, new_grid_side: int) -> ExpertState:
    """Resize the learned position grid so the expert accepts a new input
    resolution. Conv-stack experts have no grid and pass through unchanged;
    all non-position parameters are shared with the input state."""
    if new_grid_side < 1:
        raise ValueError(f"grid side must be positive, got {new_grid_side}")
    if expert.spec.arch != ARCH_PATCH_LINEAR:
        return expert
    pos = expert.params["pos"]
    if new_grid_side == pos.shape[0]:
        new_pos = pos
    else:
        new_pos = kernels.resize_fwd(pos[None], new_grid_side, new_grid_side)[0]
    params = dict(expert.params)
    params["pos"] = new_pos
    return ExpertState(spec=expert.spec, params=params, frozen=expert.frozen)


def tile_map(image_data: np.ndarray, tiles: int, fn) -> np.ndarray:
    """Split a square array into tiles x tiles sub-arrays, apply ``fn`` to
    each in raster order, and reassemble the outputs spatially."""
    r = image_data.shape[0]
    if r % tiles != 0:
        raise ValueError(f"resolution {r} not divisible by tile count {tiles}")
    t = r // tiles
    out = None
    for ty in range(tiles):
        for tx in range(tiles):
            piece = fn(image_data[ty * t:(ty + 1) * t, tx * t:(tx + 1) * t])
            if out is None:
                side = piece.shape[0]
                out = np.empty((tiles * side, tiles * side, piece.shape[2]))
            side = piece.shape[0]
            out[ty * side:(ty + 1) * side, tx * side:(tx + 1) * side] = piece
    return out


def tile_encode(expert: ExpertState, image: Image, tiles: int) -> FeatureMap:
    """Split the image into tiles x tiles sub-images, encode each
    independently, and reassemble the per-tile grids in raster order."""
    if tiles < 1:
        raise ValueError(f"tile count must be positive, got {tiles}")
    r = image.resolution
    if r % tiles != 0:
        raise ValueError(f"resolution {r} not divisible by tile count {tiles}")
    tile_res = r // tiles
    expected = expert.accepted_resolution()
    if tile_res != expected:
        raise ValueError(
            f"tile resolution {tile_res} does not match expert input {expected}")
    out = tile_map(image.data, tiles,
                   lambda sub: encode(expert, Image(sub)).data)
    return FeatureMap(out, source_resolution=r)


def normalize_fwd(maps: np.ndarray, target_count: int, post: str):
    """Batched token normalization: optional post-process, resize to the
    g x g target grid, row-major flatten. Returns (tokens (N, g^2, C), cache)."""
    g = int(round(np.sqrt(target_count)))
    if g * g != target_count:
        raise ValueError(f"target_count {target_count} is not a perfect square")
    kind, factor = parse_post_process(post)
    n, h, w, c = maps.shape
    cache_post = None
    if kind == "pixel-unshuffle" and factor > 1:
        if h % factor or w % factor:
            raise ValueError(
                f"grid {h}x{w} not divisible by pixel-unshuffle factor {factor}")
        maps = (maps.reshape(n, h // factor, factor, w // factor, factor, c)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, h // factor, w // factor, c * factor * factor))
        cache_post = (h, w, c, factor)
        h, w, c = maps.shape[1:]
    resized = h != g or w != g
    if resized:
        out = kernels.resize_fwd(np.ascontiguousarray(maps), g, g)
    else:
        out = maps
    cache = (cache_post, (h, w), resized, g)
    return out.reshape(n, g * g, c), cache


def normalize_bwd(cache, grad_tokens: np.ndarray) -> np.ndarray:
    cache_post, (h, w), resized, g = cache
    n = grad_tokens.shape[0]
    grad = grad_tokens.reshape(n, g, g, -1)
    if resized:
        grad = kernels.resize_bwd(np.ascontiguousarray(grad), h, w)
    if cache_post is not None:
        h0, w0, c0, factor = cache_post
        grad = (grad.reshape(n, h0 // factor, w0 // factor, c0, factor, factor)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, h0, w0, c0))
    return grad


def normalize_tokens(fmap: FeatureMap, target_count: int, post: str) -> TokenSequence:
    """Bring one feature grid to exactly ``target_count`` tokens.

    Applies the expert's post-process (pixel-unshuffle trades resolution for
    channels; ``resize``/``none`` leave the grid alone), then bilinear-resizes
    to the square target grid when needed and flattens row-major.
    """
    tokens, _ = normalize_fwd(fmap.data[None], target_count, post)
    return TokenSequence(tokens[0])
