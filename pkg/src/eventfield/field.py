"""Shared implicit scene: dense feature grids, geometry decoder and CRF mappers.

One geometry grid stack and one colour grid stack feed a single decoder
that outputs a hidden vector ``h``, radiance ``e > 0`` and a TSDF ``s`` in
[-1, 1] (units of the truncation distance). Two tone mappers turn
``ln e + ln dt`` into RGB (sigmoid output) and event log-luminance.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, check_finite
from .events import DEFAULT_B, linlog, linlog_grad
from .world import LUMA

EXPOSURE_BOUND = 5.0
CKPT_MAGIC = b"EFCK"
CKPT_VERSION = 1


@dataclass
class FieldConfig:
    bounds: tuple = ((-2.05, -2.05, -0.05), (2.05, 2.05, 3.05))
    levels: tuple = (16, 32, 64)
    feat_dim: int = 2
    hidden: tuple = (32, 32)
    h_dim: int = 16
    crf_hidden: int = 16
    radiance_channels: int = 3
    use_crf: bool = True
    mapper_uses_h: bool = False
    log_exposure_rgb: float = 0.0
    log_exposure_event: float = 0.0
    linlog_B: float = DEFAULT_B

    def __post_init__(self):
        self.bounds = (tuple(float(v) for v in self.bounds[0]), tuple(float(v) for v in self.bounds[1]))
        self.levels = tuple(int(v) for v in self.levels)
        self.hidden = tuple(int(v) for v in self.hidden)
        if self.radiance_channels not in (1, 3):
            raise ValueError("radiance_channels must be 1 or 3")

    @property
    def lo(self):
        return np.asarray(self.bounds[0])

    @property
    def hi(self):
        return np.asarray(self.bounds[1])

    @property
    def in_dim(self):
        return 2 * len(self.levels) * self.feat_dim


NONNEG_SUFFIXES = ("/alpha", "/v", "/w")


def field_layout(cfg: FieldConfig) -> dict[str, tuple[int, ...]]:
    lay: dict[str, tuple[int, ...]] = {}
    for fam in ("grid_g", "grid_c"):
        for l, n in enumerate(cfg.levels):
            lay[f"{fam}/{l}"] = (n + 1, n + 1, n + 1, cfg.feat_dim)
    dims = [cfg.in_dim, *cfg.hidden, cfg.h_dim + cfg.radiance_channels + 1]
    for k in range(len(dims) - 1):
        lay[f"dec/W{k}"] = (dims[k], dims[k + 1])
        lay[f"dec/b{k}"] = (dims[k + 1],)
    for name, ch in (("crf_c", 3), ("crf_l", 1)):
        lay[f"{name}/alpha"] = (ch,)
        lay[f"{name}/v"] = (ch, cfg.crf_hidden)
        lay[f"{name}/w"] = (ch, cfg.crf_hidden)
        lay[f"{name}/c"] = (ch, cfg.crf_hidden)
        lay[f"{name}/b"] = (ch,)
        if cfg.mapper_uses_h:
            lay[f"{name}/U"] = (ch, cfg.h_dim)
    lay["exposure/c"] = (1,)
    lay["exposure/l"] = (1,)
    return lay


def init_params(cfg: FieldConfig, seed: int = 0, grid_std: float = 1e-2) -> ParamVector:
    rng = np.random.default_rng(seed)
    pv = ParamVector(field_layout(cfg))
    for name in pv.names():
        shape = pv.shape(name)
        if name.startswith("grid_"):
            pv[name] = rng.normal(0.0, grid_std, shape)
        elif name.startswith("dec/W"):
            fan_in, fan_out = shape
            pv[name] = rng.uniform(-1, 1, shape) * np.sqrt(6.0 / (fan_in + fan_out))
    for prefix in ("crf_c", "crf_l"):
        pv[f"{prefix}/alpha"] = 1.0
        pv[f"{prefix}/w"] = 1.0
        pv[f"{prefix}/c"] = np.broadcast_to(np.linspace(-4.0, 4.0, cfg.crf_hidden), pv.shape(f"{prefix}/c"))
    return pv


def project_constraints(pv: ParamVector) -> None:
    """Clip mapper slope parameters to be non-negative (keeps the CRFs monotone)."""
    for name in pv.names():
        if name.startswith("crf_") and name.endswith(NONNEG_SUFFIXES):
            seg = pv.values[pv.slice(name)]
            np.maximum(seg, 0.0, out=seg)


def bounded_log_exposure(raw):
    """Scaled sigmoid keeping the learned log-exposure offset in (-5, 5)."""
    return 2 * EXPOSURE_BOUND * ad.sigmoid(np.asarray(raw, dtype=float)) - EXPOSURE_BOUND


# -------------------------------------------------------------------- query

def grid_coords(cfg: FieldConfig, x: np.ndarray, n: int) -> np.ndarray:
    return (x - cfg.lo) / (cfg.hi - cfg.lo) * n


def query_forward(cfg: FieldConfig, pv: ParamVector, x: np.ndarray):
    """Evaluate (h, e, s) at points ``x`` (P, 3). Returns outputs and a cache."""
    x = np.asarray(x, dtype=float)
    out_of_bounds = int(np.sum(np.any((x < cfg.lo) | (x > cfg.hi), axis=1)))
    feats, tri = [None] * (2 * len(cfg.levels)), [None] * (2 * len(cfg.levels))
    for l, n in enumerate(cfg.levels):
        stencil = ad.trilinear_stencil(pv.shape(f"grid_g/{l}"), grid_coords(cfg, x, n))
        for j, fam in enumerate(("grid_g", "grid_c")):
            f, c = ad.trilinear_fwd(pv[f"{fam}/{l}"], None, stencil)
            k = j * len(cfg.levels) + l
            feats[k] = f
            tri[k] = (fam, l, n, c)
    a = np.concatenate(feats, axis=1)
    layers = []
    n_layers = len(cfg.hidden) + 1
    for k in range(n_layers):
        z, cache = ad.affine_fwd(a, pv[f"dec/W{k}"], pv[f"dec/b{k}"])
        if k < n_layers - 1:
            a, tcache = ad.tanh_fwd(z)
            layers.append((cache, tcache))
        else:
            layers.append((cache, None))
            a = z
    check_finite(a, "affine", f"dec/W{n_layers - 1}")
    hd, rc = cfg.h_dim, cfg.radiance_channels
    h = a[:, :hd]
    e, sp_cache = ad.softplus_fwd(a[:, hd:hd + rc])
    e = np.maximum(e, 1e-30)
    s, s_cache = ad.tanh_fwd(a[:, hd + rc])
    cache = dict(tri=tri, layers=layers, sp=sp_cache, s=s_cache, n=len(x), oob=out_of_bounds)
    return h, e, s, cache


def query_backward(cfg: FieldConfig, pv: ParamVector, cache, d_h, d_e, d_s, grad: ParamVector | None,
                   need_params: bool = True, need_x: bool = True):
    """Accumulate parameter gradients into ``grad``; return d loss / d x (P, 3) if requested."""
    hd, rc = cfg.h_dim, cfg.radiance_channels
    P = cache["n"]
    d_out = np.zeros((P, hd + rc + 1))
    if d_h is not None:
        d_out[:, :hd] = d_h
    if d_e is not None:
        d_out[:, hd:hd + rc] = ad.softplus_vjp(d_e, cache["sp"])[0]
    if d_s is not None:
        d_out[:, hd + rc] = ad.tanh_vjp(d_s, cache["s"])[0]
    g = d_out
    for k in reversed(range(len(cache["layers"]))):
        aff, tc = cache["layers"][k]
        if tc is not None:
            g = ad.tanh_vjp(g, tc)[0]
        dx, dW, db = ad.affine_vjp(g, aff)
        if need_params and grad is not None:
            grad[f"dec/W{k}"] += dW
            grad[f"dec/b{k}"] += db
        g = dx
    d_x = np.zeros((P, 3)) if need_x else None
    F = cfg.feat_dim
    for j, (fam, l, n, tcache) in enumerate(cache["tri"]):
        gj = g[:, j * F:(j + 1) * F]
        d_grid, d_c = ad.trilinear_vjp(gj, tcache, need_grid=need_params and grad is not None)
        if d_grid is not None:
            grad[f"{fam}/{l}"] += d_grid
        if need_x:
            d_x += d_c * (n / (cfg.hi - cfg.lo))
    return d_x


# -------------------------------------------------------------------- mappers

def luma_of(cfg: FieldConfig, e: np.ndarray) -> np.ndarray:
    return e @ LUMA if cfg.radiance_channels == 3 else e[:, 0]


def mapper_forward(pv: ParamVector, prefix: str, z: np.ndarray, h: np.ndarray | None = None):
    """Monotone map g(z) = b + alpha z + sum_j v_j tanh(w_j z + c_j) (+ U h) per channel.

    ``z`` is (P, ch). Returns pre-activation g and cache.
    """
    alpha, v, w, c, b = (pv[f"{prefix}/{k}"] for k in ("alpha", "v", "w", "c", "b"))
    inner = z[:, :, None] * w[None] + c[None]
    t = np.tanh(inner)
    g = b[None] + alpha[None] * z + np.einsum("pcj,cj->pc", t, v)
    uses_h = f"{prefix}/U" in pv and h is not None
    if uses_h:
        g = g + h @ pv[f"{prefix}/U"].T
    return g, (z, t, h if uses_h else None)


def mapper_backward(pv: ParamVector, prefix: str, d_g: np.ndarray, cache, grad: ParamVector | None,
                    need_params: bool = True):
    """Returns (d z, d h)."""
    z, t, h = cache
    alpha, v, w = pv[f"{prefix}/alpha"], pv[f"{prefix}/v"], pv[f"{prefix}/w"]
    sech2 = 1.0 - t * t
    dz = d_g * alpha[None] + np.einsum("pc,pcj,cj->pc", d_g, sech2, v * w)
    d_h = None
    if h is not None:
        d_h = d_g @ pv[f"{prefix}/U"]
    if need_params and grad is not None:
        grad[f"{prefix}/b"] += d_g.sum(axis=0)
        grad[f"{prefix}/alpha"] += np.sum(d_g * z, axis=0)
        grad[f"{prefix}/v"] += np.einsum("pc,pcj->cj", d_g, t)
        dinner = d_g[:, :, None] * sech2 * v[None]
        grad[f"{prefix}/w"] += np.einsum("pcj,pc->cj", dinner, z)
        grad[f"{prefix}/c"] += dinner.sum(axis=0)
        if h is not None:
            grad[f"{prefix}/U"] += d_g.T @ h
    return dz, d_h


def color_forward(cfg: FieldConfig, pv: ParamVector, e: np.ndarray, h: np.ndarray | None = None):
    """RGB in [0, 1] from radiance. Without CRF: sigmoid(ln e), no exposure."""
    ln_e = np.log(e)
    if cfg.radiance_channels == 1:
        ln_e = np.repeat(ln_e, 3, axis=1)
    if not cfg.use_crf:
        rgb, sc = ad.sigmoid_fwd(ln_e)
        return rgb, ("plain", e, sc)
    raw = pv["exposure/c"][0]
    ln_dt = cfg.log_exposure_rgb + bounded_log_exposure(raw)
    g, mc = mapper_forward(pv, "crf_c", ln_e + ln_dt, h)
    rgb, sc = ad.sigmoid_fwd(g)
    return rgb, ("crf", e, sc, mc, raw)


def color_backward(cfg: FieldConfig, pv: ParamVector, d_rgb, cache, grad, need_params=True):
    """Returns (d e, d h)."""
    kind, e = cache[0], cache[1]
    if kind == "plain":
        d_ln = ad.sigmoid_vjp(d_rgb, cache[2])[0]
        d_h = None
    else:
        _, _, sc, mc, raw = cache
        d_g = ad.sigmoid_vjp(d_rgb, sc)[0]
        d_ln, d_h = mapper_backward(pv, "crf_c", d_g, mc, grad, need_params)
        if need_params and grad is not None:
            s = ad.sigmoid(np.array([raw]))[0]
            grad["exposure/c"] += d_ln.sum() * 2 * EXPOSURE_BOUND * s * (1 - s)
    if cfg.radiance_channels == 1:
        d_ln = d_ln.sum(axis=1, keepdims=True)
    return d_ln / e, d_h


def luminance_forward(cfg: FieldConfig, pv: ParamVector, e: np.ndarray, h: np.ndarray | None = None):
    """Event log-luminance per point. Without CRF the event camera is assumed to
    see the colour image: lin-log of 255 * luma(sigmoid(ln e))."""
    if not cfg.use_crf:
        rgb, cc = color_forward(cfg, pv, e, None)
        I = 255.0 * (rgb @ LUMA)
        return linlog(I, cfg.linlog_B), ("plain", cc, I)
    y = luma_of(cfg, e)
    raw = pv["exposure/l"][0]
    ln_dt = cfg.log_exposure_event + bounded_log_exposure(raw)
    g, mc = mapper_forward(pv, "crf_l", (np.log(y) + ln_dt)[:, None], h)
    return g[:, 0], ("crf", y, mc, raw)


def luminance_backward(cfg: FieldConfig, pv: ParamVector, d_l, cache, grad, need_params=True):
    """Returns (d e, d h)."""
    if cache[0] == "plain":
        _, cc, I = cache
        d_rgb = (d_l * linlog_grad(I, cfg.linlog_B) * 255.0)[:, None] * LUMA[None]
        return color_backward(cfg, pv, d_rgb, cc, grad, need_params)
    _, y, mc, raw = cache
    d_z, d_h = mapper_backward(pv, "crf_l", d_l[:, None], mc, grad, need_params)
    d_z = d_z[:, 0]
    if need_params and grad is not None:
        s = ad.sigmoid(np.array([raw]))[0]
        grad["exposure/l"] += d_z.sum() * 2 * EXPOSURE_BOUND * s * (1 - s)
    d_y = d_z / y
    if cfg.radiance_channels == 3:
        return d_y[:, None] * LUMA[None], d_h
    return d_y[:, None], d_h


# -------------------------------------------------------------------- container

class SceneField:
    """Config + parameters, with forward-only convenience queries."""

    def __init__(self, cfg: FieldConfig | None = None, params: ParamVector | None = None, seed: int = 0):
        self.cfg = cfg or FieldConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        self.diagnostics = {"clamped_queries": 0}

    def query(self, x, chunk: int = 65536):
        hs, es, ss = [], [], []
        for i in range(0, len(x), chunk):
            h, e, s, cache = query_forward(self.cfg, self.params, x[i:i + chunk])
            self.diagnostics["clamped_queries"] += cache["oob"]
            hs.append(h)
            es.append(e)
            ss.append(s)
        if not hs:
            cfg = self.cfg
            return np.zeros((0, cfg.h_dim)), np.zeros((0, cfg.radiance_channels)), np.zeros(0)
        return np.concatenate(hs), np.concatenate(es), np.concatenate(ss)

    def tsdf(self, x):
        return self.query(x)[2]

    def color(self, e, h=None):
        return color_forward(self.cfg, self.params, e, h)[0]

    def luminance(self, e, h=None):
        return luminance_forward(self.cfg, self.params, e, h)[0]

    def shading(self, x):
        """(s, rgb, l) at points, used by the renderer."""
        h, e, s = self.query(x)
        hh = h if self.cfg.mapper_uses_h else None
        return s, self.color(e, hh), self.luminance(e, hh)

    def census(self) -> dict[str, int]:
        """Count of parameter groups: grid families, decoders, mappers."""
        names = self.params.names()
        return {"grid_g": int(any(n.startswith("grid_g/") for n in names)),
                "grid_c": int(any(n.startswith("grid_c/") for n in names)),
                "decoder": int(any(n.startswith("dec/") for n in names)),
                "crf_c": int(any(n.startswith("crf_c/") for n in names)),
                "crf_l": int(any(n.startswith("crf_l/") for n in names))}

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.params)

    @classmethod
    def load(cls, path) -> "SceneField":
        cfg, pv = load_checkpoint(path)
        return cls(cfg, pv)


def save_checkpoint(path, cfg: FieldConfig, pv: ParamVector) -> None:
    """Header (magic, version, config JSON) then named float32 segments."""
    meta = json.dumps(asdict(cfg), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(meta)) + meta)
        fh.write(struct.pack("<I", len(pv.names())))
        for name in pv.names():
            shape = pv.shape(name)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(np.ascontiguousarray(pv[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[FieldConfig, ParamVector]:
    from .fileio import DataError

    try:
        return _parse_checkpoint(path, Path(path).read_bytes())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(path, data: bytes) -> tuple[FieldConfig, ParamVector]:
    from .fileio import DataError


    if data[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a field checkpoint")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(data[off:off + mlen])
    off += mlen
    cfg = FieldConfig(**meta)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + nl].decode()
        off += 2 + nl
        (nd,) = struct.unpack_from("<B", data, off)
        shape = struct.unpack_from(f"<{nd}I", data, off + 1)
        off += 1 + 4 * nd
        size = int(np.prod(shape)) if shape else 1
        if off + 4 * size > len(data):
            raise DataError(f"{path}: truncated segment {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
    pv = ParamVector(field_layout(cfg))
    if set(arrays) != set(pv.names()):
        raise DataError(f"{path}: segment names do not match the configuration")
    for k, v in arrays.items():
        pv[k] = v
    return cfg, pv


class AnalyticField(SceneField):
    """Oracle field from an analytic scene.

    ``s`` is the exact SDF truncated at ``tr`` and the radiance is chosen as
    ``c / (1 - c)`` so that the CRF-free colour path returns the rendered colour
    ``c`` and the luminance path the simulator's lin-log intensity.
    """

    def __init__(self, scene, tr: float = 0.05, linlog_B: float = DEFAULT_B):
        self.scene = scene
        self.tr = float(tr)
        self.cfg = FieldConfig(bounds=scene.bounds, use_crf=False, linlog_B=linlog_B)
        self.params = None
        self.diagnostics = {"clamped_queries": 0}

    def query(self, x, chunk: int = 65536):
        x = np.asarray(x, dtype=float)
        s = np.clip(self.scene.sdf(x) / self.tr, -1.0, 1.0)
        c = np.clip(self.scene.radiance(x), 1e-6, 1.0 - 1e-6)
        return np.zeros((len(x), self.cfg.h_dim)), c / (1.0 - c), s

    def census(self):
        return {}

    def save(self, path):
        raise TypeError("an analytic field has no parameters to save")
