"""Shift-modulated FourierNet decoder with hand-derived reverse-mode gradients.

For channel c with latent slice a = alpha_c and shifts m_l = M_l a:

    z_1 = (1 + m_1) * s_1(x)
    z_l = (W_{l-1} z_{l-1} + b_{l-1} + m_l) * s_l(x)      l = 2 .. L-1
    out = W_{L-1} z_{L-1} + b_{L-1}

with s_l(x) = [cos(omega_l x), sin(omega_l x)] and omega frozen at init.
Because every shift enters additively and everything downstream is linear
for fixed x, the output is affine in the latent: out(x) = beta(x) + A(x) a.
The "affine" engine below evaluates and differentiates through that form,
which costs O(N h^2) per parameter set plus O(N B h) per batch instead of
O(N B h^2). The "direct" engine runs the recursion literally, and is the only
one that supports frequency modulation (``separable=False``).
"""
from __future__ import annotations

from dataclasses import dataclass, replace, field

import numpy as np

from .geometry import Domain
from .numerics import ParamBundle, Rng, check_finite


@dataclass
class DecoderParams:
    bundle: ParamBundle
    omegas: list[list[np.ndarray]]  # [channel][filter layer] -> [h/2 x p], frozen
    latent_dim: int
    channels: int
    layers: int
    hidden: int
    freq_scale: float
    separable: bool = True

    @property
    def chunk(self) -> int:
        return self.latent_dim // self.channels

    @property
    def optimizable(self) -> list[str]:
        return self.bundle.names()

    def key(self, c: int, kind: str, l: int) -> str:
        return f"c{c}/{kind}{l}"

    def with_bundle(self, bundle: ParamBundle) -> "DecoderParams":
        return replace(self, bundle=bundle)


def decoder_init(latent_dim: int, channels: int, layers: int, hidden: int, freq_scale: float,
                 rng: Rng, domain: Domain | None = None, separable: bool = True,
                 dim: int | None = None) -> DecoderParams:
    """Independent parameter set per output channel.

    omega entries are U(-1, 1) * freq_scale / sqrt(L - 1); on a periodic box
    they are then rounded to the nearest harmonic 2 pi k / length of each
    axis so the decoded field is periodic and its spectrum exactly discrete.
    """
    if layers < 2 or hidden < 2:
        raise ValueError("need layers >= 2 and hidden >= 2")
    if hidden % 2:
        raise ValueError("hidden width must be even ([cos; sin] packing)")
    if latent_dim % channels:
        raise ValueError(f"latent_dim {latent_dim} not divisible by {channels} channels")
    p = domain.dim if domain is not None else (dim or 2)
    d_c = latent_dim // channels
    h = hidden
    params = {}
    omegas = []
    for c in range(channels):
        ch_rng = rng.spawn(c)
        om = []
        for l in range(1, layers):
            w = ch_rng.uniform(-1.0, 1.0, (h // 2, p)) * freq_scale / np.sqrt(layers - 1)
            if domain is not None and domain.kind == "periodic-box":
                base = 2 * np.pi / domain.lengths
                w = np.round(w / base) * base
            om.append(w)
        omegas.append(om)

        def unif(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return ch_rng.uniform(-bound, bound, shape)

        for l in range(1, layers - 1):
            params[f"c{c}/W{l}"] = unif(h, (h, h))
            params[f"c{c}/b{l}"] = unif(h, (h,))
        params[f"c{c}/W{layers - 1}"] = unif(h, (1, h))
        params[f"c{c}/b{layers - 1}"] = unif(h, (1,))
        for l in range(0, layers - 1):
            params[f"c{c}/M{l}"] = unif(d_c, (h, d_c))
        if not separable:
            for l in range(0, layers - 1):
                params[f"c{c}/V{l}"] = unif(d_c, (h // 2, d_c))
    return DecoderParams(ParamBundle(params), omegas, latent_dim, channels, layers, hidden,
                         float(freq_scale), separable)


def _pdot(X: np.ndarray, Wt: np.ndarray) -> np.ndarray:
    """X @ Wt summed in a fixed order over the inner index.

    Each output row depends only on its own input row, never on how many rows
    are evaluated together (BLAS kernels change with the matrix shape).
    """
    acc = X[..., 0:1] * Wt[0]
    for k in range(1, Wt.shape[0]):
        acc = acc + X[..., k:k + 1] * Wt[k]
    return acc


def _matmul(X: np.ndarray, Wt: np.ndarray) -> np.ndarray:
    return X @ Wt


def _filters(om: np.ndarray, points: np.ndarray, dot=_pdot) -> np.ndarray:
    th = dot(points, om.T)
    return np.concatenate([np.cos(th), np.sin(th)], axis=-1)


def _check(params: DecoderParams, alpha: np.ndarray, points: np.ndarray):
    alpha = np.asarray(alpha, dtype=np.float64)
    single = alpha.ndim == 1
    alpha = np.atleast_2d(alpha)
    if alpha.shape[1] != params.latent_dim:
        raise ValueError(f"latent has {alpha.shape[1]} entries, decoder expects {params.latent_dim}")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != params.omegas[0][0].shape[1]:
        raise ValueError("points must be [N x p] matching the decoder's input dimension")
    return alpha, points, single


# ------------------------------------------------------------ affine engine

@dataclass
class AffineChannel:
    beta: np.ndarray            # [N] output at zero latent
    A: np.ndarray               # [N x d_c]
    sens: list[np.ndarray] = field(default_factory=list)   # d out / d pre-activation, per filter layer
    acts: list[np.ndarray] = field(default_factory=list)   # unmodulated z_l, per filter layer
    filt: list[np.ndarray] = field(default_factory=list)   # filter outputs S_l


def affine_map(params: DecoderParams, points: np.ndarray, exact: bool = True) -> list[AffineChannel]:
    """Per-channel (beta, A) such that decode(alpha)(x) = beta(x) + A(x) alpha_c.

    ``exact=False`` lets BLAS do the reductions: faster, but a point's value
    may then change in the last bit with the size of ``points``.
    """
    dot = _pdot if exact else _matmul
    if not params.separable:
        raise ValueError("the affine form exists only for shift-only modulation")
    P = params.bundle.params
    L = params.layers
    out = []
    for c in range(params.channels):
        S = [_filters(om, points, dot) for om in params.omegas[c]]
        z = [S[0]]
        for l in range(2, L):
            z.append((dot(z[-1], P[f"c{c}/W{l - 1}"].T) + P[f"c{c}/b{l - 1}"]) * S[l - 1])
        beta = dot(z[-1], P[f"c{c}/W{L - 1}"].T)[:, 0] + P[f"c{c}/b{L - 1}"][0]
        G = [None] * (L - 1)
        G[L - 2] = P[f"c{c}/W{L - 1}"][0][None, :] * S[L - 2]
        for l in range(L - 3, -1, -1):
            G[l] = dot(G[l + 1], P[f"c{c}/W{l + 1}"]) * S[l]
        A = dot(G[0], P[f"c{c}/M0"])
        for l in range(1, L - 1):
            A = A + dot(G[l], P[f"c{c}/M{l}"])
        out.append(AffineChannel(beta, A, G, z, S))
    return out


def _affine_decode(params, alpha, points, maps=None, exact=True):
    """beta + A alpha per channel; ``exact=False`` uses BLAS (faster, not pointwise-reproducible)."""
    maps = maps or affine_map(params, points)
    d = params.chunk
    dot = _pdot if exact else np.matmul
    cols = [m.beta[None, :] + dot(alpha[:, c * d:(c + 1) * d], m.A.T) for c, m in enumerate(maps)]
    return np.stack(cols, axis=-1)


def _affine_backward(params, alpha, points, upstream, maps=None):
    maps = maps or affine_map(params, points)
    P = params.bundle.params
    L = params.layers
    d = params.chunk
    grads = {}
    g_alpha = np.zeros_like(alpha)
    for c, m in enumerate(maps):
        U = upstream[..., c]                      # [B x N]
        a = alpha[:, c * d:(c + 1) * d]           # [B x d_c]
        g_alpha[:, c * d:(c + 1) * d] = U @ m.A
        gsum = U.sum(axis=0)                      # [N]
        Ua = U.T @ a                              # [N x d_c]
        # homogeneous forward: y_l(x) = sum_b U[b, x] z_l^(b)(x), linear in (gsum, shifts)
        y = (gsum[:, None] + Ua @ P[f"c{c}/M0"].T) * m.acts[0]
        grads[f"c{c}/M0"] = m.sens[0].T @ Ua
        for l in range(2, L):
            g = m.sens[l - 1]
            grads[f"c{c}/W{l - 1}"] = g.T @ y
            grads[f"c{c}/b{l - 1}"] = gsum @ g
            grads[f"c{c}/M{l - 1}"] = g.T @ Ua
            y = (y @ P[f"c{c}/W{l - 1}"].T + gsum[:, None] * P[f"c{c}/b{l - 1}"]
                 + Ua @ P[f"c{c}/M{l - 1}"].T) * m.filt[l - 1]
        grads[f"c{c}/W{L - 1}"] = y.sum(axis=0)[None, :]
        grads[f"c{c}/b{L - 1}"] = np.array([gsum.sum()])
    return grads, g_alpha


# ------------------------------------------------------------ direct engine

def _direct(params, alpha, points, upstream=None):
    """Literal batched recursion; returns outputs and, given upstream, gradients."""
    P = params.bundle.params
    L = params.layers
    d = params.chunk
    B = alpha.shape[0]
    outs = []
    grads = {}
    g_alpha = np.zeros_like(alpha)
    for c in range(params.channels):
        a = alpha[:, c * d:(c + 1) * d]
        cache = []
        z = None
        for l in range(1, L):
            om = params.omegas[c][l - 1]
            base = _pdot(points, om.T)                              # [N x h/2]
            if params.separable:
                th = np.broadcast_to(base, (B,) + base.shape)
                scale = None
            else:
                scale = 1.0 + a @ P[f"c{c}/V{l - 1}"].T            # [B x h/2]
                th = base[None] * scale[:, None, :]
            S = np.concatenate([np.cos(th), np.sin(th)], axis=-1)   # [B x N x h]
            shift = a @ P[f"c{c}/M{l - 1}"].T                       # [B x h]
            if l == 1:
                pre = np.broadcast_to(1.0 + shift[:, None, :], S.shape)
            else:
                pre = _pdot(z, P[f"c{c}/W{l - 1}"].T) + P[f"c{c}/b{l - 1}"] + shift[:, None, :]
            cache.append((z, pre, S, th, base, scale))
            z = pre * S
        out = _pdot(z, P[f"c{c}/W{L - 1}"].T)[..., 0] + P[f"c{c}/b{L - 1}"][0]   # [B x N]
        outs.append(out)
        if upstream is None:
            continue
        U = upstream[..., c]
        grads[f"c{c}/W{L - 1}"] = np.einsum("bn,bnh->h", U, z)[None, :]
        grads[f"c{c}/b{L - 1}"] = np.array([U.sum()])
        dz = U[..., None] * P[f"c{c}/W{L - 1}"][0]
        ga = np.zeros_like(a)
        for l in range(L - 1, 0, -1):
            z_prev, pre, S, th, base, scale = cache[l - 1]
            dpre = dz * S
            dS = dz * pre
            dshift = dpre.sum(axis=1)                               # [B x h]
            grads[f"c{c}/M{l - 1}"] = dshift.T @ a
            ga += dshift @ P[f"c{c}/M{l - 1}"]
            if not params.separable:
                hh = th.shape[-1]
                dth = -dS[..., :hh] * np.sin(th) + dS[..., hh:] * np.cos(th)
                dscale = np.einsum("bnk,nk->bk", dth, base)
                grads[f"c{c}/V{l - 1}"] = dscale.T @ a
                ga += dscale @ P[f"c{c}/V{l - 1}"]
            if l > 1:
                grads[f"c{c}/W{l - 1}"] = np.einsum("bni,bnj->ij", dpre, z_prev)
                grads[f"c{c}/b{l - 1}"] = dpre.sum(axis=(0, 1))
                dz = dpre @ P[f"c{c}/W{l - 1}"]
        g_alpha[:, c * d:(c + 1) * d] = ga
    return np.stack(outs, axis=-1), grads, g_alpha


# ----------------------------------------------------------------- public API

def decode(params: DecoderParams, alpha: np.ndarray, points: np.ndarray,
           engine: str = "auto") -> np.ndarray:
    """Decoded field [N x n] for a latent [d_alpha], or [B x N x n] for a batch [B x d_alpha]."""
    alpha, points, single = _check(params, alpha, points)
    if engine == "auto":
        engine = "affine" if params.separable else "direct"
    if engine == "affine":
        out = _affine_decode(params, alpha, points)
    elif engine == "direct":
        out = _direct(params, alpha, points)[0]
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return out[0] if single else out


def decode_backward(params: DecoderParams, alpha: np.ndarray, points: np.ndarray,
                    upstream: np.ndarray, engine: str = "auto"):
    """Gradients (dict over the optimizable names, d/d alpha) for sum(upstream * decode(...)).

    Frozen frequencies receive no gradient entry.
    """
    alpha, points, single = _check(params, alpha, points)
    upstream = np.asarray(upstream, dtype=np.float64)
    if single:
        upstream = upstream[None]
    check_finite(upstream, "upstream gradient")
    if engine == "auto":
        engine = "affine" if params.separable else "direct"
    if engine == "affine":
        grads, g_alpha = _affine_backward(params, alpha, points, upstream)
    elif engine == "direct":
        _, grads, g_alpha = _direct(params, alpha, points, upstream)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return grads, (g_alpha[0] if single else g_alpha)


def spectral_support(params: DecoderParams, alpha: np.ndarray, axis: int = 0, n_samples: int = 1024,
                     tol: float = 1e-6, offset: float = 0.0, domain: Domain | None = None,
                     window: str | None = None) -> list[frozenset]:
    """Frequency bins of a decoded 1D slice whose FFT magnitude exceeds tol * max, per channel.

    The slice runs over one period of the box along ``axis``; the other
    coordinates are held at ``offset``. Bins are signed integers (cycles per
    box length).
    """
    if n_samples < 2 or n_samples & (n_samples - 1):
        raise ValueError("n_samples must be a power of two")
    domain = domain or Domain()
    lo, hi = domain.bounds[axis]
    pts = np.full((n_samples, domain.dim), float(offset))
    pts[:, axis] = lo + np.arange(n_samples) * (hi - lo) / n_samples
    vals = decode(params, alpha, pts)
    if window == "hann":
        # periodic Hann: an on-lattice line maps to exactly three bins, leakage elsewhere decays fast
        vals = vals * (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_samples) / n_samples))[:, None]
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    spec = np.abs(np.fft.fft(vals, axis=0))
    bins = np.fft.fftfreq(n_samples, d=1.0 / n_samples).astype(int)
    out = []
    for c in range(vals.shape[1]):
        mag = spec[:, c]
        top = mag.max()
        out.append(frozenset(int(b) for b in bins[mag > tol * top]) if top > 0 else frozenset())
    return out


def to_arrays(params: DecoderParams, prefix: str = "dec/") -> tuple[dict, dict]:
    arrays = {prefix + k: v for k, v in params.bundle.params.items()}
    for c, oms in enumerate(params.omegas):
        for l, om in enumerate(oms, start=1):
            arrays[f"{prefix}omega/c{c}/{l}"] = om
    meta = {"latent_dim": params.latent_dim, "channels": params.channels, "layers": params.layers,
            "hidden": params.hidden, "freq_scale": params.freq_scale, "separable": params.separable,
            "names": params.bundle.names()}
    return arrays, meta


def from_arrays(arrays: dict, meta: dict, prefix: str = "dec/") -> DecoderParams:
    params = {k: arrays[prefix + k] for k in meta["names"]}
    omegas = [[arrays[f"{prefix}omega/c{c}/{l}"] for l in range(1, meta["layers"])]
              for c in range(meta["channels"])]
    return DecoderParams(ParamBundle(params), omegas, meta["latent_dim"], meta["channels"], meta["layers"],
                         meta["hidden"], meta["freq_scale"], meta["separable"])
