"""Selective state-space scan kernels and the volumetric Mamba-style adapter.

The recurrence, per channel c over tokens t with state vectors of size N:

    Abar_t = exp(delta_t[c] * A[c])                       (elementwise over N)
    Bbar_t = (Abar_t - 1) / A[c] * B_t   (zero-order hold)
             delta_t[c] * B_t            (Euler)
    h_t    = Abar_t * h_{t-1} + Bbar_t * x_t[c],  h_0 = 0
    y_t[c] = <C_t, h_t> + D[c] * x_t[c]

Per-token (delta, B, C) come from learned linear maps of the token; delta
passes through softplus so it stays positive. Two evaluators are provided:
a sequential reference loop and a Blelloch-style associative prefix scan
that combines (a, b) pairs under (a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2).

The block forward follows the published Mamba design (input projection to
two expanded branches, causal depthwise conv + SiLU, selective scan, SiLU
gate, output projection); the adapter wraps it with per-token layer norm
and a residual connection over z-major flattened volume tokens.

All elementwise pieces are written to accept complex inputs so forward
derivatives can be checked with complex-step differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from . import tensor_io
from .volume import PathLike


class ScanNumericError(FloatingPointError):
    """Non-finite value produced during a scan; carries the token index."""

    def __init__(self, token_index: int):
        super().__init__(f"non-finite scan value at token {token_index}")
        self.token_index = int(token_index)


class Discretization(str, Enum):
    ZOH = "zoh"
    EULER = "euler"


@dataclass(frozen=True)
class SsmParams:
    """State-space parameters plus the per-token input maps.

    a: (C, N) strictly negative continuous-time decay;
    d: (C,) skip weights;
    dt_weight (C, C) / dt_bias (C,): delta map (softplus applied);
    b_weight, c_weight: (N, C) maps producing per-token B and C.
    """

    a: np.ndarray
    d: np.ndarray
    dt_weight: np.ndarray
    dt_bias: np.ndarray
    b_weight: np.ndarray
    c_weight: np.ndarray
    discretization: Discretization = Discretization.ZOH

    def __post_init__(self) -> None:
        c, n = self.a.shape
        if not np.all(np.isfinite(self.a)) or np.any(self.a >= 0):
            raise ValueError("all entries of a must be finite and strictly negative")
        expected = {
            "d": (c,),
            "dt_weight": (c, c),
            "dt_bias": (c,),
            "b_weight": (n, c),
            "c_weight": (n, c),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n_channels(self) -> int:
        return int(self.a.shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.a.shape[1])


@dataclass(frozen=True)
class TokenSequence:
    """(L, C) token features, optionally tagged with the source volume shape.

    When origin_shape (D, H, W) is present the features are the z-major,
    x-fastest flattening of that volume, so L == D*H*W.
    """

    features: np.ndarray
    origin_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(f"features must be (L, C), got shape {self.features.shape}")
        if self.origin_shape is not None:
            expected = int(np.prod(self.origin_shape))
            if self.features.shape[0] != expected:
                raise ValueError(
                    f"origin shape {self.origin_shape} implies {expected} tokens, "
                    f"got {self.features.shape[0]}"
                )

    @property
    def length(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class AdapterConfig:
    norm_eps: float = 1e-5
    expand: int = 2
    conv_width: int = 4
    residual_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be > 0")
        if int(self.expand) != self.expand or self.expand < 1:
            raise ValueError("expand must be an integer >= 1")
        if int(self.conv_width) != self.conv_width or self.conv_width < 1:
            raise ValueError("conv_width must be an integer >= 1")


@dataclass(frozen=True)
class MambaBlockParams:
    """Weights of one Mamba block at channel width C with expansion E.

    in_proj maps C -> 2*E*C (scan branch and gate branch); conv is a
    depthwise causal convolution over the scan branch; ssm holds the scan
    parameters at the inner width E*C; out_proj maps E*C -> C.
    """

    in_proj_weight: np.ndarray
    in_proj_bias: np.ndarray
    conv_weight: np.ndarray
    conv_bias: np.ndarray
    ssm: SsmParams
    out_proj_weight: np.ndarray
    out_proj_bias: np.ndarray

    @property
    def n_channels(self) -> int:
        return int(self.in_proj_weight.shape[1])

    @property
    def inner_dim(self) -> int:
        return int(self.conv_weight.shape[0])

    @property
    def conv_width(self) -> int:
        return int(self.conv_weight.shape[1])


def _softplus(x: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(x):
        return np.log(1.0 + np.exp(x))
    out = np.empty_like(x, dtype=np.float64)
    big = x > 30.0
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = np.real(x) >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _expm1(x: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(x):
        return np.exp(x) - 1.0
    return np.expm1(x)


def selective_inputs(
    params: SsmParams, features: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token (delta, B, C) from the learned linear maps of the tokens."""
    delta = _softplus(features @ params.dt_weight.T + params.dt_bias)
    b_seq = features @ params.b_weight.T
    c_seq = features @ params.c_weight.T
    return delta, b_seq, c_seq


def discretize(
    a: np.ndarray,
    delta: np.ndarray,
    b_seq: np.ndarray,
    method: Discretization,
) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete (Abar, Bbar) of shape (L, C, N) from a (C, N) and delta (L, C)."""
    da = delta[:, :, None] * a[None, :, :]
    abar = np.exp(da)
    if method is Discretization.ZOH:
        bbar = (_expm1(da) / a[None, :, :]) * b_seq[:, None, :]
    else:
        bbar = delta[:, :, None] * b_seq[:, None, :]
    return abar, bbar


def _check_scan_args(a, d, delta, b_seq, c_seq, x) -> None:
    length, c = x.shape
    n = a.shape[1]
    if a.shape[0] != c or d.shape != (c,):
        raise ValueError("a/d channel dims do not match the token features")
    if delta.shape != (length, c):
        raise ValueError(f"delta must have shape {(length, c)}, got {delta.shape}")
    if b_seq.shape != (length, n) or c_seq.shape != (length, n):
        raise ValueError("b/c sequences must have shape (L, N)")
    if not np.iscomplexobj(delta) and np.any(delta < 0):
        raise ValueError("delta must be non-negative")


def _first_nonfinite_token(arr: np.ndarray) -> Optional[int]:
    ok = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    bad = ~ok
    return int(np.argmax(bad)) if bad.any() else None


def _project_outputs(
    h: np.ndarray, c_seq: np.ndarray, d: np.ndarray, x: np.ndarray
) -> np.ndarray:
    """y_t = <C_t, h_t> + D * x_t; shared by both scan paths so that inputs
    with identical states produce bitwise-identical outputs."""
    y = np.einsum("lcn,ln->lc", h, c_seq) + x * d
    bad = _first_nonfinite_token(y)
    if bad is not None:
        raise ScanNumericError(bad)
    return y


def selective_scan_sequential(
    a: np.ndarray,
    d: np.ndarray,
    delta: np.ndarray,
    b_seq: np.ndarray,
    c_seq: np.ndarray,
    x: np.ndarray,
    method: Discretization = Discretization.ZOH,
) -> np.ndarray:
    """Token-by-token evaluation of the recurrence; the reference path."""
    _check_scan_args(a, d, delta, b_seq, c_seq, x)
    with np.errstate(over="ignore", invalid="ignore"):
        abar, bbar = discretize(a, delta, b_seq, method)
        length, c = x.shape
        dtype = np.result_type(abar, x, np.float64)
        h = np.zeros((c, a.shape[1]), dtype=dtype)
        h_all = np.empty((length, c, a.shape[1]), dtype=dtype)
        for t in range(length):
            h = abar[t] * h + bbar[t] * x[t][:, None]
            h_all[t] = h
        bad = _first_nonfinite_token(h_all)
        if bad is not None:
            raise ScanNumericError(bad)
        return _project_outputs(h_all, c_seq, d, x)


def _prefix_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of h_t = a_t * h_{t-1} + b_t along axis 0 (Blelloch).

    The working arrays are padded to a power of two with the identity pair
    (1, 0); the up/down sweeps compute exclusive prefixes, and the original
    elements are applied once more for the inclusive result.
    """
    length = a.shape[0]
    padded = 1 << max(length - 1, 0).bit_length() if length > 1 else 1
    wa = np.ones((padded,) + a.shape[1:], dtype=a.dtype)
    wb = np.zeros((padded,) + b.shape[1:], dtype=b.dtype)
    wa[:length] = a
    wb[:length] = b

    step = 1
    while step < padded:
        idx = np.arange(2 * step - 1, padded, 2 * step)
        src = idx - step
        wb[idx] += wa[idx] * wb[src]
        wa[idx] *= wa[src]
        step *= 2

    wa[padded - 1] = 1.0
    wb[padded - 1] = 0.0
    step = padded // 2
    while step >= 1:
        idx = np.arange(2 * step - 1, padded, 2 * step)
        src = idx - step
        ta = wa[src].copy()
        tb = wb[src].copy()
        wa[src] = wa[idx]
        wb[src] = wb[idx]
        wb[idx] = ta * wb[idx] + tb
        wa[idx] = ta * wa[idx]
        step //= 2

    return a * wb[:length] + b


def selective_scan_parallel(
    a: np.ndarray,
    d: np.ndarray,
    delta: np.ndarray,
    b_seq: np.ndarray,
    c_seq: np.ndarray,
    x: np.ndarray,
    method: Discretization = Discretization.ZOH,
) -> np.ndarray:
    """Associative prefix-scan evaluation; equivalent to the sequential path."""
    _check_scan_args(a, d, delta, b_seq, c_seq, x)
    with np.errstate(over="ignore", invalid="ignore"):
        abar, bbar = discretize(a, delta, b_seq, method)
        h = _prefix_scan(abar, bbar * x[:, :, None])
        bad = _first_nonfinite_token(h)
        if bad is not None:
            raise ScanNumericError(bad)
        return _project_outputs(h, c_seq, d, x)


def scan_sequential(params: SsmParams, tokens: TokenSequence) -> TokenSequence:
    delta, b_seq, c_seq = selective_inputs(params, tokens.features)
    y = selective_scan_sequential(
        params.a, params.d, delta, b_seq, c_seq, tokens.features, params.discretization
    )
    return TokenSequence(y, tokens.origin_shape)


def scan_parallel(params: SsmParams, tokens: TokenSequence) -> TokenSequence:
    delta, b_seq, c_seq = selective_inputs(params, tokens.features)
    y = selective_scan_parallel(
        params.a, params.d, delta, b_seq, c_seq, tokens.features, params.discretization
    )
    return TokenSequence(y, tokens.origin_shape)


def causal_depthwise_conv(
    features: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> np.ndarray:
    """Depthwise conv over tokens; tap k-1 hits the current token (causal)."""
    length = features.shape[0]
    k = weight.shape[1]
    out = np.zeros_like(features)
    for i in range(k):
        shift = k - 1 - i
        if shift == 0:
            out += weight[:, i] * features
        elif shift < length:
            out[shift:] += weight[:, i] * features[:-shift]
    return out + bias


def mamba_block_forward(
    cfg: AdapterConfig, params: MambaBlockParams, tokens: TokenSequence
) -> TokenSequence:
    """Two-branch gated block around the selective scan."""
    x = tokens.features
    c = x.shape[1]
    inner = cfg.expand * c
    if params.in_proj_weight.shape != (2 * inner, c):
        raise ValueError(
            f"in_proj must map {c} -> {2 * inner} channels, got {params.in_proj_weight.shape}"
        )
    if params.conv_width != cfg.conv_width or params.inner_dim != inner:
        raise ValueError("conv weights do not match the adapter config")
    if params.ssm.n_channels != inner:
        raise ValueError(f"ssm channel dim must equal {inner}, got {params.ssm.n_channels}")

    proj = x @ params.in_proj_weight.T + params.in_proj_bias
    u, z = proj[:, :inner], proj[:, inner:]
    u = _silu(causal_depthwise_conv(u, params.conv_weight, params.conv_bias))
    delta, b_seq, c_seq = selective_inputs(params.ssm, u)
    y = selective_scan_parallel(
        params.ssm.a, params.ssm.d, delta, b_seq, c_seq, u, params.ssm.discretization
    )
    y = y * _silu(z)
    out = y @ params.out_proj_weight.T + params.out_proj_bias
    return TokenSequence(out, tokens.origin_shape)


def layer_norm(features: np.ndarray, eps: float) -> np.ndarray:
    """Per-token normalization over the channel axis (no learned affine)."""
    mean = features.mean(axis=-1, keepdims=True)
    centered = features - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def adapter_forward(
    cfg: AdapterConfig, params: MambaBlockParams, tokens: TokenSequence
) -> TokenSequence:
    """Layer norm + Mamba block + residual over flattened volume tokens."""
    if tokens.origin_shape is None:
        raise ValueError("adapter input must carry its origin volume shape")
    normed = TokenSequence(layer_norm(tokens.features, cfg.norm_eps), tokens.origin_shape)
    block_out = mamba_block_forward(cfg, params, normed).features
    return TokenSequence(
        tokens.features + cfg.residual_scale * block_out, tokens.origin_shape
    )


def random_ssm_params(
    channels: int,
    state_dim: int,
    rng: np.random.Generator,
    discretization: Discretization = Discretization.ZOH,
) -> SsmParams:
    """Well-conditioned random parameters for checks and tests."""
    target_delta = rng.uniform(1e-3, 1e-1, size=channels)
    return SsmParams(
        a=-rng.uniform(0.2, 1.5, size=(channels, state_dim)),
        d=rng.normal(0.0, 1.0, size=channels),
        dt_weight=rng.normal(0.0, 0.1 / np.sqrt(channels), size=(channels, channels)),
        dt_bias=np.log(np.expm1(target_delta)),
        b_weight=rng.normal(0.0, 1.0 / np.sqrt(channels), size=(state_dim, channels)),
        c_weight=rng.normal(0.0, 1.0 / np.sqrt(channels), size=(state_dim, channels)),
        discretization=discretization,
    )


def random_block_params(
    cfg: AdapterConfig,
    channels: int,
    state_dim: int,
    rng: np.random.Generator,
) -> MambaBlockParams:
    inner = cfg.expand * channels
    return MambaBlockParams(
        in_proj_weight=rng.normal(0.0, 1.0 / np.sqrt(channels), size=(2 * inner, channels)),
        in_proj_bias=np.zeros(2 * inner),
        conv_weight=rng.normal(0.0, 1.0 / np.sqrt(cfg.conv_width), size=(inner, cfg.conv_width)),
        conv_bias=np.zeros(inner),
        ssm=random_ssm_params(inner, state_dim, rng),
        out_proj_weight=rng.normal(0.0, 1.0 / np.sqrt(inner), size=(channels, inner)),
        out_proj_bias=np.zeros(channels),
    )


def zero_block_params(cfg: AdapterConfig, channels: int, state_dim: int) -> MambaBlockParams:
    """All-zero block weights (decay fixed at -1 to stay valid); the block
    then outputs exactly zero and the adapter reduces to the identity."""
    inner = cfg.expand * channels
    return MambaBlockParams(
        in_proj_weight=np.zeros((2 * inner, channels)),
        in_proj_bias=np.zeros(2 * inner),
        conv_weight=np.zeros((inner, cfg.conv_width)),
        conv_bias=np.zeros(inner),
        ssm=SsmParams(
            a=-np.ones((inner, state_dim)),
            d=np.zeros(inner),
            dt_weight=np.zeros((inner, inner)),
            dt_bias=np.zeros(inner),
            b_weight=np.zeros((state_dim, inner)),
            c_weight=np.zeros((state_dim, inner)),
        ),
        out_proj_weight=np.zeros((channels, inner)),
        out_proj_bias=np.zeros(channels),
    )


def save_ssm_params(params: SsmParams, directory: PathLike) -> None:
    tensors = {
        "a": params.a,
        "d": params.d,
        "dt_weight": params.dt_weight,
        "dt_bias": params.dt_bias,
        "b_weight": params.b_weight,
        "c_weight": params.c_weight,
    }
    tensor_io.save_bundle(
        directory, tensors, extra={"discretization": params.discretization.value}
    )


def load_ssm_params(directory: PathLike) -> SsmParams:
    tensors, extra = tensor_io.load_bundle(directory)
    return SsmParams(
        discretization=Discretization(extra.get("discretization", "zoh")),
        **{k: tensors[k] for k in ("a", "d", "dt_weight", "dt_bias", "b_weight", "c_weight")},
    )
