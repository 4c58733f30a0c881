"""Online reconstruction memory.

A small two-layer GELU MLP is reinitialized per slide and adapted at test
time: each incoming tile is scored by the Frobenius norm of the reconstruction
loss gradient *before* any parameter change (its surprise), then either applied
as one clipped SGD step or absorbed as multiplicative decay. The scoring path
never materializes parameter-sized gradients; the factored identity

    sigma^2 = ||dL/dout||^2 (1 + ||hidden||^2) + ||dL/dpre||^2 (1 + ||z||^2)

gives the exact norm from two matvecs. Updates are rank-1 and sparse, so they
may materialize.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg.blas import dger
from scipy.special import ndtr

from .core import DeterministicRng, EngineConfig, state_digest_bytes

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

ACTION_WARMUP = "warmup_update"
ACTION_UPDATE = "update"
ACTION_DECAY = "decay"


@dataclass
class MemoryState:
    """Parameters plus warm-up statistics and surprise bookkeeping for one
    slide (or one local ROI neighborhood)."""

    w1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (d, hidden)
    b2: np.ndarray  # (d,)
    step_count: int = 0
    warmup_scores: list = field(default_factory=list)
    threshold: Optional[float] = None
    surprise_history: list = field(default_factory=list)
    update_count: int = 0
    decay_count: int = 0

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "MemoryState":
        return MemoryState(
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            step_count=self.step_count,
            warmup_scores=list(self.warmup_scores),
            threshold=self.threshold,
            surprise_history=list(self.surprise_history),
            update_count=self.update_count,
            decay_count=self.decay_count,
        )

    def digest(self) -> str:
        """Hex digest of parameters and history; identifies a state bit-exactly."""
        hist = np.asarray(self.surprise_history, dtype=np.float64)
        meta = np.asarray(
            [self.step_count, self.update_count, self.decay_count], dtype=np.int64
        )
        thr = np.asarray([math.nan if self.threshold is None else self.threshold])
        return state_digest_bytes(self.w1, self.b1, self.w2, self.b2, hist, meta, thr)


@dataclass(frozen=True)
class SurpriseResult:
    """Pre-update surprise for one tile, with the backprop pieces needed to
    reconstruct the full gradient if an update follows."""

    sigma: float
    loss: float
    residual_grad: np.ndarray  # dL/doutput, length d
    hidden_grad: np.ndarray  # dL/dpre-activation, length hidden
    hidden_act: np.ndarray  # GELU(w1 z + b1), length hidden
    input_norm_sq: float
    hidden_norm_sq: float


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU: x * Phi(x), with Phi(x) = 0.5 (1 + erf(x / sqrt 2))."""
    return x * ndtr(x)


def gelu_prime(x: np.ndarray) -> np.ndarray:
    """d/dx GELU(x) = Phi(x) + x phi(x)."""
    return ndtr(x) + x * (_INV_SQRT_2PI * np.exp(-0.5 * x * x))


def init_memory(cfg: EngineConfig, rng: DeterministicRng) -> MemoryState:
    """Fresh memory; each entry uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    if cfg.d <= 0 or cfg.hidden <= 0:
        raise ValueError("d and hidden must be positive")
    gen = rng.generator()
    bound1 = 1.0 / math.sqrt(cfg.d)
    bound2 = 1.0 / math.sqrt(cfg.hidden)
    return MemoryState(
        w1=gen.uniform(-bound1, bound1, size=(cfg.hidden, cfg.d)),
        b1=gen.uniform(-bound1, bound1, size=cfg.hidden),
        w2=gen.uniform(-bound2, bound2, size=(cfg.d, cfg.hidden)),
        b2=gen.uniform(-bound2, bound2, size=cfg.d),
    )


def _check_input(state: MemoryState, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != state.d:
        raise ValueError(f"input length {z.shape[0]} != memory d {state.d}")
    return z


def _forward_full(state: MemoryState, z: np.ndarray):
    pre = state.w1 @ z + state.b1
    hid = gelu(pre)
    out = state.w2 @ hid + state.b2
    return pre, hid, out


def forward(state: MemoryState, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruction pass: returns (output, hidden activation)."""
    z = _check_input(state, z)
    _, hid, out = _forward_full(state, z)
    return out, hid


def huber_loss(
    output: np.ndarray, target: np.ndarray, delta: float
) -> tuple[float, np.ndarray]:
    """Mean-reduced per-coordinate Huber loss and its gradient w.r.t. output."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    output = np.asarray(output, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if output.shape != target.shape:
        raise ValueError("output and target lengths differ")
    r = output - target
    a = np.abs(r)
    quad = a <= delta
    losses = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.clip(r, -delta, delta) / r.shape[0]
    return float(losses.mean()), grad


def score_surprise(state: MemoryState, z: np.ndarray, delta: float) -> SurpriseResult:
    """Surprise of one tile at the current state, without touching the state.

    Two matvecs forward, one matvec back; the parameter-gradient norm comes
    from the factored identity, so nothing parameter-sized is allocated.
    """
    z = _check_input(state, z)
    pre, hid, out = _forward_full(state, z)
    loss, rg = huber_loss(out, z, delta)
    hg = (state.w2.T @ rg) * gelu_prime(pre)
    nz2 = float(z @ z)
    nh2 = float(hid @ hid)
    sigma = math.sqrt(float(rg @ rg) * (1.0 + nh2) + float(hg @ hg) * (1.0 + nz2))
    return SurpriseResult(
        sigma=sigma,
        loss=loss,
        residual_grad=rg,
        hidden_grad=hg,
        hidden_act=hid,
        input_norm_sq=nz2,
        hidden_norm_sq=nh2,
    )


def materialize_gradients(state: MemoryState, z: np.ndarray, delta: float) -> dict:
    """Full parameter gradient blocks (rank-1 outer products). Used by the
    update oracle, tests, and the factored-vs-materialized benchmark."""
    z = _check_input(state, z)
    res = score_surprise(state, z, delta)
    return {
        "w1": np.outer(res.hidden_grad, z),
        "b1": res.hidden_grad.copy(),
        "w2": np.outer(res.residual_grad, res.hidden_act),
        "b2": res.residual_grad.copy(),
    }


def _apply_clipped_step(
    state: MemoryState, z: np.ndarray, res: SurpriseResult, cfg: EngineConfig
) -> None:
    """One SGD step on the tile's reconstruction loss with global-norm clipping.

    The global gradient norm is the factored sigma, so the applied step is
    lr * min(1, clip/sigma) * gradient. Rank-1 blocks land in place via dger.
    """
    g = res.sigma
    if g == 0.0:
        return
    eta = cfg.lr * min(1.0, cfg.clip / g)
    # w2 -= eta * outer(residual_grad, hidden_act); w2.T is F-contiguous
    dger(-eta, res.hidden_act, res.residual_grad, a=state.w2.T, overwrite_a=1)
    state.b2 -= eta * res.residual_grad
    dger(-eta, z, res.hidden_grad, a=state.w1.T, overwrite_a=1)
    state.b1 -= eta * res.hidden_grad


def _apply_decay(state: MemoryState, alpha_f: float) -> None:
    state.w1 *= alpha_f
    state.b1 *= alpha_f
    state.w2 *= alpha_f
    state.b2 *= alpha_f


def _population_std(scores: np.ndarray, mean: float) -> float:
    return float(np.sqrt(np.mean((scores - mean) ** 2)))


def set_threshold_from_warmup(state: MemoryState, lam: float) -> float:
    """Calibrate the surprise threshold mu_w + lam * s_w from the warm-up
    scores (population std). Called exactly once per state."""
    if state.threshold is not None:
        raise ValueError("threshold already set")
    if not state.warmup_scores:
        raise ValueError("no warm-up scores recorded")
    scores = np.asarray(state.warmup_scores, dtype=np.float64)
    mu = float(np.mean(scores))
    state.threshold = mu + lam * _population_std(scores, mu)
    return state.threshold


def observe_tile(
    state: MemoryState, z: np.ndarray, cfg: EngineConfig
) -> tuple[float, str]:
    """Score one tile, record its surprise, and advance the state.

    Warm-up tiles always take a clipped step; the threshold is set at the
    warm-up boundary; afterwards tiles either step (sigma > threshold) or
    decay every parameter by alpha_f.
    """
    z = _check_input(state, z)
    res = score_surprise(state, z, cfg.huber_delta)
    sigma = res.sigma
    state.surprise_history.append(sigma)

    if state.step_count < cfg.t_w:
        state.warmup_scores.append(sigma)
        _apply_clipped_step(state, z, res, cfg)
        action = ACTION_WARMUP
        state.step_count += 1
        if state.step_count == cfg.t_w:
            set_threshold_from_warmup(state, cfg.lam)
    else:
        if sigma > state.threshold:
            _apply_clipped_step(state, z, res, cfg)
            state.update_count += 1
            action = ACTION_UPDATE
        else:
            _apply_decay(state, cfg.alpha_f)
            state.decay_count += 1
            action = ACTION_DECAY
        state.step_count += 1
    return sigma, action


def summary_stats(state: MemoryState) -> tuple[float, float, float]:
    """Mean and population std over the whole surprise history, plus the
    fraction of post-warm-up scores strictly above the threshold."""
    if state.step_count < 1 or not state.surprise_history:
        raise ValueError("no surprise history recorded")
    hist = np.asarray(state.surprise_history, dtype=np.float64)
    mean = float(np.mean(hist))
    std = _population_std(hist, mean)
    post = hist[len(state.warmup_scores):]
    if state.threshold is None:
        high = 0
    else:
        high = int(np.sum(post > state.threshold))
    high_fraction = high / max(1, len(post))
    return mean, std, high_fraction


def batch_score_surprise(
    state: MemoryState,
    features: np.ndarray,
    delta: float,
    chunk: int = 256,
) -> np.ndarray:
    """Surprise of many tiles against one frozen state.

    Chunked GEMM formulation of the factored norm; used for throughput
    measurement and diagnostics. The state is never modified.
    """
    Z = np.asarray(features, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != state.d:
        raise ValueError(f"features must be (n, {state.d})")
    n = Z.shape[0]
    inv_d = 1.0 / state.d
    w1t = np.ascontiguousarray(state.w1.T)
    w2t = np.ascontiguousarray(state.w2.T)
    sig = np.empty(n)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        Zc = Z[s:e]
        pre = Zc @ w1t
        pre += state.b1
        Phi = ndtr(pre)
        hid = pre * Phi
        out = hid @ w2t
        out += state.b2
        out -= Zc
        np.clip(out, -delta, delta, out=out)
        out *= inv_d  # residual gradient
        gh = out @ state.w2
        gp = np.exp(-0.5 * pre * pre)
        gp *= _INV_SQRT_2PI
        gp *= pre
        gp += Phi
        gh *= gp
        nr2 = np.einsum("ij,ij->i", out, out)
        nh2 = np.einsum("ij,ij->i", hid, hid)
        ng2 = np.einsum("ij,ij->i", gh, gh)
        nz2 = np.einsum("ij,ij->i", Zc, Zc)
        sig[s:e] = np.sqrt(nr2 * (1.0 + nh2) + ng2 * (1.0 + nz2))
    return sig


_SNAPSHOT_MAGIC = b"PNMS"
_SNAPSHOT_VERSION = 1


def save_state(state: MemoryState, path) -> None:
    """Diagnostic snapshot: versioned binary blob of parameters plus history."""
    hist = np.asarray(state.surprise_history, dtype=np.float64)
    warm = np.asarray(state.warmup_scores, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_SNAPSHOT_MAGIC)
        f.write(
            struct.pack(
                "<IIIqqqd?",
                _SNAPSHOT_VERSION,
                state.hidden,
                state.d,
                state.step_count,
                state.update_count,
                state.decay_count,
                state.threshold if state.threshold is not None else math.nan,
                state.threshold is not None,
            )
        )
        f.write(struct.pack("<qq", len(warm), len(hist)))
        for arr in (state.w1, state.b1, state.w2, state.b2, warm, hist):
            f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_state(path) -> MemoryState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _SNAPSHOT_MAGIC:
            raise ValueError(f"not a memory snapshot (magic {magic!r})")
        version, hidden, d, steps, ups, downs, thr, has_thr = struct.unpack(
            "<IIIqqqd?", f.read(struct.calcsize("<IIIqqqd?"))
        )
        if version != _SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        n_warm, n_hist = struct.unpack("<qq", f.read(16))

        def read_arr(shape):
            count = int(np.prod(shape))
            data = np.frombuffer(f.read(8 * count), dtype="<f8").astype(np.float64)
            return data.reshape(shape)

        state = MemoryState(
            w1=read_arr((hidden, d)),
            b1=read_arr((hidden,)),
            w2=read_arr((d, hidden)),
            b2=read_arr((d,)),
            step_count=steps,
            update_count=ups,
            decay_count=downs,
        )
        state.warmup_scores = read_arr((n_warm,)).tolist()
        state.surprise_history = read_arr((n_hist,)).tolist()
        state.threshold = thr if has_thr else None
        return state


def local_config(cfg: EngineConfig, warmup: int) -> EngineConfig:
    """Config for a fresh local ROI memory with its own warm-up length."""
    return replace(cfg, t_w=warmup)
