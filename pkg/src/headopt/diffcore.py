"""Dense float32 math with hand-derived backward passes.

Every differentiable stage of the pipeline (offset MLP, bilinear resize,
blending) lives here as an explicit forward + adjoint pair.  There is no
autodiff tape: the pipeline's dataflow is fixed, and explicit adjoints keep
gradient routing under manual control.  The finite-difference harness
(`gradcheck`) is the shared oracle used by every module's gradient tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError

F32 = np.float32


def as_f32(a) -> np.ndarray:
    """Contiguous row-major float32 view/copy of `a`."""
    return np.ascontiguousarray(a, dtype=F32)


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise NumericsError if `arr` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericsError(f"{name}: {bad} non-finite value(s)")
    return arr


# ---------------------------------------------------------------------------
# Offset MLP: x -> scale * tanh(W3 @ relu(W2 @ relu(W1 @ relu(W0 @ x + b0) + b1) + b2) + b3)
# ---------------------------------------------------------------------------

HIDDEN_WIDTH = 128
HIDDEN_LAYERS = 3
OUTPUT_SCALE = 0.1


@dataclass
class MlpParams:
    """Weights/biases of the per-vertex offset MLP.

    weights[i] has shape [out_i, in_i]; the canonical configuration is
    3 hidden layers of width 128 and a tanh output scaled by 0.1, which
    bounds every output component to (-0.1, 0.1).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_scale: float = OUTPUT_SCALE

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def validate(self) -> None:
        if len(self.weights) != HIDDEN_LAYERS + 1 or len(self.biases) != HIDDEN_LAYERS + 1:
            raise ShapeError(f"expected {HIDDEN_LAYERS + 1} layers, got {len(self.weights)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: input width {w.shape[1]} does not chain")
        hidden = [w.shape[0] for w in self.weights[:-1]]
        if hidden != [HIDDEN_WIDTH] * HIDDEN_LAYERS:
            raise ShapeError(f"hidden widths must be {[HIDDEN_WIDTH] * HIDDEN_LAYERS}, got {hidden}")
        if abs(self.output_scale - OUTPUT_SCALE) > 1e-12:
            raise ShapeError(f"output scale must be {OUTPUT_SCALE}")

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.output_scale)

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


@dataclass
class MlpGrads:
    """Parameter adjoints, same layout as MlpParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "MlpGrads":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])

    def add_(self, other: "MlpGrads") -> "MlpGrads":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self


def init_mlp(
    in_dim: int,
    rng: np.random.Generator,
    out_dim: int = 3,
    zero_final: bool = True,
) -> MlpParams:
    """He-uniform fan-in initialization; the final layer is zeroed by default
    so initial offsets are exactly zero."""
    widths = [in_dim] + [HIDDEN_WIDTH] * HIDDEN_LAYERS + [out_dim]
    weights, biases = [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        if zero_final and i == len(widths) - 2:
            w = np.zeros((fan_out, fan_in), dtype=F32)
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(F32)
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=F32))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; x is [B, in_dim], output [B, out_dim] in (-scale, scale)."""
    return mlp_forward_cached(params, x)[0]


def mlp_forward_cached(params: MlpParams, x: np.ndarray):
    """Forward pass returning (output, cache) for the backward pass."""
    x = as_f32(x)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"mlp input {x.shape}, expected [B, {params.in_dim}]")
    acts = [x]
    h = x
    n = len(params.weights)
    for i in range(n - 1):
        h = np.maximum(h @ params.weights[i].T + params.biases[i], F32(0.0))
        acts.append(h)
    z = h @ params.weights[-1].T + params.biases[-1]
    t = np.tanh(z)
    y = F32(params.output_scale) * t
    return y, (acts, t)


def mlp_backward(params: MlpParams, x: np.ndarray, output_adjoint: np.ndarray, cache=None):
    """Adjoints of mlp_forward: returns (MlpGrads, input_adjoint)."""
    if cache is None:
        _, cache = mlp_forward_cached(params, x)
    acts, t = cache
    dy = as_f32(output_adjoint)
    if dy.shape != (acts[0].shape[0], params.out_dim):
        raise ShapeError(f"output adjoint {dy.shape}, expected [B, {params.out_dim}]")
    n = len(params.weights)
    grads = MlpGrads.zeros_like(params)
    # tanh * scale head
    dz = dy * F32(params.output_scale) * (F32(1.0) - t * t)
    grads.weights[n - 1][:] = dz.T @ acts[n - 1]
    grads.biases[n - 1][:] = dz.sum(axis=0)
    dh = dz @ params.weights[n - 1]
    for i in range(n - 2, -1, -1):
        dh = dh * (acts[i + 1] > 0)
        grads.weights[i][:] = dh.T @ acts[i]
        grads.biases[i][:] = dh.sum(axis=0)
        dh = dh @ params.weights[i]
    return grads, dh


# ---------------------------------------------------------------------------
# Bilinear resize (align-corners = false) and its transpose
# ---------------------------------------------------------------------------


def _resize_taps(in_size: int, out_size: int):
    """Source taps for 1D bilinear resampling, align-corners=false.

    Output sample j reads source coordinate (j + 0.5) * in/out - 0.5; the two
    neighbouring taps are clamped to the border (edge replication).
    Returns (i0, i1, t) with weight (1 - t) on i0 and t on i1.
    """
    scale = in_size / out_size
    x = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(x).astype(np.int64)
    t = (x - i0).astype(F32)
    i1 = np.clip(i0 + 1, 0, in_size - 1)
    i0 = np.clip(i0, 0, in_size - 1)
    return i0, i1, t


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample [C,H,W] to [C,out_h,out_w]; constant images stay constant."""
    src = as_f32(src)
    if src.ndim != 3:
        raise ShapeError(f"bilinear_resize expects [C,H,W], got {src.shape}")
    c, h, w = src.shape
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: empty size {src.shape} -> ({out_h},{out_w})")
    y0, y1, ty = _resize_taps(h, out_h)
    x0, x1, tx = _resize_taps(w, out_w)
    top = src[:, y0, :]
    bot = src[:, y1, :]
    rows = top * (F32(1.0) - ty)[None, :, None] + bot * ty[None, :, None]
    left = rows[:, :, x0]
    right = rows[:, :, x1]
    return left * (F32(1.0) - tx)[None, None, :] + right * tx[None, None, :]


def bilinear_resize_backward(src_shape, out_adjoint: np.ndarray) -> np.ndarray:
    """Transpose of bilinear_resize: scatter `out_adjoint` back onto src_shape."""
    c, h, w = src_shape
    dout = as_f32(out_adjoint)
    if dout.ndim != 3 or dout.shape[0] != c:
        raise ShapeError(f"adjoint {dout.shape} does not match src {tuple(src_shape)}")
    out_h, out_w = dout.shape[1], dout.shape[2]
    y0, y1, ty = _resize_taps(h, out_h)
    x0, x1, tx = _resize_taps(w, out_w)
    # Columns first (transpose of the second lerp), then rows.
    drows = np.zeros((c, out_h, w), dtype=F32)
    np.add.at(drows, (slice(None), slice(None), x0), dout * (F32(1.0) - tx)[None, None, :])
    np.add.at(drows, (slice(None), slice(None), x1), dout * tx[None, None, :])
    dsrc = np.zeros((c, h, w), dtype=F32)
    np.add.at(dsrc, (slice(None), y0, slice(None)), drows * (F32(1.0) - ty)[None, :, None])
    np.add.at(dsrc, (slice(None), y1, slice(None)), drows * ty[None, :, None])
    return dsrc


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    """Outcome of a central-difference check.

    Per-element errors are normalized by the largest gradient magnitude in
    the owning tensor, so `max_rel_err` is comparable across parameters of
    very different scales.
    """

    passed: bool
    max_rel_err: float
    tol: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, tuple, float, float]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        lines = [f"gradcheck {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e}, {self.n_checked} entries)"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        for name, idx, a, n in self.failures[:10]:
            lines.append(f"  FAIL {name}{list(idx)}: analytic {a:.6e} vs numeric {n:.6e}")
        return "\n".join(lines)


def gradcheck(
    f,
    params: dict[str, np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-3,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of `f` against central finite differences.

    `f(params) -> (loss, grads)` where `grads` maps the same keys to arrays
    of matching shape.  Each checked entry is perturbed by ±h; large tensors
    can be subsampled with `max_entries_per_param` (seeded through `rng`).
    """
    params = {k: as_f32(v) for k, v in params.items()}
    _, analytic = f(params)
    report = GradcheckReport(passed=True, max_rel_err=0.0, tol=tol, n_checked=0)
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {a.shape}, param {p.shape}")
        flat_idx = np.arange(p.size)
        if max_entries_per_param is not None and p.size > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            flat_idx = rng.choice(p.size, size=max_entries_per_param, replace=False)
            flat_idx.sort()
        numeric = np.zeros(len(flat_idx))
        for k, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, p.shape)
            orig = p[idx]
            p[idx] = orig + F32(h)
            hi = float(p[idx])
            lp, _ = f(params)
            p[idx] = orig - F32(h)
            lo = float(p[idx])
            lm, _ = f(params)
            p[idx] = orig
            # divide by the realized float32 step, not the nominal one
            numeric[k] = (float(lp) - float(lm)) / (hi - lo)
        a_sel = a.reshape(-1)[flat_idx]
        scale = max(np.max(np.abs(a_sel), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
        errs = np.abs(a_sel - numeric) / scale
        report.per_param[name] = float(errs.max(initial=0.0))
        report.n_checked += len(flat_idx)
        report.max_rel_err = max(report.max_rel_err, report.per_param[name])
        for k in np.nonzero(errs > tol)[0]:
            idx = np.unravel_index(flat_idx[k], p.shape)
            report.failures.append((name, idx, float(a_sel[k]), float(numeric[k])))
    report.passed = report.max_rel_err < tol
    return report
