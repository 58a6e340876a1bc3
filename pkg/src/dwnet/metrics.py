"""Autoregressive rollout and the evaluation metrics.

Two regimes: frame-wise accuracy via the field-averaged relative L2 error,
and statistical fidelity for chaotic systems via variance-normalized errors
of time-averaged diagnostics (radial FFT spectra, temporal autocorrelation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .trajectory import Trajectory


def scaled_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    """Field-averaged relative L2 error of one frame, (M, H, W) vs (M, H, W)."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise ValueError(f"frame shape mismatch: {pred.shape} vs {truth.shape}")
    num = np.sqrt(((pred - truth) ** 2).sum(axis=(1, 2)))
    den = np.sqrt((truth ** 2).sum(axis=(1, 2)))
    if np.any(den == 0):
        raise ValueError("relative L2 undefined for a zero-norm ground-truth field")
    return float((num / den).mean())


@dataclass
class Spectrum:
    k: np.ndarray        # integer radial bin centers, strictly increasing
    power: np.ndarray    # time-averaged |F|^2 / (H*W), summed per bin
    field: str = ""


def _radial_bins(h: int, w: int) -> tuple[np.ndarray, int]:
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    kr = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    bins = np.rint(kr).astype(np.int64)
    return bins, int(bins.max())


def radial_fft_spectrum(traj: Trajectory, field: int | str) -> Spectrum:
    """Time-averaged isotropic power spectrum of one field.

    Per frame the 2D FFT power |F|^2/(H*W) is summed into integer radial
    bins (round(|k|), bin width 1); bins run to the corner wavenumber so the
    total equals the spatial sum of squares (Parseval).
    """
    if isinstance(field, str):
        field = traj.field_names.index(field)
    if not all(traj.periodic):
        warnings.warn("computing an FFT spectrum on a non-periodic grid",
                      stacklevel=2)
    frames = traj.fields[:, field].astype(np.float64)
    t, h, w = frames.shape
    bins, kmax = _radial_bins(h, w)
    flat = bins.ravel()
    acc = np.zeros(kmax + 1, np.float64)
    for i in range(t):
        p = np.abs(np.fft.fft2(frames[i])) ** 2 / (h * w)
        acc += np.bincount(flat, weights=p.ravel(), minlength=kmax + 1)
    acc /= t
    name = traj.field_names[field]
    return Spectrum(np.arange(kmax + 1), acc, name)


def autocorrelation(series: np.ndarray, max_lag: int | None = None) -> np.ndarray:
    """Normalized temporal autocorrelation; entry 0 is exactly 1."""
    x = np.asarray(series, np.float64).ravel()
    t = x.size
    if max_lag is None:
        max_lag = t - 1
    if t < 2 or max_lag >= t:
        raise ValueError(f"series of length {t} cannot supply {max_lag} lags")
    x = x - x.mean()
    denom = float((x * x).sum())
    if denom == 0:
        raise ValueError("autocorrelation undefined for a zero-variance series")
    out = np.empty(max_lag + 1, np.float64)
    out[0] = 1.0
    for lag in range(1, max_lag + 1):
        out[lag] = float((x[:-lag] * x[lag:]).sum()) / denom
    return out


def stat_err(y: np.ndarray, y_true: np.ndarray) -> float:
    """Mean squared deviation of a diagnostic curve, normalized by the
    reference curve's variance."""
    y = np.asarray(y, np.float64)
    y_true = np.asarray(y_true, np.float64)
    if y.shape != y_true.shape:
        raise ValueError(f"curves sampled differently: {y.shape} vs {y_true.shape}")
    var = float(y_true.var())
    if var == 0:
        raise ValueError("reference curve has zero variance")
    return float(((y - y_true) ** 2).mean()) / var


class RolloutBlowUp(RuntimeError):
    pass


def rollout(model, history: np.ndarray, steps: int, mean: np.ndarray,
            std: np.ndarray, dt: float, field_names=None,
            periodic=(True, True)) -> Trajectory:
    """Autoregressive prediction from a raw (H_hist, M, H, W) history window.

    The window is z-scored with the given per-field stats, fed through the
    model (past frames concatenated channel-wise, oldest first), and each
    prediction is appended while the oldest frame drops out.  Output frames
    are de-normalized.  If a prediction goes non-finite the trajectory is
    truncated at the last finite frame and flagged in meta['blew_up_at'].
    """
    history = np.asarray(history, np.float32)
    if history.ndim != 4:
        raise ValueError(f"history must be (H_hist, M, H, W), got {history.shape}")
    h_hist, m, h, w = history.shape
    if model.config.in_channels != h_hist * m:
        raise ValueError(f"model expects {model.config.in_channels} input channels, "
                         f"history supplies {h_hist * m}")
    if model.config.out_channels != m:
        raise ValueError("model output channels must match the field count")
    mu = np.asarray(mean, np.float32).reshape(1, m, 1, 1)
    sigma = np.asarray(std, np.float32).reshape(1, m, 1, 1)
    sigma = np.where(sigma > 0, sigma, 1.0).astype(np.float32)

    window = [((history[i:i + 1] - mu) / sigma) for i in range(h_hist)]
    preds = []
    blew_up_at = None
    for step in range(steps):
        x = np.concatenate(window, axis=1)
        out = model.forward(x).data
        if not np.all(np.isfinite(out)):
            blew_up_at = step
            break
        preds.append(out)
        window.append(out)
        window.pop(0)
    if preds:
        frames = np.concatenate(preds, axis=0) * sigma + mu
    else:
        frames = np.zeros((0, m, h, w), np.float32)
    names = list(field_names) if field_names is not None \
        else [f"field{i}" for i in range(m)]
    traj = Trajectory(frames, dt, names, tuple(periodic),
                      mean=np.asarray(mean, np.float64),
                      std=np.asarray(std, np.float64))
    if blew_up_at is not None:
        traj.meta["blew_up_at"] = blew_up_at
    return traj


def rollout_errors(pred: Trajectory, truth: np.ndarray) -> tuple[float, float]:
    """First-step and last-step relative L2 errors of a predicted trajectory
    against ground-truth frames aligned to the same steps."""
    if pred.frames == 0:
        return float("nan"), float("nan")
    n = min(pred.frames, truth.shape[0])
    first = scaled_l2(pred.fields[0], truth[0])
    last = scaled_l2(pred.fields[n - 1], truth[n - 1])
    return first, last


def spectrum_errors(pred: Trajectory, truth: Trajectory,
                    discard: int = 100) -> dict[str, float]:
    """Variance-normalized errors between time-averaged spectra, per field.

    The first `discard` predicted frames are dropped as transient (clamped
    for short desk-scale rollouts); the reference uses all its frames.
    """
    errs = {}
    discard_eff = min(discard, max(pred.frames - 1, 0))
    for name in truth.field_names:
        ref = radial_fft_spectrum(truth, name)
        sub = Trajectory(pred.fields[discard_eff:], pred.dt, pred.field_names,
                         pred.periodic)
        got = radial_fft_spectrum(sub, name)
        n = min(ref.power.size, got.power.size)
        errs[name] = stat_err(got.power[:n], ref.power[:n])
    return errs


def write_curve_csv(path, xs, ys, xlabel: str = "k") -> None:
    """Two-column CSV export for spectra and error curves."""
    with open(path, "w") as f:
        f.write(f"{xlabel},value\n")
        for x, y in zip(xs, ys):
            f.write(f"{float(x):g},{float(y)!r}\n")
