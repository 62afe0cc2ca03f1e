"""Empirical effective receptive fields and theoretical receptive-field bookkeeping."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .arch import Model, shape_walk
from .tensor import Tensor, backward


class UntrainedStatisticsError(RuntimeError):
    """Inference-mode batch norm would run on running statistics that were never updated."""


@dataclass
class ErfMap:
    layer: str
    channel: int
    values: np.ndarray  # (H, W), mean absolute input gradient
    runs: int
    seed: int

    def normalized(self) -> np.ndarray:
        total = self.values.sum()
        return self.values / total if total > 0 else self.values.copy()

    def support(self, threshold: float = 0.05) -> np.ndarray:
        """Pixels at or above ``threshold`` times the peak (exact zeros never count)."""
        peak = self.values.max()
        if peak <= 0:
            return np.zeros(self.values.shape, dtype=bool)
        return (self.values >= threshold * peak) & (self.values > 0)

    def support_radius(self, threshold: float = 0.05) -> float:
        """Radius of the disc with the same area as the thresholded support."""
        return float(np.sqrt(self.support(threshold).sum() / np.pi))

    def max_radius(self, threshold: float = 0.05) -> int:
        """Largest Chebyshev distance from the centre pixel inside the support."""
        ys, xs = np.nonzero(self.support(threshold))
        if ys.size == 0:
            return 0
        cy, cx = (s // 2 for s in self.values.shape)
        return int(max(np.abs(ys - cy).max(), np.abs(xs - cx).max()))


@contextmanager
def _frozen(model: Model):
    params = [t for _, t in model.parameters()]
    flags = [t.requires_grad for t in params]
    for t in params:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, f in zip(params, flags):
            t.requires_grad = f


def _input_shape(model: Model) -> Tuple[int, int, int]:
    spec = model.spec
    return (spec.input_channels, spec.input_size, spec.input_size)


def compute_erf(model: Model, layer: str, channel: int, runs: int = 100, seed: int = 0,
                input_shape: Optional[Tuple[int, int, int]] = None, chunk: int = 25) -> ErfMap:
    """Average |d feature(centre) / d input| over ``runs`` uniform random inputs.

    The model is put in inference mode, so batch samples do not interact
    and runs can be evaluated in chunks.
    """
    if layer not in model.nodes:
        raise KeyError(f"unknown layer {layer!r}")
    shape = input_shape or _input_shape(model)
    shapes = shape_walk(model, (1,) + tuple(shape))
    out_shape = shapes[layer]
    if len(out_shape) != 4:
        raise ValueError(f"layer {layer} is not a spatial feature map")
    if not 0 <= channel < out_shape[1]:
        raise IndexError(f"channel {channel} out of range for {layer} with {out_shape[1]} channels")
    model.eval()
    if any(bn.num_batches_tracked == 0 for bn in model.batchnorms()):
        raise UntrainedStatisticsError("batch-norm running statistics were never estimated; "
                                       "train the model or call calibrate_batchnorm first")
    cy, cx = out_shape[2] // 2, out_shape[3] // 2
    rng = np.random.default_rng(seed)
    acc = np.zeros(shape[1:], dtype=np.float64)
    with _frozen(model):
        done = 0
        while done < runs:
            b = min(chunk, runs - done)
            x = Tensor(rng.random((b,) + tuple(shape), dtype=np.float64).astype(np.float32), requires_grad=True)
            act = model.run(x, [layer])[layer]
            mask = np.zeros(act.shape, dtype=act.dtype)
            mask[:, channel, cy, cx] = 1.0
            backward((act * Tensor(mask)).sum())
            g = np.abs(x.grad.astype(np.float64)).sum(axis=1)
            for i in range(b):  # fixed accumulation order
                acc += g[i]
            done += b
    return ErfMap(layer, channel, acc / runs, runs, seed)


def calibrate_batchnorm(model: Model, batches: int = 10, batch_size: int = 32, seed: int = 0) -> None:
    """Estimate running statistics from uniform random inputs (training-mode passes, no updates)."""
    spec = model.spec
    rng = np.random.default_rng(seed)
    model.train()
    saved = [(bn.momentum,) for bn in model.batchnorms()]
    for bn in model.batchnorms():
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 0.0
    with _frozen(model):
        for k in range(batches):
            for bn in model.batchnorms():
                bn.momentum = 1.0 / (k + 1)  # cumulative average
            x = rng.random((batch_size, spec.input_channels, spec.input_size, spec.input_size)).astype(np.float32)
            model(Tensor(x))
    for bn, (m,) in zip(model.batchnorms(), saved):
        bn.momentum = m
    model.eval()


# ---------------------------------------------------------------------------
# theoretical receptive field
# ---------------------------------------------------------------------------


@dataclass
class RFInfo:
    rf: float
    jump: float
    start: float


def theoretical_rf(model: Model) -> Dict[str, RFInfo]:
    """Per-node RF size, jump and first-unit centre via the standard recurrence.

    Merges take the larger RF of their inputs; bilinear upsampling is a
    two-tap kernel that halves the jump.
    """
    info: Dict[str, RFInfo] = {}
    for name, node in model.nodes.items():
        op = node.op
        if op == "input":
            info[name] = RFInfo(1.0, 1.0, 0.0)
            continue
        src = info[node.inputs[0]]
        if op == "conv":
            k, s, p = node.params.kernel_size, node.params.stride, node.params.padding
            info[name] = RFInfo(src.rf + (k - 1) * src.jump, src.jump * s, src.start + ((k - 1) / 2 - p) * src.jump)
        elif op == "maxpool":
            info[name] = RFInfo(src.rf + src.jump, src.jump * 2, src.start + 0.5 * src.jump)
        elif op == "upsample":
            info[name] = RFInfo(src.rf + src.jump, src.jump / 2, src.start - 0.25 * src.jump)
        elif op in ("add", "concat"):
            other = info[node.inputs[1]]
            info[name] = RFInfo(max(src.rf, other.rf), src.jump, src.start)
        elif op in ("gap", "flatten", "linear"):
            info[name] = RFInfo(float("inf"), src.jump, src.start)
        else:
            info[name] = src
    return info


def _taps(op: str, node, n_in: int, n_out: int) -> List[List[int]]:
    if op == "conv":
        k, s, p = node.params.kernel_size, node.params.stride, node.params.padding
        return [[j * s - p + t for t in range(k) if 0 <= j * s - p + t < n_in] for j in range(n_out)]
    if op == "maxpool":
        return [[2 * j, 2 * j + 1] for j in range(n_out)]
    if op == "upsample":
        taps = []
        for i in range(n_out):
            u = min(max((i + 0.5) / 2 - 0.5, 0.0), n_in - 1.0)
            i0 = int(np.floor(u))
            taps.append([i0] if u == i0 else [i0, min(i0 + 1, n_in - 1)])
        return taps
    return [[j] for j in range(n_out)]


def rf_footprint(model: Model, layer: str, pixel: Optional[Tuple[int, int]] = None,
                 input_shape: Optional[Tuple[int, int, int]] = None) -> Tuple[slice, slice]:
    """Box of input pixels that can influence ``pixel`` of ``layer`` (default: its centre).

    Computed from the index mapping of every op, independently of autodiff.
    """
    shape = input_shape or _input_shape(model)
    shapes = shape_walk(model, (1,) + tuple(shape))
    lo: Dict[str, List[np.ndarray]] = {}
    hi: Dict[str, List[np.ndarray]] = {}
    for name, node in model.nodes.items():
        if node.op == "input":
            lo[name] = [np.arange(shape[1]), np.arange(shape[2])]
            hi[name] = [np.arange(shape[1]), np.arange(shape[2])]
        elif node.op in ("add", "concat"):
            a, b = node.inputs
            lo[name] = [np.minimum(lo[a][d], lo[b][d]) for d in range(2)]
            hi[name] = [np.maximum(hi[a][d], hi[b][d]) for d in range(2)]
        elif node.op in ("gap", "flatten", "linear"):
            continue
        else:
            src = node.inputs[0]
            lo[name], hi[name] = [], []
            for d in range(2):
                n_in = shapes[src][2 + d]
                n_out = shapes[name][2 + d]
                taps = _taps(node.op, node, n_in, n_out)
                lo[name].append(np.array([min(lo[src][d][t] for t in tap) for tap in taps]))
                hi[name].append(np.array([max(hi[src][d][t] for t in tap) for tap in taps]))
        if name == layer:
            break
    if layer not in lo:
        raise KeyError(f"layer {layer!r} has no spatial footprint")
    out = shapes[layer]
    cy, cx = pixel if pixel is not None else (out[2] // 2, out[3] // 2)
    return (slice(int(lo[layer][0][cy]), int(hi[layer][0][cy]) + 1),
            slice(int(lo[layer][1][cx]), int(hi[layer][1][cx]) + 1))


def support_within_footprint(erf: ErfMap, footprint: Tuple[slice, slice]) -> bool:
    inside = np.zeros(erf.values.shape, dtype=bool)
    inside[footprint] = True
    return not np.any((erf.values > 0) & ~inside)


# ---------------------------------------------------------------------------
# rendering and persistence
# ---------------------------------------------------------------------------


def render_erf(erf: ErfMap, stem) -> Dict[str, Path]:
    """Write ``<stem>.png`` (8-bit, max-normalized), ``<stem>.f64`` (raw '<f8') and ``<stem>.txt``."""
    peak = erf.values.max()
    if peak <= 0:
        raise ValueError("cannot render an all-zero ERF map")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    png = stem.with_name(stem.name + ".png")
    raw = stem.with_name(stem.name + ".f64")
    meta = stem.with_name(stem.name + ".txt")
    Image.fromarray(np.round(255.0 * erf.values / peak).astype(np.uint8), mode="L").save(png)
    raw.write_bytes(np.ascontiguousarray(erf.values, dtype="<f8").tobytes())
    h, w = erf.values.shape
    meta.write_text(f"layer {erf.layer}\nchannel {erf.channel}\nruns {erf.runs}\nseed {erf.seed}\n"
                    f"height {h}\nwidth {w}\ndtype <f8\n")
    return {"png": png, "raw": raw, "meta": meta}


def read_erf(stem) -> ErfMap:
    stem = Path(stem)
    meta = dict(line.split(" ", 1) for line in stem.with_name(stem.name + ".txt").read_text().splitlines() if line)
    h, w = int(meta["height"]), int(meta["width"])
    values = np.frombuffer(stem.with_name(stem.name + ".f64").read_bytes(), dtype="<f8").reshape(h, w).copy()
    return ErfMap(meta["layer"], int(meta["channel"]), values, int(meta["runs"]), int(meta["seed"]))
