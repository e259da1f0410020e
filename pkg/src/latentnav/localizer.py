"""Image-based localization: rotation-bank cross-correlation of a query latent
grid against a map, producing a cell heatmap and an orientation-bin prediction.

The identity mode is fully analytic (masked softmax over overlap-normalized
correlation scores) and doubles as the correctness oracle; trained mode wraps
the same correlation in small residual networks initialized to the identity so
it starts exactly at the analytic behaviour.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, lift, no_grad, param
from .geometry import GridSpec, Pose, grid_to_world
from .latent_map import Encoder, LatentGrid, crop_center, register
from .rng import substream
from .simworld import RgbdFrame

N_BINS = 18
BIN_DEG = 360.0 / N_BINS
QUERY_SIZE = 32


class DimMismatch(ValueError):
    pass


@dataclass
class Heatmap:
    energy: np.ndarray  # [U, V], sums to 1 over valid cells, 0 elsewhere
    valid: np.ndarray   # bool [U, V]

    @property
    def argmax_cell(self):
        k = int(np.argmax(self.energy))
        return (k // self.energy.shape[1], k % self.energy.shape[1])


@dataclass
class OrientationPrediction:
    logits: np.ndarray  # [N_BINS]
    bin: int

    @property
    def angle(self) -> float:
        return math.radians(self.bin * BIN_DEG)


def nearest_bin(angle: float) -> int:
    """Nearest 20-degree bin of an angle; round-half-even on exact ties."""
    return int(np.rint(math.degrees(angle) % 360.0 / BIN_DEG)) % N_BINS


def _bin_interp_matrix(R: int) -> np.ndarray:
    """[N_BINS, R] circular linear interpolation from R rotation angles to the
    18 bin centers; identity-like when rotations align with bins."""
    A = np.zeros((N_BINS, R))
    for b in range(N_BINS):
        pos = (b * BIN_DEG) / (360.0 / R)  # bin center in rotation units
        lo = int(math.floor(pos)) % R
        frac = pos - math.floor(pos)
        A[b, lo] += 1.0 - frac
        A[b, (lo + 1) % R] += frac
    return A


# -- query embedding and the rotation bank ------------------------------------------


def embed_query(frame: RgbdFrame, enc: Encoder,
                spec: GridSpec = None, ceiling: float = 2.0) -> LatentGrid:
    """Register the frame at the origin pose and keep the 32x32 center crop."""
    spec = spec if spec is not None else GridSpec()
    local, _ = register(frame, Pose(0.0, 0.0, 0.0), enc, spec, ceiling)
    return crop_center(local, QUERY_SIZE)


def rotation_bank(query: LatentGrid, R: int):
    """R copies of the query rotated by multiples of 360/R degrees about the
    grid center, nearest-neighbor resampled; counts travel with the codes.

    The center sits on the cell corner between the two middle cells, so
    rotations by multiples of 90 degrees are exact permutations.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    size = query.m.shape[0]
    c = (size - 1) / 2.0
    uu, vv = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = []
    for r in range(R):
        th = 2.0 * math.pi * r / R
        cos, sin = math.cos(th), math.sin(th)
        su = cos * (uu - c) + sin * (vv - c) + c
        sv = -sin * (uu - c) + cos * (vv - c) + c
        si = np.rint(su).astype(np.int64)
        sj = np.rint(sv).astype(np.int64)
        ok = (si >= 0) & (si < size) & (sj >= 0) & (sj < size)
        m = np.zeros_like(query.m)
        n = np.zeros_like(query.n)
        m[uu[ok], vv[ok]] = query.m[si[ok], sj[ok]]
        n[uu[ok], vv[ok]] = query.n[si[ok], sj[ok]]
        out.append(LatentGrid(m=m, n=n, spec=query.spec))
    return out


# -- correlation (tape-compatible) ---------------------------------------------------


def _corr_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Channel-summed full cross-correlation via FFT, [A+h-1, B+w-1]."""
    return fftconvolve(a, b[::-1, ::-1], mode="full", axes=(0, 1)).sum(axis=2)


def corr2d(m, q) -> Tensor:
    """score[u, v] = sum_{i,j,c} m[u - au + i, v - av + j, c] * q[i, j, c]
    with the query anchored at (au, av) = (h//2, w//2). Differentiable in both.
    """
    m, q = as_tensor(m), as_tensor(q)
    if m.data.ndim != 3 or q.data.ndim != 3 or m.shape[2] != q.shape[2]:
        raise DimMismatch(f"corr2d: map {m.shape}, query {q.shape}")
    U, V, D = m.shape
    h, w, _ = q.shape
    au, av = h // 2, w // 2
    full = _corr_full(m.data, q.data)
    out = full[h - 1 - au: h - 1 - au + U, w - 1 - av: w - 1 - av + V]

    def vjp_m(g):
        cols = [fftconvolve(g, q.data[:, :, c], mode="full") for c in range(D)]
        return np.stack(cols, axis=2)[au: au + U, av: av + V]

    def vjp_q(g):
        cols = [fftconvolve(m.data[:, :, c], g[::-1, ::-1], mode="full")
                for c in range(D)]
        return np.stack(cols, axis=2)[U - 1 - au: U - 1 - au + h,
                                      V - 1 - av: V - 1 - av + w]

    return lift(np.ascontiguousarray(out), [(m, vjp_m), (q, vjp_q)])


def naive_scores(map_grid: LatentGrid, query: LatentGrid):
    """Brute-force sliding-window correlation oracle -> (raw, overlap).

    Dumb quadruple loop semantics, vectorized only over channels; this is the
    reference the FFT path must reproduce.
    """
    U, V, D = map_grid.m.shape
    h, w, _ = query.m.shape
    au, av = h // 2, w // 2
    raw = np.zeros((U, V))
    overlap = np.zeros((U, V), dtype=np.int64)
    msup = map_grid.support()
    qsup = query.support()
    for u in range(U):
        for v in range(V):
            for i in range(h):
                a = u - au + i
                if a < 0 or a >= U:
                    continue
                for j in range(w):
                    b = v - av + j
                    if b < 0 or b >= V:
                        continue
                    raw[u, v] += float(map_grid.m[a, b] @ query.m[i, j])
                    overlap[u, v] += bool(msup[a, b]) and bool(qsup[i, j])
    return raw, overlap


def score_bank(map_grid: LatentGrid, bank, fk_m: np.ndarray = None,
               fq_fn=None):
    """(scores [R, U, V], valid_per_rot bool [R, U, V]) with overlap-count
    normalization; positions with zero support overlap carry -inf."""
    U, V, _ = map_grid.m.shape
    msup = map_grid.support().astype(np.float64)[..., None]
    m_arr = fk_m if fk_m is not None else map_grid.m
    scores = np.empty((len(bank), U, V))
    valid = np.empty((len(bank), U, V), dtype=bool)
    with no_grad():
        for r, q in enumerate(bank):
            qsup = q.support().astype(np.float64)[..., None]
            overlap = np.rint(corr2d(Tensor(msup), Tensor(qsup)).data)
            q_arr = fq_fn(q.m) if fq_fn is not None else q.m
            raw = corr2d(Tensor(m_arr), Tensor(q_arr)).data
            ok = overlap > 0
            scores[r] = np.where(ok, raw / np.maximum(overlap, 1.0), -np.inf)
            valid[r] = ok
    return scores, valid


def masked_softmax(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax over valid entries; exact zeros elsewhere; sums to 1."""
    out = np.zeros_like(values, dtype=np.float64)
    if not valid.any():
        return out
    sel = values[valid]
    z = np.exp(sel - sel.max())
    out[valid] = z / z.sum()
    return out


# -- parameters ----------------------------------------------------------------------


class LocParams:
    """Localization nets: per-cell residual channel mixers F_k / F_q, a heatmap
    gain, and an orientation head over pooled per-rotation scores. All residual
    output weights start at zero, so a fresh LocParams behaves exactly like
    identity mode."""

    HID = 16

    def __init__(self, dim: int, R: int = 8, identity: bool = True,
                 rng: np.random.Generator = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.R, self.identity = dim, R, identity
        hid = self.HID
        he = math.sqrt(2.0 / dim)
        self.fk_w1 = param(rng.normal(0, he, (dim, hid)))
        self.fk_w2 = param(np.zeros((hid, dim)))
        self.fq_w1 = param(rng.normal(0, he, (dim, hid)))
        self.fq_w2 = param(np.zeros((hid, dim)))
        self.e1_gain = param(np.array(1.0))
        self.e2_w1 = param(rng.normal(0, math.sqrt(2.0 / R), (R, hid)))
        self.e2_w2 = param(np.zeros((hid, N_BINS)))

    def parameters(self):
        return [self.fk_w1, self.fk_w2, self.fq_w1, self.fq_w2,
                self.e1_gain, self.e2_w1, self.e2_w2]

    def to_arrays(self) -> dict:
        out = {"loc.meta": np.array([self.dim, self.R, float(self.identity)])}
        for name in ("fk_w1", "fk_w2", "fq_w1", "fq_w2", "e1_gain", "e2_w1", "e2_w2"):
            out[f"loc.{name}"] = getattr(self, name).data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "LocParams":
        dim, R, ident = arrays["loc.meta"]
        p = cls(dim=int(dim), R=int(R), identity=bool(ident))
        for name in ("fk_w1", "fk_w2", "fq_w1", "fq_w2", "e1_gain", "e2_w1", "e2_w2"):
            getattr(p, name).data = np.array(arrays[f"loc.{name}"])
        return p

    def _residual(self, arr: np.ndarray, w1: Tensor, w2: Tensor, tape: bool):
        flat = arr.reshape(-1, self.dim)
        if tape:
            x = Tensor(flat)
            out = ad.add(x, ad.matmul(ad.relu(ad.matmul(x, w1)), w2))
            return out  # [cells, D] Tensor
        with no_grad():
            h = np.maximum(flat @ w1.data, 0.0)
            return flat + h @ w2.data

    def apply_fk(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(self._residual(m, self.fk_w1, self.fk_w2, False)).reshape(m.shape)

    def apply_fq(self, m: np.ndarray) -> np.ndarray:
        return np.asarray(self._residual(m, self.fq_w1, self.fq_w2, False)).reshape(m.shape)


# -- localization --------------------------------------------------------------------


def localize(map_grid: LatentGrid, query: LatentGrid, params: LocParams = None,
             R: int = None):
    """(Heatmap, OrientationPrediction). Identity mode is the analytic path;
    trained mode routes map and query through the residual mixers first."""
    if map_grid.dim != query.dim:
        raise DimMismatch(f"map D={map_grid.dim} vs query D={query.dim}")
    identity = params is None or params.identity
    R = R if R is not None else (params.R if params is not None else 8)
    bank = rotation_bank(query, R)
    if identity:
        scores, valid_r = score_bank(map_grid, bank)
    else:
        if params.dim != map_grid.dim:
            raise DimMismatch(f"params D={params.dim} vs map D={map_grid.dim}")
        scores, valid_r = score_bank(map_grid, bank, fk_m=params.apply_fk(map_grid.m),
                                     fq_fn=params.apply_fq)

    valid = map_grid.support() & valid_r.any(axis=0)
    best = scores.max(axis=0)
    best = np.where(valid, best, -np.inf)
    gain = 1.0 if identity else float(params.e1_gain.data)
    energy = masked_softmax(gain * best, valid)
    heat = Heatmap(energy=energy, valid=valid)

    pooled = np.array([s[np.isfinite(s)].max() if np.isfinite(s).any() else 0.0
                       for s in scores])
    logits = _bin_interp_matrix(R) @ pooled
    if identity:
        u, v = heat.argmax_cell
        r_star = int(np.argmax(scores[:, u, v]))
        pred_bin = nearest_bin(2.0 * math.pi * r_star / R)
    else:
        hidden = np.maximum(pooled @ params.e2_w1.data, 0.0)
        logits = logits + hidden @ params.e2_w2.data
        pred_bin = int(np.argmax(logits))
    return heat, OrientationPrediction(logits=logits, bin=pred_bin)


# -- training ------------------------------------------------------------------------


@dataclass
class LocSample:
    map_grid: LatentGrid
    query: LatentGrid
    gt_cell: tuple
    gt_bin: int


def gaussian_target(shape, gt_cell, valid: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    """Ground-truth heatmap: Gaussian around gt_cell over valid cells, sum 1."""
    uu, vv = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    d2 = (uu - gt_cell[0]) ** 2 + (vv - gt_cell[1]) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma)) * valid
    total = g.sum()
    if total == 0:
        raise ValueError("ground-truth cell has no valid support")
    return g / total


def kl_divergence(target: np.ndarray, log_pred) -> float:
    """D_KL(target || pred) given log-probabilities of the prediction."""
    sel = target > 0
    lp = log_pred.data if isinstance(log_pred, Tensor) else np.asarray(log_pred)
    return float(np.sum(target[sel] * (np.log(target[sel]) - lp[sel])))


def _log_softmax_vec(x: Tensor) -> Tensor:
    m0 = float(np.max(x.data))
    z = ad.sub(x, Tensor(m0))
    lse = ad.add(ad.log(ad.reduce_sum(ad.exp(z))), Tensor(m0))
    return ad.sub(x, lse)


def _smoothmax(x: Tensor, tau: float) -> Tensor:
    m0 = float(np.max(x.data))
    z = ad.mul(ad.sub(x, Tensor(m0)), Tensor(1.0 / tau))
    return ad.add(ad.mul(ad.log(ad.reduce_sum(ad.exp(z))), Tensor(tau)), Tensor(m0))


SMOOTHMAX_TAU = 0.02


def loc_loss(sample: LocSample, params: LocParams, sigma: float = 1.5):
    """KL(E_gt || E_hat) + CE(gt bin) on the tape -> (loss, kl float, ce float)."""
    map_grid, query = sample.map_grid, sample.query
    U, V, D = map_grid.m.shape
    bank = rotation_bank(query, params.R)
    fk = params._residual(map_grid.m, params.fk_w1, params.fk_w2, True)
    fk = ad.reshape(fk, (U, V, D))
    msup = map_grid.support().astype(np.float64)[..., None]

    score_maps = []
    valid_any = np.zeros((U, V), dtype=bool)
    for q in bank:
        qsup = q.support().astype(np.float64)[..., None]
        with no_grad():
            overlap = np.rint(corr2d(Tensor(msup), Tensor(qsup)).data)
        fq = params._residual(q.m, params.fq_w1, params.fq_w2, True)
        fq = ad.reshape(fq, (QUERY_SIZE, QUERY_SIZE, D))
        raw = corr2d(fk, fq)
        inv = np.where(overlap > 0, 1.0 / np.maximum(overlap, 1.0), 0.0)
        # -30 stands in for -inf: underflows to 0 in the smoothmax without NaNs
        bias = np.where(overlap > 0, 0.0, -30.0)
        score_maps.append(ad.add(ad.mul(raw, Tensor(inv)), Tensor(bias)))
        valid_any |= overlap > 0
    valid = map_grid.support() & valid_any

    # smooth best-rotation map over the valid cells only
    flat_idx = np.nonzero(valid.ravel())[0]
    per_rot = [ad.gather_rows(ad.reshape(s, (U * V, 1)), flat_idx)
               for s in score_maps]
    stacked = ad.concat(per_rot, axis=1)  # [Nv, R]
    m0 = float(stacked.data.max())
    zs = ad.mul(ad.sub(stacked, Tensor(m0)), Tensor(1.0 / SMOOTHMAX_TAU))
    best = ad.add(ad.mul(ad.log(ad.reduce_sum(ad.exp(zs), axis=1, keepdims=True)),
                         Tensor(SMOOTHMAX_TAU)), Tensor(m0))  # [Nv, 1]
    cell_logits = ad.reshape(ad.mul(best, params.e1_gain), (len(flat_idx),))
    log_e = _log_softmax_vec(cell_logits)

    target = gaussian_target((U, V), sample.gt_cell, valid, sigma)
    tsel = target.ravel()[flat_idx]
    kl_t = ad.sub(Tensor(float(np.sum(tsel[tsel > 0] * np.log(tsel[tsel > 0])))),
                  ad.reduce_sum(ad.mul(Tensor(tsel), log_e)))

    pooled = ad.concat([ad.reshape(_smoothmax(ad.reshape(s, (len(flat_idx),)),
                                              SMOOTHMAX_TAU), (1,))
                        for s in per_rot], axis=0)  # [R]
    base = ad.reshape(ad.matmul(Tensor(_bin_interp_matrix(params.R)),
                                ad.reshape(pooled, (params.R, 1))), (N_BINS,))
    hid = ad.relu(ad.matmul(ad.reshape(pooled, (1, params.R)), params.e2_w1))
    resid = ad.reshape(ad.matmul(hid, params.e2_w2), (N_BINS,))
    logits = ad.add(base, resid)
    log_p = _log_softmax_vec(logits)
    ce_t = ad.neg(ad.reduce_sum(ad.mul(Tensor(_onehot(sample.gt_bin)), log_p)))

    loss = ad.add(kl_t, ce_t)
    return loss, float(kl_t.data), float(ce_t.data)


def _onehot(b: int) -> np.ndarray:
    v = np.zeros(N_BINS)
    v[b] = 1.0
    return v


def train_localizer(dataset, params: LocParams, steps: int, lr: float = 1e-3,
                    seed: int = 0, sigma: float = 1.5, callback=None):
    """SGD over dataset samples; mutates params (identity flag cleared);
    returns the per-step loss curve."""
    rng = substream(seed, "train-loc")
    opt = ad.Adam(params.parameters(), lr=lr)
    params.identity = False
    losses = []
    for k in range(steps):
        sample = dataset[int(rng.integers(0, len(dataset)))]
        loss, _, _ = loc_loss(sample, params, sigma)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(float(loss.data))
        if callback is not None:
            callback(k, losses[-1])
    return losses


# -- evaluation ----------------------------------------------------------------------


@dataclass
class LocEvalRow:
    query_id: int
    true_xy: tuple
    pred_xy: tuple
    error_m: float
    true_bin: int
    pred_bin: int
    ms: float


def eval_localization(map_grid: LatentGrid, queries, params: LocParams = None,
                      R: int = None):
    """queries: list of (query LatentGrid, true rel Pose). Returns (metrics
    dict, rows). Recall levels measure the argmax-cell center error."""
    rows = []
    for qid, (query, pose) in enumerate(queries):
        t0 = time.perf_counter()
        heat, orient = localize(map_grid, query, params, R)
        ms = (time.perf_counter() - t0) * 1000.0
        u, v = heat.argmax_cell
        px, py = grid_to_world(map_grid.spec, u, v)
        err = math.hypot(px - pose.x, py - pose.y)
        rows.append(LocEvalRow(qid, (pose.x, pose.y), (px, py), err,
                               nearest_bin(pose.yaw), orient.bin, ms))
    errs = np.array([r.error_m for r in rows])
    metrics = {
        "recall_25cm": float(np.mean(errs <= 0.25)),
        "recall_50cm": float(np.mean(errs <= 0.50)),
        "recall_1m": float(np.mean(errs <= 1.00)),
        "orientation_acc": float(np.mean([r.true_bin == r.pred_bin for r in rows])),
        "mean_ms": float(np.mean([r.ms for r in rows])),
    }
    return metrics, rows
