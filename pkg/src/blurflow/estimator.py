"""Recover per-pixel motion maps from a sharp/blurred frame pair.

The non-blind path scores candidate motions directly against the
observation: each tile synthesizes windowed blur predictions from the
sharp reference and keeps the parameters whose prediction explains the
tile best under inverse-variance weighting.  Tiles are then grouped into
motion-consistent regions, each region is refit on its own support, and
region boundaries are resolved against a composite forward model that
blurs every region with its own kernel before summing.  A row-stratified
variant handles continuous profiles (one shared start depth, velocities
varying with row).  A blind path matches tile log power spectra against
candidate transfer functions and is documented as a heuristic.

Also here: the oracle kernel operations (Wiener deconvolution of a
locally-constant-blur patch and grid fitting of motion parameters to an
observed kernel) and the squared-Pearson scoring protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.fft import fft2, fftshift, ifft2, irfft2, next_fast_len, rfft2
from scipy.ndimage import binary_dilation, binary_erosion, distance_transform_edt
from scipy.ndimage import label as cc_label
from scipy.ndimage import uniform_filter
from scipy.signal import fftconvolve

from .dataset import TargetMaps
from .imaging import validity_map
from .optics import Kernel2D, MotionParams, OpticsConfig, motion_psf, motion_psf_batch

__all__ = [
    "EstimationReport",
    "estimate_field_blind",
    "estimate_field_nonblind",
    "evaluate_r2",
    "fit_kernel_nonblind",
    "fit_params_to_kernel",
]

# Coarse search lattice shared by every fitting path.
_V_LAT = np.linspace(-1.0, 1.0, 9)
_V_AX = np.linspace(0.0, 1.0, 5)
_COARSE = [(float(a), float(b), float(c), float(d))
           for a in _V_LAT for b in _V_LAT for c in _V_AX for d in _V_AX]
_LATS = [(float(a), float(b)) for a in _V_LAT for b in _V_LAT]
_AXIALS = [(float(c), float(d)) for c in _V_AX for d in _V_AX]
_AX81 = [(float(c), float(d))
         for c in np.linspace(0.0, 1.0, 9) for d in np.linspace(0.0, 1.0, 9)]

# Fraction of weighted residual mass ignored by the final region polish;
# absorbs mislabeled boundary pixels whose residuals would steer the walk.
_TRIM_Q = 0.02

_EST_KERNEL_PX = 25   # windowed tile scoring uses a trimmed kernel support


def _tie_key(p):
    if len(p) == 2:
        return (p[0] * p[0], p[1], p)
    return (p[0] * p[0] + p[1] * p[1] + p[2] * p[2], p[3], p)


def _pick(plist, scores, eps=1e-9):
    """Lowest score wins; near-ties resolved toward smaller speed then depth."""
    smin = float(np.min(scores))
    tol = eps * max(1.0, abs(smin))
    cands = [p for p, s in zip(plist, scores) if s <= smin + tol]
    return min(cands, key=_tie_key), smin


def _cl(x, lo, hi):
    return float(min(max(x, lo), hi))


class _Sensor:
    """Inverse of the known acquisition chain, for scoring in photon units.

    With a stated photon scale the observation is unwrapped through the
    quantum-efficiency gain and the folded-Gaussian background mean, and
    weights follow the shot + read variance mix.  Without one (noise-free
    input) the observation is taken as-is under uniform weights.
    """

    def __init__(self, optics: OpticsConfig, photon_scale: float | None):
        self.photon = float(photon_scale) if photon_scale else None
        beta = optics.quantum_efficiency_beta
        sigma = optics.gaussian_sigma
        if self.photon is not None:
            self.offset = sigma * np.sqrt(2.0 / np.pi)
            self.gain = beta
            self.gvar = self.photon * sigma**2 * (1.0 - 2.0 / np.pi) / beta**2
        else:
            self.offset, self.gain, self.gvar = 0.0, 1.0, None

    def correct(self, img: np.ndarray) -> np.ndarray:
        return (img - self.offset) / self.gain

    def weights(self, corrected: np.ndarray) -> np.ndarray:
        if self.gvar is None:
            return np.ones_like(corrected)
        w = 1.0 / (np.maximum(corrected, 0.0) + self.gvar)
        return w / w.mean()


class _ScoreEngine:
    """Windowed-scoring state for one (optics, tile size) geometry.

    Holds the padded FFT layout, the coarse candidate bank, and a cache of
    kernel spectra keyed on (params, time steps).  Kernel synthesis
    dominates the fitting budget, so the cache is the load-bearing part.
    """

    def __init__(self, optics: OpticsConfig, patch: int):
        self.optics = optics
        self.patch = patch
        self.k = optics.kernel_size_px
        self.half = self.k // 2
        self.ctx = patch + 2 * self.half
        self.fft_len = next_fast_len(self.ctx + self.k - 1)
        self.win = slice(2 * self.half, 2 * self.half + patch)
        self.t_fine = optics.time_steps
        self.t_coarse = max(2, optics.time_steps // 4)
        self._spectra: dict = {}
        self._bank_keys: set | None = None
        self.fill(_COARSE, self.t_coarse)
        self._bank_keys = set(self._spectra)

    def kernel_weights(self, plist, t_steps):
        ks = motion_psf_batch(self.optics, [MotionParams(*p) for p in plist],
                              time_steps=t_steps)
        return [k.weights for k in ks]

    def fill(self, plist, t_steps):
        missing = [p for p in dict.fromkeys(plist) if (p, t_steps) not in self._spectra]
        if missing:
            ws = self.kernel_weights(missing, t_steps)
            n = self.fft_len
            specs = rfft2(np.stack(ws).astype(np.float32), s=(n, n), axes=(-2, -1))
            for p, sp in zip(missing, specs):
                self._spectra[(p, t_steps)] = sp

    def spectra(self, plist, t_steps):
        self.fill(plist, t_steps)
        return np.stack([self._spectra[(p, t_steps)] for p in plist])

    def trim(self):
        if self._bank_keys is not None and len(self._spectra) > 6000:
            for key in list(self._spectra):
                if key not in self._bank_keys:
                    del self._spectra[key]


_ENGINES: dict = {}


def _engine(optics: OpticsConfig, patch: int) -> _ScoreEngine:
    key = (optics.to_json(), patch)
    if key not in _ENGINES:
        while len(_ENGINES) >= 2:   # two geometries cover both layouts
            _ENGINES.pop(next(iter(_ENGINES)))
        _ENGINES[key] = _ScoreEngine(optics, patch)
    return _ENGINES[key]


class _Tile:
    """One scoring window: cached sharp-context spectrum plus observation."""

    def __init__(self, engine, sensor, sharp, blurred, oy, ox):
        self.eng = engine
        self.oy, self.ox = oy, ox
        h_img, w_img = sharp.shape
        half, ctx, patch = engine.half, engine.ctx, engine.patch
        pad = np.zeros((ctx, ctx), dtype=np.float32)
        y0, x0 = oy - half, ox - half
        ys = slice(max(0, y0), min(h_img, y0 + ctx))
        xs = slice(max(0, x0), min(w_img, x0 + ctx))
        pad[ys.start - y0:ys.stop - y0, xs.start - x0:xs.stop - x0] = sharp[ys, xs]
        n = engine.fft_len
        self.spec = rfft2(pad, s=(n, n))
        raw = blurred[oy:oy + patch, ox:ox + patch].astype(np.float32)
        self.b = sensor.correct(raw)
        self.vw = sensor.weights(self.b).astype(np.float32)
        self.w = None                      # optional extra per-pixel weights

    def exact(self, plist, t_steps, chunk=256):
        """Weighted SSE of the windowed synthesis for each candidate."""
        eng = self.eng
        ks = eng.spectra(plist, t_steps)
        n, win = eng.fft_len, eng.win
        out = np.empty(len(plist), dtype=np.float64)
        for i in range(0, len(plist), chunk):
            conv = irfft2(self.spec[None] * ks[i:i + chunk], s=(n, n),
                          axes=(-2, -1))[:, win, win]
            d = conv - self.b[None]
            wt = self.vw if self.w is None else self.vw * self.w
            out[i:i + chunk] = np.einsum("kij,ij,kij->k", d, wt, d, dtype=np.float64)
        return out


def _fit_tile_profiled(tile):
    """Best lateral per axial cell plus the axial score profile for one tile."""
    eng = tile.eng
    sc = tile.exact(_COARSE, eng.t_coarse).reshape(81, 25)
    lat_of, score_of = {}, {}
    for a_i, a in enumerate(_AXIALS):
        j = int(np.argmin(sc[:, a_i]))
        lat_of[a] = _LATS[j]
        score_of[a] = sc[j, a_i]
    # halving passes only touch competitive axial cells, the rest keep the
    # lattice lateral; fresh kernel synthesis dominates the tile budget
    top = sorted(_AXIALS, key=lambda a: score_of[a])[:6]
    step = 0.25
    for _ in range(2):
        step /= 2
        batch, spans = [], []
        for a in top:
            l0 = lat_of[a]
            loc = [(_cl(l0[0] + da * step, -1, 1), _cl(l0[1] + db * step, -1, 1),
                    a[0], a[1])
                   for da in (-1, 0, 1) for db in (-1, 0, 1)]
            loc = list(dict.fromkeys(loc))
            spans.append((a, len(batch), len(loc)))
            batch += loc
        sc2 = tile.exact(batch, eng.t_coarse)
        for a, off, ln in spans:
            bp, bs = _pick(batch[off:off + ln], sc2[off:off + ln])
            lat_of[a] = bp[:2]
            score_of[a] = bs
    curve = np.array([score_of[a] for a in _AXIALS])
    a_star, _ = _pick(_AXIALS, curve)
    return lat_of, curve, a_star


def _refine_lat_tile(tile, lat, axial, steps, t_steps):
    for step in steps:
        loc = [(_cl(lat[0] + da * step, -1, 1), _cl(lat[1] + db * step, -1, 1),
                axial[0], axial[1])
               for da in (-1, 0, 1) for db in (-1, 0, 1)]
        loc = list(dict.fromkeys(loc))
        sc = tile.exact(loc, t_steps)
        bp, _ = _pick(loc, sc)
        lat = bp[:2]
    return lat


def _axial_posterior(members, tiles, latm, n_eff, tau=1.0, near=None):
    """Posterior-mean (v3, z0) over a dense axial lattice at the median lateral.

    The (v3, z0) likelihood has a flat diagonal ridge; the argmin jumps
    between ridge ends under noise while the posterior mean stays put.
    """
    eng = tiles[members[0]].eng
    # snap the shared lateral to the search lattice so repeated calls at
    # nearly identical medians reuse cached kernel spectra
    l1 = float(np.round(np.median([latm[i][0] for i in members]) * 32) / 32)
    l2 = float(np.round(np.median([latm[i][1] for i in members]) * 32) / 32)
    cells = _AX81
    if near is not None:
        # follow-up passes only need the constant-mean-depth trough the
        # previous mode sits on; basins off it were already rejected
        cells = [(c, d) for c, d in _AX81
                 if abs((d - near[1]) + 0.5 * (c - near[0])) <= 0.1875]
    plist = [(l1, l2, c, d) for c, d in cells]
    tot = np.zeros(len(plist))
    for i in members:
        tot += tiles[i].exact(plist, eng.t_fine)
    res_min = float(tot.min())
    expo = -(tot - res_min) * n_eff / (2.0 * res_min * tau)
    w = np.exp(expo - expo.max())
    w /= w.sum()
    v3m = float(np.dot(w, [a[0] for a in cells]))
    z0m = float(np.dot(w, [a[1] for a in cells]))
    mode, _ = _pick(cells, tot)
    return (v3m, z0m), mode, tot


def _refit_cluster(members, tiles, n_eff, prefits=None):
    """Pooled profiled fit over member tiles (honors tile weights).

    Each member is always scored at its own lateral: sharing one lateral
    across tiles is what lets axial errors slip through the coupling.
    """
    eng = tiles[members[0]].eng
    patch = eng.patch
    lat_ofs, curves, deferred = {}, [], []
    for i in members:
        if prefits is not None and i in prefits:
            lat_ofs[i], curve = prefits[i]
            curves.append(curve)
        else:
            deferred.append(i)
    if not curves:
        j = max(deferred, key=lambda i: patch * patch if tiles[i].w is None
                else float(tiles[i].w.sum()))
        lat_ofs[j], curve, _ = _fit_tile_profiled(tiles[j])
        curves.append(curve)
        deferred.remove(j)
    pooled = np.sum(curves, axis=0)
    ax, _ = _pick(_AXIALS, pooled)
    latm = {}
    for i in members:
        if i in lat_ofs:
            latm[i] = lat_ofs[i][ax]
    # masked tiles skip the full grid: a lateral sweep at the pooled axial
    # reuses the precomputed bank and the refine rounds do the rest
    for i in deferred:
        plist = [(l1, l2, ax[0], ax[1]) for (l1, l2) in _LATS]
        sc = tiles[i].exact(plist, eng.t_coarse)
        latm[i] = _LATS[int(np.argmin(sc))]
    for rnd in range(2):
        for i in members:
            latm[i] = _refine_lat_tile(tiles[i], latm[i], ax, (0.0625, 0.03125),
                                       eng.t_fine)
        _, ax, _ = _axial_posterior(members, tiles, latm, n_eff,
                                    near=ax if rnd else None)
    # local fine descent with per-member laterals shaves lattice quantization
    step = 0.0625
    for _ in range(2):
        cands = [(_cl(ax[0] + dc * step, 0, 1), _cl(ax[1] + dd * step, 0, 1))
                 for dc in (-1, 0, 1) for dd in (-1, 0, 1)]
        cands = list(dict.fromkeys(cands))
        tot = np.zeros(len(cands))
        for i in members:
            plist = [(latm[i][0], latm[i][1], c, d) for c, d in cands]
            tot += tiles[i].exact(plist, eng.t_fine)
        ax, _ = _pick(cands, tot)
        step /= 2
    for i in members:
        latm[i] = _refine_lat_tile(tiles[i], latm[i], ax, (0.03125,), eng.t_fine)
    return ax, latm


def _competition_resid(sharp, bcorr, cluster_params, kernel_full, box=17):
    """Box-averaged squared error of each cluster model against the frame."""
    resid = np.empty((len(cluster_params),) + sharp.shape)
    for ci, p in enumerate(cluster_params):
        synth = fftconvolve(sharp, kernel_full(tuple(p)), mode="same")
        resid[ci] = uniform_filter((synth - bcorr) ** 2, box, mode="nearest")
    return resid


def _clean_labels(label, nclus, min_px=200):
    """Absorb tiny connected label islands into the surrounding region."""
    out = np.copy(label)
    for ci in range(nclus):
        comp, ncomp = cc_label(out == ci)
        for k in range(1, ncomp + 1):
            m = comp == k
            if m.sum() < min_px:
                out[m] = -1
    if (out < 0).any():
        # nearest valid label fills the holes
        idx = distance_transform_edt(out < 0, return_distances=False,
                                     return_indices=True)
        out = out[tuple(idx)]
    return out


def _refine_labels_composite(sharp, bcorr, wmap, cluster_params, label,
                             kernel_full, photon, iters=5):
    """Boundary sweep under the composite forward model.

    Scoring each cluster model against the frame on its own misattributes
    pixels within a kernel radius of a zone edge, where the observation
    mixes blur spilling over from both sides.  Synthesizing from the label
    map itself (each region blurred with its own kernel, then summed) and
    flipping edge pixels only when that lowers the weighted squared error
    resolves those bands.  Flip costs come out in closed form: moving one
    source pixel between regions swaps its kernel footprint contribution.
    """
    nc = len(cluster_params)
    if nc < 2:
        return label
    w = wmap
    kerns = [kernel_full(tuple(p)) for p in cluster_params]
    # quadratic flip term: energy of the kernel swap under the local weights
    qf = {}
    for a in range(nc):
        for b in range(a + 1, nc):
            q = (kerns[b] - kerns[a]) ** 2
            qf[a, b] = qf[b, a] = fftconvolve(w, q[::-1, ::-1], mode="same")

    def composite_err(lb):
        synth = np.zeros(sharp.shape)
        for ci in range(nc):
            synth += fftconvolve(np.where(lb == ci, sharp, 0.0), kerns[ci],
                                 mode="same")
        e = synth - bcorr
        return float((w * e * e).sum()), e

    lab = np.copy(label)
    sse, err = composite_err(lab)
    for _ in range(iters):
        edge = np.zeros(lab.shape, dtype=bool)
        edge[:-1] |= lab[:-1] != lab[1:]
        edge[1:] |= lab[:-1] != lab[1:]
        edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
        edge[:, 1:] |= lab[:, :-1] != lab[:, 1:]
        if not edge.any():
            break
        band = binary_dilation(edge, np.ones((3, 3), dtype=bool), iterations=8)
        we = w * err
        corr = [fftconvolve(we, k[::-1, ::-1], mode="same") for k in kerns]
        delta = np.full(lab.shape, np.inf)
        target = np.copy(lab)
        for a in range(nc):
            src = (lab == a) & band
            if not src.any():
                continue
            for b in range(nc):
                if b == a:
                    continue
                d_ab = 2.0 * sharp * (corr[b] - corr[a]) + sharp * sharp * qf[a, b]
                # require the gain to clear the shot-noise fluctuation scale
                marg = (2.0 * np.abs(sharp) * np.sqrt(qf[a, b] / photon)
                        if photon is not None else 0.0)
                ok = src & (d_ab < -marg) & (d_ab < delta)
                delta[ok] = d_ab[ok]
                target[ok] = b
        flips = delta < 0.0
        if not flips.any():
            break
        # batched flips interact within a kernel footprint; back off to the
        # strongest subset until the true composite error agrees
        order = np.argsort(delta[flips])
        fy, fx = np.nonzero(flips)
        fy, fx = fy[order], fx[order]
        accepted = False
        while len(fy) >= 16:
            trial = np.copy(lab)
            trial[fy, fx] = target[fy, fx]
            new_sse, new_err = composite_err(trial)
            if new_sse < sse:
                lab, sse, err = trial, new_sse, new_err
                accepted = True
                break
            fy, fx = fy[:len(fy) // 2], fx[:len(fx) // 2]
        if not accepted:
            break
    return lab


def _estimate_regions(sharp, blurred, optics, sensor, patch, stride, em_rounds=1):
    """Piecewise-constant estimation: tile fits, region grouping, composite
    boundary refinement, suspect polish.  Returns the painted maps plus the
    final label field and per-region parameters."""
    est_optics = optics if optics.kernel_size_px <= _EST_KERNEL_PX else \
        replace(optics, kernel_size_px=_EST_KERNEL_PX)
    eng = _engine(est_optics, patch)
    full_cache: dict = {}

    def kernel_full(p):
        # whole-frame scoring needs the untrimmed kernel support; truncated
        # tails bias depth at low axial speed
        if p not in full_cache:
            full_cache[p] = motion_psf(optics, MotionParams(*p)).weights
        return full_cache[p]

    h_img, w_img = sharp.shape
    offs_y = sorted(set(list(range(0, h_img - patch + 1, stride)) + [h_img - patch]))
    offs_x = sorted(set(list(range(0, w_img - patch + 1, stride)) + [w_img - patch]))
    tiles, lat_ofs, curves, stars, centers = [], [], [], [], []
    for oy in offs_y:
        for ox in offs_x:
            t = _Tile(eng, sensor, sharp, blurred, oy, ox)
            lat_of, curve, a_star = _fit_tile_profiled(t)
            tiles.append(t)
            lat_ofs.append(lat_of)
            curves.append(curve)
            stars.append(a_star)
            centers.append((oy + patch // 2, ox + patch // 2))
    n = len(tiles)

    # mean observation depth v3/2 + z0 is the coordinate the axial confound
    # ridge preserves, so a soft average over the tile profile estimates it
    # stably even when the per-tile argmin hops along the ridge
    cmean = np.array([c / 2.0 + d for c, d in _AXIALS])
    depth = []
    for i in range(n):
        cu = np.asarray(curves[i])
        e = -(cu - cu.min()) * (patch * patch) / (2.0 * max(cu.min(), 1e-12) * 4.0)
        wsoft = np.exp(e - e.max())
        depth.append(float(np.dot(wsoft / wsoft.sum(), cmean)))

    energy = [float(np.var(t.b)) for t in tiles]
    order = sorted(range(n), key=lambda i: -energy[i])
    cluster = [-1] * n
    reps = []
    for i in order:
        li = lat_ofs[i][stars[i]]
        for ci, (rep, repm) in enumerate(reps):
            if ((li[0] - rep[0]) ** 2 + (li[1] - rep[1]) ** 2 <= 0.25 ** 2
                    and abs(depth[i] - repm) <= 0.12):
                cluster[i] = ci
                break
        if cluster[i] < 0:
            reps.append((li, depth[i]))
            cluster[i] = len(reps) - 1
    # absorb small clusters into the nearest of the top few, cap hypothesis count
    sizes = [sum(1 for c in cluster if c == ci) for ci in range(len(reps))]
    keep = sorted(range(len(reps)), key=lambda ci: -sizes[ci])[:6]
    remap = {}
    for ci in range(len(reps)):
        if ci in keep:
            remap[ci] = keep.index(ci)
        else:
            d2 = [(reps[ci][0][0] - reps[kj][0][0]) ** 2
                  + (reps[ci][0][1] - reps[kj][0][1]) ** 2
                  + (0.25 / 0.12 * (reps[ci][1] - reps[kj][1])) ** 2 for kj in keep]
            remap[ci] = int(np.argmin(d2))
    cluster = [remap[c] for c in cluster]
    nclus = len(keep)

    prefits = {i: (lat_ofs[i], curves[i]) for i in range(n)}
    ax_of, latm_of = [None] * nclus, [None] * nclus
    for ci in range(nclus):
        members = [i for i in range(n) if cluster[i] == ci]
        union = np.zeros((h_img, w_img), dtype=bool)
        for i in members:
            union[tiles[i].oy:tiles[i].oy + patch,
                  tiles[i].ox:tiles[i].ox + patch] = True
        ax_of[ci], latm_of[ci] = _refit_cluster(members, tiles, int(union.sum()),
                                                prefits)

    def cluster_param(ci, ax_list, latm_list):
        latm = latm_list[ci]
        l1 = float(np.median([v[0] for v in latm.values()]))
        l2 = float(np.median([v[1] for v in latm.values()]))
        return (l1, l2, ax_list[ci][0], ax_list[ci][1])

    bcorr = sensor.correct(blurred)
    resid = _competition_resid(sharp, bcorr,
                               [cluster_param(ci, ax_of, latm_of)
                                for ci in range(nclus)], kernel_full)
    label = np.argmin(resid, axis=0)
    total = float(np.min(resid, axis=0).sum())

    def region_weights(ci):
        raw = label == ci
        er = binary_erosion(raw, np.ones((9, 9), dtype=bool))
        # boundary strips carry most label error; drop them when enough
        # interior survives
        return (er if er.sum() >= 400 else raw).astype(np.float32), \
            raw.astype(np.float32)

    unstable: dict = {}
    for _ in range(em_rounds):
        new_ax, new_latm = [], []
        for ci in range(nclus):
            wmap_fit, wmap = region_weights(ci)
            members, full = [], []
            for i in range(n):
                t = tiles[i]
                mass = wmap[t.oy:t.oy + patch, t.ox:t.ox + patch].sum()
                if mass >= 0.35 * patch * patch:
                    members.append(i)
                    if mass >= 0.92 * patch * patch:
                        full.append(i)
            if not members:
                new_ax.append(ax_of[ci])
                new_latm.append(latm_of[ci])
                continue
            for i in members:
                if i not in full:
                    wf = wmap_fit[tiles[i].oy:tiles[i].oy + patch,
                                  tiles[i].ox:tiles[i].ox + patch]
                    if wf.sum() < 100:
                        wf = wmap[tiles[i].oy:tiles[i].oy + patch,
                                  tiles[i].ox:tiles[i].ox + patch]
                    tiles[i].w = wf
            ax, latm = _refit_cluster(members, tiles, int(wmap.sum()),
                                      {i: prefits[i] for i in full})
            for i in members:
                tiles[i].w = None
            new_ax.append(ax)
            new_latm.append(latm)
        new_resid = _competition_resid(sharp, bcorr,
                                       [cluster_param(ci, new_ax, new_latm)
                                        for ci in range(nclus)], kernel_full)
        # a large proposed depth move, taken or vetoed, marks a cluster whose
        # fit never settled; the final polish revisits exactly those
        for ci in range(nclus):
            mv = max(abs(new_ax[ci][0] - ax_of[ci][0]),
                     abs(new_ax[ci][1] - ax_of[ci][1]))
            unstable[ci] = max(unstable.get(ci, 0.0), mv)
        # per-cluster veto: a refit may not explain the region it was fitted
        # on worse than the parameters it replaces, even if other clusters
        # improve enough to hide that globally
        for ci in range(nclus):
            m = label == ci
            if m.any() and float(new_resid[ci][m].sum()) > float(resid[ci][m].sum()):
                new_ax[ci] = ax_of[ci]
                new_latm[ci] = latm_of[ci]
                new_resid[ci] = resid[ci]
        new_total = float(np.min(new_resid, axis=0).sum())
        if new_total < total:     # keep the refit only if it explains the frame better
            ax_of, latm_of, total = new_ax, new_latm, new_total
            label = np.argmin(new_resid, axis=0)
            resid = new_resid
        else:
            break

    # merge clusters whose laterals agree, closest pair first; each attempt
    # pools the two regions into one refit and must keep the frame residual
    # essentially flat, which rejects merges across genuinely distinct zones
    merged = True
    while merged and nclus > 1:
        merged = False
        cp = [cluster_param(ci, ax_of, latm_of) for ci in range(nclus)]
        pairs = sorted((np.hypot(cp[i][0] - cp[j][0], cp[i][1] - cp[j][1]), i, j)
                       for i in range(nclus) for j in range(i + 1, nclus))
        for dist, ci, cj in pairs:
            if dist > 0.5:
                break
            # fragments of one zone agree on mean depth as well as laterals;
            # zones split only in depth must not be rejoined here
            mi = ax_of[ci][0] / 2.0 + ax_of[ci][1]
            mj = ax_of[cj][0] / 2.0 + ax_of[cj][1]
            if abs(mi - mj) > 0.15:
                continue
            glabel = np.where(label == cj, ci, label)
            wmap = (glabel == ci).astype(np.float32)
            members, full = [], []
            for i in range(n):
                t = tiles[i]
                mass = wmap[t.oy:t.oy + patch, t.ox:t.ox + patch].sum()
                if mass >= 0.35 * patch * patch:
                    members.append(i)
                    if mass >= 0.92 * patch * patch:
                        full.append(i)
            if not members:
                continue
            er = binary_erosion(glabel == ci, np.ones((9, 9), dtype=bool))
            wmap_fit = (er if er.sum() >= 400 else (glabel == ci)).astype(np.float32)
            for i in members:
                if i not in full:
                    wf = wmap_fit[tiles[i].oy:tiles[i].oy + patch,
                                  tiles[i].ox:tiles[i].ox + patch]
                    if wf.sum() < 100:
                        wf = wmap[tiles[i].oy:tiles[i].oy + patch,
                                  tiles[i].ox:tiles[i].ox + patch]
                    tiles[i].w = wf
            axm, latmm = _refit_cluster(members, tiles, int(wmap.sum()),
                                        {i: prefits[i] for i in full})
            for i in members:
                tiles[i].w = None
            keep_ids = [k for k in range(nclus) if k != cj]
            test_ax = [axm if k == ci else ax_of[k] for k in keep_ids]
            test_latm = [latmm if k == ci else latm_of[k] for k in keep_ids]
            new_resid = _competition_resid(sharp, bcorr,
                                           [cluster_param(k, test_ax, test_latm)
                                            for k in range(len(keep_ids))],
                                           kernel_full)
            new_total = float(np.min(new_resid, axis=0).sum())
            if new_total < total * 1.005:
                ax_of, latm_of, nclus, total = test_ax, test_latm, len(keep_ids), \
                    new_total
                label = np.argmin(new_resid, axis=0)
                merged = True
                break

    # a shard cluster explains its pixels barely better than a neighbor does;
    # dropping it costs almost nothing and removes its corrupted parameters
    fin_resid = _competition_resid(sharp, bcorr,
                                   [cluster_param(ci, ax_of, latm_of)
                                    for ci in range(nclus)], kernel_full)
    active = list(range(nclus))
    while len(active) > 1:
        sub = fin_resid[active]
        lab = np.argmin(sub, axis=0)
        best = np.min(sub, axis=0)
        sizes = [(lab == k).sum() for k in range(len(active))]
        worst, worst_cost = None, np.inf
        for k in range(len(active)):
            if sizes[k] >= 0.15 * h_img * w_img or sizes[k] == 0:
                continue
            m = lab == k
            others = np.min(np.delete(sub, k, axis=0), axis=0)
            # relative per-pixel margin: how much worse the runner-up model
            # fits this cluster's own pixels
            cost = float((others[m] - best[m]).mean()) / max(float(best[m].mean()),
                                                             1e-12)
            if cost < worst_cost:
                worst, worst_cost = k, cost
        if worst is not None and worst_cost < 0.10:
            active.pop(worst)
        else:
            break

    wfull = sensor.weights(bcorr)

    # a lone surviving cluster may be hiding two zones that share a lateral
    # and differ only in depth, which the lateral-led tile grouping cannot
    # see; probe a depth split and keep it if the synthesized frame agrees
    if len(active) == 1:
        ci0 = active[0]
        p0 = cluster_param(ci0, ax_of, latm_of)

        def split_sse(cps, lab):
            synth = np.zeros(sharp.shape)
            for k_i, cp in enumerate(cps):
                synth += fftconvolve(np.where(lab == k_i, sharp, 0.0),
                                     kernel_full(tuple(cp)), mode="same")
            e = synth - bcorr
            return float((wfull * e * e).sum())

        base = split_sse([p0], np.zeros(sharp.shape, dtype=int))
        best_split = None
        for dm in (0.1875, 0.375):
            lo = (p0[0], p0[1], p0[2], _cl(p0[3] - dm, 0, 1))
            hi = (p0[0], p0[1], p0[2], _cl(p0[3] + dm, 0, 1))
            if abs(lo[3] - hi[3]) < dm:
                continue
            sres = _competition_resid(sharp, bcorr, [lo, hi], kernel_full)
            slab = np.argmin(sres, axis=0)
            if min((slab == 0).sum(), (slab == 1).sum()) < 0.05 * h_img * w_img:
                continue
            sides = []
            for side in (0, 1):
                raw = (slab == side).astype(np.float32)
                er = binary_erosion(slab == side, np.ones((9, 9), dtype=bool))
                fitmap = (er if er.sum() >= 400 else (slab == side)).astype(np.float32)
                members = []
                for i in range(n):
                    t = tiles[i]
                    if raw[t.oy:t.oy + patch,
                           t.ox:t.ox + patch].sum() >= 0.2 * patch * patch:
                        members.append(i)
                if not members:
                    break
                for i in members:
                    t = tiles[i]
                    wf = fitmap[t.oy:t.oy + patch, t.ox:t.ox + patch]
                    t.w = wf if wf.sum() >= 100 else raw[t.oy:t.oy + patch,
                                                         t.ox:t.ox + patch]
                ax_s, latm_s = _refit_cluster(members, tiles, int(raw.sum()))
                for i in members:
                    tiles[i].w = None
                sides.append((ax_s, latm_s))
            if len(sides) < 2:
                continue
            cps = []
            for ax_s, latm_s in sides:
                l1 = float(np.median([v[0] for v in latm_s.values()]))
                l2 = float(np.median([v[1] for v in latm_s.values()]))
                cps.append((l1, l2, ax_s[0], ax_s[1]))
            sres2 = _competition_resid(sharp, bcorr, cps, kernel_full)
            slab2 = np.argmin(sres2, axis=0)
            if min((slab2 == 0).sum(), (slab2 == 1).sum()) < 0.05 * h_img * w_img:
                continue
            s = split_sse(cps, slab2)
            if s < base * 0.999 and (best_split is None or s < best_split[0]):
                best_split = (s, sides)
        if best_split is not None:
            ax_of = list(ax_of) + [best_split[1][1][0]]
            latm_of = list(latm_of) + [best_split[1][1][1]]
            ax_of[ci0], latm_of[ci0] = best_split[1][0]
            active = [ci0, nclus]
            nclus += 1

    paint_resid = _competition_resid(sharp, bcorr,
                                     [cluster_param(ci, ax_of, latm_of)
                                      for ci in active], kernel_full, box=25)
    plabel = _clean_labels(np.argmin(paint_resid, axis=0), len(active))
    plabel = _refine_labels_composite(sharp, bcorr, wfull,
                                      [cluster_param(ci, ax_of, latm_of)
                                       for ci in active],
                                      plabel, kernel_full, sensor.photon)
    plabel = _clean_labels(plabel, len(active))

    # mixture shards that survive painting with almost no support carry junk
    # parameters (no tile inside them can dominate a fit); fold them into
    # whichever neighbour competes best so the final pass sees a clean field
    sizes = [int((plabel == ci).sum()) for ci in range(len(active))]
    small = [ci for ci in range(len(active)) if sizes[ci] < 1000]
    if small and len(small) < len(active):
        keep_ids = [ci for ci in range(len(active)) if ci not in small]
        bad = np.isin(plabel, small)
        plabel[bad] = np.asarray(keep_ids)[np.argmin(paint_resid[keep_ids][:, bad],
                                                     axis=0)]
        remap2 = np.zeros(len(active), dtype=int)
        for nw, ci in enumerate(keep_ids):
            remap2[ci] = nw
        plabel = remap2[plabel]
        active = [active[ci] for ci in keep_ids]
        plabel = _clean_labels(plabel, len(active))
    label = np.array(active, dtype=int)[plabel]

    # final pass against the full-size forward model on the refined labels.
    # Clusters whose proposal jumped during refitting never settled (zone
    # mixture tiles drag depth and laterals to a self-consistent wrong fixed
    # point): those get a basin walk along the depth ridge.
    suspects = [ci for ci in active if unstable.get(ci, 0.0) >= 0.2]
    parts = {}
    for ci in active:
        k = kernel_full(cluster_param(ci, ax_of, latm_of))
        parts[ci] = fftconvolve(np.where(label == ci, sharp, 0.0), k, mode="same")

    def polish_cluster(ci):
        nonlocal ax_of, latm_of
        src = np.where(label == ci, sharp, 0.0)
        if not (label == ci).any():
            return
        others = sum(parts[cj] for cj in active if cj != ci)

        cur = cluster_param(ci, ax_of, latm_of)
        # mislabeled boundary pixels carry extreme residuals (the zones'
        # blur directions differ) and drag the fit off truth; score the walk
        # on a trimmed field so a handful of outliers cannot steer it
        e0 = others + fftconvolve(src, kernel_full(cur), mode="same") - bcorr
        r0 = wfull * e0 * e0
        wk = np.where(r0 <= np.quantile(r0, 1.0 - _TRIM_Q), wfull, 0.0)

        def sse_at(p):
            k = kernel_full((float(p[0]), float(p[1]), float(p[2]), float(p[3])))
            e = others + fftconvolve(src, k, mode="same") - bcorr
            return float((wk * e * e).sum())

        cur_sse = sse_at(cur)
        start = (cur, cur_sse)
        for _ in range(6):
            moved = False
            m0 = cur[2] / 2.0 + cur[3]
            for c, d in _AX81:
                if abs(c / 2.0 + d - m0) > 0.25 or (c == cur[2] and d == cur[3]):
                    continue
                s = sse_at((cur[0], cur[1], c, d))
                if s < cur_sse:
                    cur, cur_sse, moved = (cur[0], cur[1], c, d), s, True
            for step in (0.0625, 0.03125):
                for dy in (-step, 0.0, step):
                    for dx in (-step, 0.0, step):
                        if dy == 0.0 and dx == 0.0:
                            continue
                        l1 = _cl(cur[0] + dy, -1, 1)
                        l2 = _cl(cur[1] + dx, -1, 1)
                        s = sse_at((l1, l2, cur[2], cur[3]))
                        if s < cur_sse:
                            cur, cur_sse, moved = (l1, l2, cur[2], cur[3]), s, True
            if not moved:
                break
        # the landscape near the optimum is flat to within the noise floor;
        # only leave the incumbent basin when the gain is material
        if cur_sse > 0.997 * start[1]:
            cur, cur_sse = start
        if cur != cluster_param(ci, ax_of, latm_of):
            ax_of = list(ax_of)
            ax_of[ci] = (cur[2], cur[3])
            latm_of = list(latm_of)
            latm_of[ci] = {i: (cur[0], cur[1]) for i in latm_of[ci]}
            parts[ci] = fftconvolve(src, kernel_full(cur), mode="same")

    for ci in suspects:
        polish_cluster(ci)

    def polish_fine(ci):
        # with a single region the composite equals the render path exactly,
        # so descending the full-size model closes both the small-kernel bias
        # and the lattice quantization.  The (v3, z0) trough is curved, so
        # straight-line ridge moves stall; instead v3 is profiled as the slow
        # coordinate with z0 re-optimized by line search at every probe.
        nonlocal ax_of, latm_of
        src = np.where(label == ci, sharp, 0.0)
        others = sum(parts[cj] for cj in active if cj != ci)

        def sse_at(p):
            k = kernel_full((float(p[0]), float(p[1]), float(p[2]), float(p[3])))
            e = others + fftconvolve(src, k, mode="same") - bcorr
            return float((wfull * e * e).sum())

        cur = cluster_param(ci, ax_of, latm_of)
        cur_sse = sse_at(cur)

        def best_depth(lat, c, d0, floor):
            d = _cl(d0, 0, 1)
            s = sse_at((lat[0], lat[1], c, d))
            step = 0.125
            while step >= floor:
                for _ in range(4):
                    better = False
                    for dd in (-step, step):
                        d2 = _cl(d + dd, 0, 1)
                        s2 = sse_at((lat[0], lat[1], c, d2))
                        if s2 < s:
                            d, s, better = d2, s2, True
                    if not better:
                        break
                step /= 2
            return d, s

        m0 = cur[2] / 2.0 + cur[3]
        lat = (cur[0], cur[1])
        for c in np.linspace(0.0, 1.0, 9):
            c = float(c)
            d, s = best_depth(lat, c, m0 - c / 2.0, 0.03125)
            if s < cur_sse:
                cur, cur_sse = (lat[0], lat[1], c, d), s
        for step in (0.0625, 0.03125, 0.015625):
            for _ in range(3):
                moved = False
                for dc in (-step, step):
                    c = _cl(cur[2] + dc, 0, 1)
                    d, s = best_depth((cur[0], cur[1]), c, cur[3] - dc / 2.0,
                                      0.0078125)
                    if s < cur_sse:
                        cur, cur_sse, moved = (cur[0], cur[1], c, d), s, True
                for dy in (-step, 0.0, step):
                    for dx in (-step, 0.0, step):
                        if dy == 0.0 and dx == 0.0:
                            continue
                        l1 = _cl(cur[0] + dy, -1, 1)
                        l2 = _cl(cur[1] + dx, -1, 1)
                        s = sse_at((l1, l2, cur[2], cur[3]))
                        if s < cur_sse:
                            cur, cur_sse, moved = (l1, l2, cur[2], cur[3]), s, True
                if not moved:
                    break
        if cur != cluster_param(ci, ax_of, latm_of):
            ax_of = list(ax_of)
            ax_of[ci] = (cur[2], cur[3])
            latm_of = list(latm_of)
            latm_of[ci] = {i: (cur[0], cur[1]) for i in latm_of[ci]}
            parts[ci] = fftconvolve(src, kernel_full(cur), mode="same")

    if len(active) == 1:
        polish_fine(active[0])

    est = {c: np.zeros((h_img, w_img)) for c in ("v1", "v2", "v3", "z0")}
    for ci in active:
        sel = label == ci
        if not sel.any():
            continue
        latm = latm_of[ci]
        est["v3"][sel] = ax_of[ci][0]
        est["z0"][sel] = ax_of[ci][1]
        est["v1"][sel] = float(np.median([v[0] for v in latm.values()]))
        est["v2"][sel] = float(np.median([v[1] for v in latm.values()]))

    synth = sum(parts[ci] for ci in active)
    resid_map = wfull * (synth - bcorr) ** 2
    eng.trim()
    return est, resid_map


def _estimate_rows(sharp, blurred, optics, sensor, patch, stride_y, stride_x):
    """Column-profile estimation for flows stratified along the image rows.

    Assumes one start depth for the frame (a single thin sheet) and a
    motion profile that varies with row only.  Tiles are center-weighted
    to tame the parameter mixture inside each window, the shared depth
    comes from a lattice scan pooled over all bands, and each band then
    profiles its velocity against that depth.  Maps interpolate linearly
    between band centers.
    """
    # no truncated estimation kernel here: band tiles are small and the
    # shared-depth scan is sensitive to kernel tail leakage
    eng = _engine(optics, patch)
    full_cache: dict = {}

    def kernel_full(p):
        if p not in full_cache:
            full_cache[p] = motion_psf(optics, MotionParams(*p)).weights
        return full_cache[p]

    h_img, w_img = sharp.shape
    offy = sorted(set(list(range(0, h_img - patch + 1, stride_y)) + [h_img - patch]))
    offx = sorted(set(list(range(0, w_img - patch + 1, stride_x)) + [w_img - patch]))
    wv = 1.0 - np.abs(np.arange(patch) - (patch - 1) / 2.0) / (patch / 2.0)
    center_w = np.repeat(wv[:, None].astype(np.float32), patch, axis=1)
    bands, sums = [], []
    for oy in offy:
        tl, pooled = [], np.zeros(len(_AXIALS))
        for ox in offx:
            t = _Tile(eng, sensor, sharp, blurred, oy, ox)
            t.w = center_w
            lat_of, curve, _ = _fit_tile_profiled(t)
            tl.append((t, lat_of))
            pooled += np.asarray(curve)
        bands.append((oy, tl))
        sums.append(pooled)

    z0s = sorted(set(d for _, d in _AXIALS))

    def lattice_best(pooled, d):
        idx = [k for k, a in enumerate(_AXIALS) if a[1] == d]
        return min(idx, key=lambda k: pooled[k])

    totals = {d: sum(s[lattice_best(s, d)] for s in sums) for d in z0s}
    tbest = min(totals.values())
    depth_cands = sorted((d for d in z0s if totals[d] <= 1.02 * tbest),
                         key=lambda d: totals[d])[:3]

    def band_cost(latb, bi, c, d):
        tot = 0.0
        for (t, _), (l1, l2) in zip(bands[bi][1], latb[bi]):
            tot += float(t.exact([(l1, l2, c, d)], eng.t_fine)[0])
        return tot

    def profile(latb, d, cs0):
        cs1 = list(cs0)
        for bi in range(len(bands)):
            for step in (0.125, 0.0625, 0.03125):
                cands = sorted(set(_cl(cs1[bi] + dc * step, 0, 1)
                                   for dc in (-1, 0, 1)))
                cs1[bi] = min(cands, key=lambda c: band_cost(latb, bi, c, d))
        return cs1, sum(band_cost(latb, bi, cs1[bi], d) for bi in range(len(bands)))

    def fit_at_depth(d):
        cs0 = [_AXIALS[lattice_best(s, d)][0] for s in sums]
        latb = [[_refine_lat_tile(t, lat_of[(c, d)], (c, d), (0.0625, 0.03125),
                                  eng.t_fine)
                 for t, lat_of in tl]
                for (oy, tl), c in zip(bands, cs0)]
        cs1, tot = profile(latb, d, cs0)
        return tot, cs1, latb

    # the axial ridge makes coarse-grid depth totals near-ties; candidates
    # within the tie band each get their own laterals and fine velocity
    # profile, and the best refined total wins
    best = min([(fit_at_depth(d), d) for d in depth_cands], key=lambda r: r[0][0])
    (_, cs, latb), z0g = best

    # alternate the per-band velocity profile against the shared depth
    for _ in range(2):
        cs, _ = profile(latb, z0g, cs)
        for step in (0.125, 0.0625):
            cands = sorted(set(_cl(z0g + dd * step, 0, 1) for dd in (-1, 0, 1)))
            z0g = min(cands, key=lambda d: sum(band_cost(latb, bi, cs[bi], d)
                                               for bi in range(len(bands))))

    ycent = np.array([oy + patch // 2 for oy, _ in bands], dtype=float)
    yy = np.arange(h_img, dtype=float)
    est = {c: np.zeros((h_img, w_img)) for c in ("v1", "v2", "v3", "z0")}
    est["v3"][:] = np.interp(yy, ycent, cs)[:, None]
    est["z0"][:] = z0g
    l1b = np.array([np.median([l[0] for l in ls]) for ls in latb])
    l2b = np.array([np.median([l[1] for l in ls]) for ls in latb])
    est["v1"][:] = np.interp(yy, ycent, l1b)[:, None]
    est["v2"][:] = np.interp(yy, ycent, l2b)[:, None]

    # residual against a banded composite: rows belong to the nearest band
    bcorr = sensor.correct(blurred)
    wfull = sensor.weights(bcorr)
    owner = np.abs(yy[:, None] - ycent[None, :]).argmin(axis=1)
    synth = np.zeros(sharp.shape)
    for bi in range(len(bands)):
        rows = owner == bi
        if not rows.any():
            continue
        src = np.where(rows[:, None], sharp, 0.0)
        p = (float(l1b[bi]), float(l2b[bi]), float(cs[bi]), float(z0g))
        synth += fftconvolve(src, kernel_full(p), mode="same")
    resid_map = wfull * (synth - bcorr) ** 2
    eng.trim()
    return est, resid_map


@dataclass
class EstimationReport:
    """Estimation output: predicted maps, per-pixel fit residual, scores.

    ``r2`` is filled once the prediction is scored against a ground truth
    (the estimator itself never sees one); ``score`` does that in place.
    """

    pred: TargetMaps
    residual_map: np.ndarray
    r2: dict | None = None
    meta: dict = field(default_factory=dict)

    def score(self, gt: TargetMaps) -> dict:
        self.r2 = evaluate_r2(self.pred, gt)
        return self.r2

    def save(self, stem: str | Path, seed: int = 0) -> None:
        """Write <stem>.bflw (prediction planes) and <stem>.json (summary)."""
        stem = Path(stem)
        self.pred.save(stem.with_suffix(".bflw"), seed)
        summary = {
            "r2": self.r2,
            "residual": {
                "mean": float(self.residual_map.mean()),
                "max": float(self.residual_map.max()),
            },
            **self.meta,
        }
        stem.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")


def estimate_field_nonblind(
    sharp: np.ndarray,
    blurred: np.ndarray,
    patch: int | None = None,
    stride: int | None = None,
    optics: OpticsConfig | None = None,
    *,
    photon_scale: float | None = 1000.0,
    layout: str = "regions",
    em_rounds: int = 1,
) -> EstimationReport:
    """Recover per-pixel motion maps given the sharp reference frame.

    ``layout`` selects the spatial prior: "regions" fits piecewise-constant
    motion zones (the default), "rows" fits a row-stratified profile with
    one shared start depth.  ``photon_scale`` is the photon budget used
    when the observation was formed; pass None for a noise-free frame so
    scoring skips the sensor-chain inversion.

    Pixels with no usable texture get w=1 and zero motion in the output.
    """
    optics = optics or OpticsConfig()
    sharp = np.asarray(sharp, dtype=np.float64)
    blurred = np.asarray(blurred, dtype=np.float64)
    if sharp.ndim != 2 or sharp.shape != blurred.shape:
        raise ValueError("sharp and blurred must be equal-shape 2-D arrays")
    if layout not in ("regions", "rows"):
        raise ValueError(f"unknown layout {layout!r}")
    if patch is None:
        patch = 64 if layout == "regions" else 32
    if stride is None:
        stride = 32 if layout == "regions" else 16
    if not 0 < stride <= patch:
        raise ValueError("stride must lie in [1, patch]")
    if min(sharp.shape) < patch:
        raise ValueError(f"frame {sharp.shape} smaller than one {patch}px tile")

    w_map = validity_map(sharp)
    sensor = _Sensor(optics, photon_scale)
    invalid = w_map == 1.0
    if invalid.all() or float(sharp.std()) < 1e-9:
        zeros = np.zeros(sharp.shape)
        pred = TargetMaps(v1=zeros, v2=zeros.copy(), v3=zeros.copy(),
                          z0=zeros.copy(), w=np.ones(sharp.shape))
        return EstimationReport(pred, zeros.copy(),
                                meta={"mode": "nonblind", "layout": layout,
                                      "patch": patch, "stride": stride})

    if layout == "regions":
        est, resid_map = _estimate_regions(sharp, blurred, optics, sensor,
                                           patch, stride, em_rounds)
    else:
        est, resid_map = _estimate_rows(sharp, blurred, optics, sensor,
                                        patch, stride, patch)
    for c in ("v1", "v2", "v3", "z0"):
        est[c][invalid] = 0.0
    pred = TargetMaps(v1=est["v1"], v2=est["v2"], v3=est["v3"], z0=est["z0"],
                      w=w_map)
    return EstimationReport(pred, resid_map,
                            meta={"mode": "nonblind", "layout": layout,
                                  "patch": patch, "stride": stride})


def fit_kernel_nonblind(
    sharp_patch: np.ndarray,
    blurred_patch: np.ndarray,
    reg: float = 1e-3,
    optics: OpticsConfig | None = None,
) -> Kernel2D:
    """Wiener deconvolution of one locally-constant-blur patch.

    Divides the cross-spectrum by the regularized sharp power spectrum
    (``reg`` scales the spectral power peak, so it is unit-free), crops the
    impulse response to the kernel support, clamps and renormalizes.  A
    textureless patch cannot be inverted; the fallback is a centered
    impulse flagged ``valid=False`` rather than an exception.
    """
    optics = optics or OpticsConfig()
    s = np.asarray(sharp_patch, dtype=np.float64)
    b = np.asarray(blurred_patch, dtype=np.float64)
    if s.shape != b.shape or s.ndim != 2:
        raise ValueError("patches must be equal-shape 2-D arrays")
    k = optics.kernel_size_px
    if min(s.shape) < 2 * k:
        raise ValueError(f"patch {s.shape} too small for a {k}px kernel")
    half = k // 2
    impulse = np.zeros((k, k))
    impulse[half, half] = 1.0
    if float(s.std()) < 1e-9:
        return Kernel2D(impulse, valid=False)
    spec_s = fft2(s)
    spec_b = fft2(b)
    power = np.abs(spec_s) ** 2
    h = np.real(ifft2(spec_b * np.conj(spec_s) / (power + reg * power.max())))
    h = fftshift(h)
    cy, cx = s.shape[0] // 2, s.shape[1] // 2
    crop = h[cy - half:cy + half + 1, cx - half:cx + half + 1]
    crop = np.clip(crop, 0.0, None)
    total = float(crop.sum())
    if total < 1e-9:
        return Kernel2D(impulse, valid=False)
    return Kernel2D(crop / total)


_PARAM_BANKS: dict = {}


def _param_bank(optics: OpticsConfig, grid_spec, t_steps):
    key = (optics.to_json(), tuple(grid_spec), t_steps)
    if key not in _PARAM_BANKS:
        n1, n2, n3, n4 = grid_spec
        g1 = np.linspace(-1.0, 1.0, n1)
        g2 = np.linspace(-1.0, 1.0, n2)
        g3 = np.linspace(0.0, 1.0, n3)
        g4 = np.linspace(0.0, 1.0, n4)
        plist = [(float(a), float(b), float(c), float(d))
                 for a in g1 for b in g2 for c in g3 for d in g4]
        ks = motion_psf_batch(optics, [MotionParams(*p) for p in plist],
                              time_steps=t_steps)
        stack = np.stack([k.weights for k in ks]).reshape(len(plist), -1)
        while len(_PARAM_BANKS) >= 4:
            _PARAM_BANKS.pop(next(iter(_PARAM_BANKS)))
        _PARAM_BANKS[key] = (plist, stack.astype(np.float32))
    return _PARAM_BANKS[key]


def fit_params_to_kernel(
    kernel: Kernel2D,
    optics: OpticsConfig | None = None,
    grid_spec: tuple[int, int, int, int] = (9, 9, 5, 5),
) -> tuple[MotionParams, float]:
    """Fit motion parameters to an observed kernel by grid search.

    Coarse pass over the parameter lattice (kernels cached per optics), then
    each of the most competitive axial cells is refined with two halving
    passes over all four components; the candidate with the lowest L2
    distance wins, ties resolved toward smaller speed then smaller depth.
    Returns the winning parameters and the final L2 distance.
    """
    optics = optics or OpticsConfig()
    target = np.asarray(kernel.weights, dtype=np.float64)
    if target.shape != (optics.kernel_size_px, optics.kernel_size_px):
        raise ValueError(
            f"kernel size {target.shape[0]} does not match optics "
            f"kernel_size_px={optics.kernel_size_px}")
    t_coarse = max(2, optics.time_steps // 4)
    plist, stack = _param_bank(optics, grid_spec, t_coarse)
    flat = target.ravel()
    d = stack - flat[None].astype(np.float32)
    sse = np.einsum("ij,ij->i", d.astype(np.float64), d.astype(np.float64))

    # profile: best lateral per axial cell, then refine the top cells
    n_ax = grid_spec[2] * grid_spec[3]
    by_ax = sse.reshape(-1, n_ax)
    ax_scores = by_ax.min(axis=0)
    ax_order = np.argsort(ax_scores)[:6]

    memo: dict = {}

    def scores_for(cands):
        missing = [p for p in cands if p not in memo]
        if missing:
            ks = motion_psf_batch(optics, [MotionParams(*p) for p in missing])
            for p, kern in zip(missing, ks):
                memo[p] = float(((kern.weights - target) ** 2).sum())
        return [memo[p] for p in cands]

    incumbents = []
    for a_i in ax_order:
        j = int(np.argmin(by_ax[:, a_i]))
        incumbents.append(plist[j * n_ax + a_i])
    best_p, best_s = None, np.inf
    for p0 in incumbents:
        cur, cur_s = p0, scores_for([p0])[0]
        step = 0.25
        for _ in range(2):
            step /= 2
            cands = [(_cl(cur[0] + da * step, -1, 1), _cl(cur[1] + db * step, -1, 1),
                      _cl(cur[2] + dc * step, 0, 1), _cl(cur[3] + dd * step, 0, 1))
                     for da in (-1, 0, 1) for db in (-1, 0, 1)
                     for dc in (-1, 0, 1) for dd in (-1, 0, 1)]
            cands = list(dict.fromkeys(cands))
            cur, cur_s = _pick(cands, scores_for(cands))
        if cur_s < best_s - 1e-15 or (abs(cur_s - best_s) <= 1e-15
                                      and _tie_key(cur) < _tie_key(best_p)):
            best_p, best_s = cur, cur_s
    return MotionParams(*best_p), float(np.sqrt(best_s))


_BLIND_BANKS: dict = {}


def _blind_bank(optics: OpticsConfig, patch: int):
    """Centered log transfer-function moduli for the coarse lattice."""
    key = (optics.to_json(), patch)
    if key not in _BLIND_BANKS:
        t_coarse = max(2, optics.time_steps // 4)
        fy = np.fft.fftfreq(patch)[:, None]
        fx = np.fft.fftfreq(patch)[None, :]
        r = np.hypot(fy, fx)
        rad = np.minimum((r * patch).round().astype(int), patch)
        cutoff = optics.frequency_cutoff
        mask = (rad >= 2) & (r <= cutoff * 0.95)
        nbin = rad.max() + 1

        def centered(logmod):
            prof = np.bincount(rad.ravel(), logmod.ravel(), minlength=nbin)
            cnt = np.bincount(rad.ravel(), minlength=nbin)
            return logmod - (prof / np.maximum(cnt, 1))[rad]

        ks = motion_psf_batch(optics, [MotionParams(*p) for p in _COARSE],
                              time_steps=t_coarse)
        rows = []
        for kern in ks:
            spec = np.abs(fft2(kern.weights, s=(patch, patch))) ** 2
            rows.append(centered(np.log(spec + 1e-9))[mask])
        bank = np.stack(rows).astype(np.float32)
        while len(_BLIND_BANKS) >= 2:
            _BLIND_BANKS.pop(next(iter(_BLIND_BANKS)))
        _BLIND_BANKS[key] = (mask, rad, nbin, bank)
    return _BLIND_BANKS[key]


def estimate_field_blind(
    blurred: np.ndarray,
    patch: int = 64,
    stride: int = 32,
    optics: OpticsConfig | None = None,
    *,
    photon_scale: float | None = 1000.0,
) -> EstimationReport:
    """Best-effort estimation without the sharp reference.

    Per tile, the Hann-windowed log power spectrum (with its radial average
    removed, standing in for the unknown texture spectrum) is matched
    against the centered log transfer functions of the candidate lattice;
    the best lateral is then refined one halving level.  This is a
    heuristic: it reads blur orientation and gross magnitude from spectral
    nulls and carries none of the non-blind path's guarantees.
    """
    optics = optics or OpticsConfig()
    blurred = np.asarray(blurred, dtype=np.float64)
    if blurred.ndim != 2:
        raise ValueError("blurred must be a 2-D array")
    if min(blurred.shape) < patch:
        raise ValueError(f"frame {blurred.shape} smaller than one {patch}px tile")
    if not 0 < stride <= patch:
        raise ValueError("stride must lie in [1, patch]")

    mask, rad, nbin, bank = _blind_bank(optics, patch)
    bank64 = bank.astype(np.float64)
    bank_norm = np.einsum("ij,ij->i", bank64, bank64)

    def centered(logmod):
        prof = np.bincount(rad.ravel(), logmod.ravel(), minlength=nbin)
        cnt = np.bincount(rad.ravel(), minlength=nbin)
        return logmod - (prof / np.maximum(cnt, 1))[rad]

    hann = np.hanning(patch)[:, None] * np.hanning(patch)[None, :]
    t_coarse = max(2, optics.time_steps // 4)

    def refine_score(p):
        kern = motion_psf(optics, MotionParams(*p), time_steps=t_coarse).weights
        spec = np.abs(fft2(kern, s=(patch, patch))) ** 2
        return centered(np.log(spec + 1e-9))[mask]

    h_img, w_img = blurred.shape
    offs_y = sorted(set(list(range(0, h_img - patch + 1, stride)) + [h_img - patch]))
    offs_x = sorted(set(list(range(0, w_img - patch + 1, stride)) + [w_img - patch]))
    w_map = validity_map(blurred)
    results, centers = [], []
    for oy in offs_y:
        for ox in offs_x:
            tile = blurred[oy:oy + patch, ox:ox + patch]
            centers.append((oy + patch // 2, ox + patch // 2))
            frac_invalid = float(w_map[oy:oy + patch, ox:ox + patch].mean())
            if float(tile.std()) < 1e-9 or frac_invalid > 0.5:
                results.append(None)
                continue
            x = (tile - tile.mean()) * hann
            spec = np.abs(fft2(x)) ** 2
            a = centered(np.log(spec + 1e-9))[mask]
            scores = a @ a - 2.0 * (bank64 @ a) + bank_norm
            p, _ = _pick(_COARSE, scores)
            # one halving level on the laterals sharpens orientation
            for step in (0.125, 0.0625):
                loc = [(_cl(p[0] + da * step, -1, 1), _cl(p[1] + db * step, -1, 1),
                        p[2], p[3])
                       for da in (-1, 0, 1) for db in (-1, 0, 1)]
                loc = list(dict.fromkeys(loc))
                sc = [float(((refine_score(q) - a) ** 2).sum()) for q in loc]
                p, _ = _pick(loc, sc)
            best = float(((refine_score(p) - a) ** 2).sum()) / mask.sum()
            results.append((p, best))

    est = {c: np.zeros((h_img, w_img)) for c in ("v1", "v2", "v3", "z0")}
    resid_map = np.zeros((h_img, w_img))
    w_out = np.copy(w_map)
    yy, xx = np.mgrid[0:h_img, 0:w_img]
    bestd = np.full((h_img, w_img), np.inf)
    owner = np.zeros((h_img, w_img), dtype=int)
    for i, (cy, cx) in enumerate(centers):
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        m = d2 < bestd
        bestd[m] = d2[m]
        owner[m] = i
    for i, res in enumerate(results):
        m = owner == i
        if res is None:
            w_out[m] = 1.0
            continue
        (l1, l2, c, d), score = res
        est["v1"][m], est["v2"][m] = l1, l2
        est["v3"][m], est["z0"][m] = c, d
        resid_map[m] = score
    invalid = w_out == 1.0
    for c in ("v1", "v2", "v3", "z0"):
        est[c][invalid] = 0.0
    pred = TargetMaps(v1=est["v1"], v2=est["v2"], v3=est["v3"], z0=est["z0"],
                      w=w_out)
    return EstimationReport(pred, resid_map,
                            meta={"mode": "blind", "patch": patch,
                                  "stride": stride})


def evaluate_r2(pred: TargetMaps, gt: TargetMaps) -> dict:
    """Squared Pearson correlation per channel over pixels with gt w = 0.

    Velocity channels average into ``mean_velocity``; ``z0`` is reported
    separately.  A channel where either side is constant scores 0 and is
    listed under ``degenerate``.  Since the training loss compares absolute
    lateral values, the same scores over |v| are included for parity.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = np.asarray(gt.w) == 0.0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels (gt w = 1 everywhere)")

    def channel_r2(a, b):
        a = a[valid].astype(np.float64)
        b = b[valid].astype(np.float64)
        if min(a.var(), b.var()) < 1e-12:
            return 0.0, True
        r = float(np.corrcoef(a, b)[0, 1])
        return min(r * r, 1.0), False

    out: dict = {"n_valid": n_valid}
    degenerate = []
    vel = []
    for c in ("v1", "v2", "v3"):
        r2, degen = channel_r2(getattr(pred, c), getattr(gt, c))
        out[c] = r2
        vel.append(r2)
        if degen:
            degenerate.append(c)
    out["mean_velocity"] = float(np.mean(vel))
    r2, degen = channel_r2(pred.z0, gt.z0)
    out["z0"] = r2
    if degen:
        degenerate.append("z0")
    vel_abs = []
    for c in ("v1", "v2", "v3"):
        r2, _ = channel_r2(np.abs(getattr(pred, c)), np.abs(getattr(gt, c)))
        vel_abs.append(r2)
    out["mean_velocity_abs"] = float(np.mean(vel_abs))
    out["degenerate"] = degenerate
    return out
