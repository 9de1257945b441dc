"""Search-based initialisation of FP quantizers (signed and mixup-sign).

The scan is exhaustive over a small (format x maxval [x zero point]) space
and keeps the first candidate with strictly lower MSE. Candidate MSEs are
screened with sorted prefix sums and every near-minimal candidate is then
re-evaluated exactly, so the winner and its MSE are those of a direct
``mse(x, fp_quantize(x, params))`` scan.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import denoise_step
from .fpq import FpFormat, FpQuantizerParams, all_formats, fp_quantize, mse, unit_grid
from .lora import QuantizedDenoiser
from .nn import forward

__all__ = [
    "SearchSpace",
    "SearchResult",
    "WEIGHT_FORMATS",
    "build_search_space",
    "search_signed",
    "search_unsigned",
    "search_mixup",
    "exhaustive_search",
    "LayerClass",
    "CalibrationSet",
    "SiteRecord",
    "CSV_HEADER",
    "classify_layers",
    "build_calibration_set",
    "collect_activations",
    "probe_maxval0",
    "calibrate_site",
    "calibrate_model",
    "quantized_model",
]

WEIGHT_FORMATS = {
    4: ("E3M0", "E2M1", "E1M2", "E0M3"),
    6: ("E4M1", "E3M2", "E2M3", "E1M4"),
    8: ("E5M2", "E4M3", "E3M4", "E2M5"),
}
WEIGHT_LOWER = {4: 0.8, 6: 0.9, 8: 0.9}
ZERO_POINTS = tuple(np.linspace(-0.3, 0.0, 6))


@dataclass(frozen=True)
class SearchSpace:
    formats: tuple[FpFormat, ...]
    maxvals: np.ndarray
    zero_points: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if not self.formats or len(self.maxvals) == 0 or not self.zero_points:
            raise ValueError("search space lists must be non-empty")
        if np.any(np.asarray(self.maxvals) <= 0):
            raise ValueError("maxvals must be positive")
        signs = {f.signed for f in self.formats}
        if len(signs) != 1:
            raise ValueError("a search space holds formats of one sign mode")
        if signs == {True} and any(z != 0 for z in self.zero_points):
            raise ValueError("signed spaces carry no zero points")

    @property
    def signed(self) -> bool:
        return self.formats[0].signed

    def __len__(self) -> int:
        return len(self.formats) * len(self.maxvals) * len(self.zero_points)

    def candidates(self):
        """All params in scan order: format, then maxval, then zero point."""
        for f in self.formats:
            for m in self.maxvals:
                for z in self.zero_points:
                    yield FpQuantizerParams(f, float(m), float(z))


@dataclass
class SearchResult:
    params: FpQuantizerParams
    mse: float
    evaluated: int = 0
    # best MSE of each sign mode that was scanned
    mode_mse: dict = field(default_factory=dict)


def build_search_space(bits: int, role: str, mode: str, maxval0: float, n_maxvals: int = 100) -> SearchSpace:
    if not maxval0 > 0:
        raise ValueError(f"maxval_0 must be positive, got {maxval0}")
    if role == "weight":
        if mode != "signed":
            raise ValueError("weights use signed quantizers only")
        if bits not in WEIGHT_FORMATS:
            raise ValueError(f"no weight format list for {bits}-bit")
        formats = tuple(FpFormat.parse(name) for name in WEIGHT_FORMATS[bits])
        maxvals = np.linspace(WEIGHT_LOWER[bits] * maxval0, 2.0 * maxval0, n_maxvals)
        return SearchSpace(formats, maxvals)
    if role != "activation":
        raise ValueError(f"role must be 'weight' or 'activation', got {role!r}")
    maxvals = np.linspace(0.0, maxval0, n_maxvals)[1:]
    if mode == "signed":
        return SearchSpace(tuple(all_formats(bits, True)), maxvals)
    if mode == "unsigned":
        return SearchSpace(tuple(all_formats(bits, False)), maxvals, ZERO_POINTS)
    raise ValueError(f"mode must be 'signed' or 'unsigned', got {mode!r}")


class _Screen:
    """Approximate MSE of many grids at once from sorted prefix sums."""
    def __init__(self, x: np.ndarray):
        self.xs = np.sort(x)
        self.n = x.size
        self.s1 = np.concatenate([[0.0], np.cumsum(self.xs)])
        self.s2 = np.concatenate([[0.0], np.cumsum(self.xs * self.xs)])
        self.energy = float(np.mean(x * x)) if x.size else 0.0

    def mse(self, unit: np.ndarray, scales: np.ndarray, shifts: np.ndarray) -> np.ndarray:
        grids = unit[None, :] * scales[:, None] + shifts[:, None]
        mids = 0.5 * (grids[:, 1:] + grids[:, :-1])
        cut = np.searchsorted(self.xs, mids, side="left")
        rows = len(scales)
        bounds = np.concatenate(
            [np.zeros((rows, 1), dtype=np.intp), cut, np.full((rows, 1), self.n, dtype=np.intp)], axis=1
        )
        cnt = np.diff(bounds, axis=1)
        s1 = np.diff(self.s1[bounds], axis=1)
        s2 = np.diff(self.s2[bounds], axis=1)
        return np.sum(s2 - 2.0 * grids * s1 + cnt * grids * grids, axis=1) / self.n


def _scan(x: np.ndarray, space: SearchSpace, best: tuple[float, FpQuantizerParams | None]):
    """Strict-< scan of ``space`` continuing from ``best``; returns new best and count."""
    screen = _Screen(x)
    maxvals = np.asarray(space.maxvals, dtype=np.float64)
    zps = np.asarray(space.zero_points, dtype=np.float64)
    scanned = 0
    best_mse, best_params = best
    for fmt in space.formats:
        unit = unit_grid(fmt)
        top = unit[-1]
        scales = np.repeat(maxvals / top, len(zps))
        shifts = np.tile(zps, len(maxvals))
        approx = screen.mse(unit, scales, shifts)
        scanned += len(approx)
        floor = approx.min()
        tol = 1e-9 * (screen.energy + float(np.max(np.abs(maxvals))) ** 2) + 1e-300
        ref = min(floor, best_mse)
        for i in np.flatnonzero(approx <= ref + tol):
            params = FpQuantizerParams(fmt, float(maxvals[i // len(zps)]), float(zps[i % len(zps)]))
            err = mse(x, fp_quantize(x, params))
            if err < best_mse:
                best_mse, best_params = err, params
    return (best_mse, best_params), scanned


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no calibration samples")
    return x


def search_signed(samples, space: SearchSpace) -> SearchResult:
    """Best signed quantizer for ``samples`` over ``space``."""
    x = _as_samples(samples)
    if not space.signed:
        raise ValueError("search_signed needs a signed space")
    (err, params), n = _scan(x, space, (np.inf, None))
    return SearchResult(params, err, n, {"signed": err})


def search_unsigned(samples, space: SearchSpace) -> SearchResult:
    x = _as_samples(samples)
    if space.signed:
        raise ValueError("search_unsigned needs an unsigned space")
    (err, params), n = _scan(x, space, (np.inf, None))
    return SearchResult(params, err, n, {"unsigned": err})


def search_mixup(samples, signed_space: SearchSpace, unsigned_space: SearchSpace) -> SearchResult:
    """Signed scan first, then the unsigned + zero-point scan; unsigned must
    be strictly better to win."""
    x = _as_samples(samples)
    signed = search_signed(x, signed_space)
    (err, params), n = _scan(x, unsigned_space, (signed.mse, signed.params))
    uns = search_unsigned(x, unsigned_space).mse if params is signed.params else err
    return SearchResult(params, err, signed.evaluated + n, {"signed": signed.mse, "unsigned": uns})


def exhaustive_search(samples, *spaces: SearchSpace) -> SearchResult:
    """Direct re-evaluation of every candidate; slow, used as a reference."""
    x = _as_samples(samples)
    best_mse, best_params, n = np.inf, None, 0
    for space in spaces:
        for params in space.candidates():
            err = mse(x, fp_quantize(x, params))
            n += 1
            if err < best_mse:
                best_mse, best_params = err, params
    return SearchResult(best_params, best_mse, n)


# --- model-level calibration -------------------------------------------------


@dataclass(frozen=True)
class LayerClass:
    layer_id: int
    kind: str  # "AAL" or "NAL"


def classify_layers(model) -> list[LayerClass]:
    """AAL when the layer's input comes out of a SiLU, NAL otherwise."""
    return [LayerClass(i, "AAL" if flag else "NAL") for i, flag in enumerate(model.input_flags())]


@dataclass
class CalibrationSet:
    xs: np.ndarray  # (count, dim)
    ts: np.ndarray  # (count,)

    def __len__(self) -> int:
        return len(self.ts)


def build_calibration_set(fp_model, schedule, count: int, rng, n_strata: int = 32) -> CalibrationSet:
    """(x_t, t) pairs from FP sampling trajectories, stratified over timesteps.

    ``ceil(count / n_strata)`` trajectories run in one batch; each contributes
    one state per stratum at a uniformly drawn timestep inside it.
    """
    T = schedule.T
    n_strata = min(n_strata, T)
    if count < n_strata:
        raise ValueError(f"calibration size {count} is below the {n_strata} timestep strata")
    strata = np.array_split(np.arange(T), n_strata)
    n_traj = -(-count // n_strata)
    picks = np.stack([rng.choice(s, size=n_traj) for s in strata], axis=1)  # (n_traj, n_strata)
    wanted = {}
    for j in range(n_traj):
        for k in range(n_strata):
            wanted.setdefault(int(picks[j, k]), []).append((j, k))
    xs = np.empty((n_traj, n_strata, fp_model.input_dim))
    x = rng.standard_normal((n_traj, fp_model.input_dim))
    for t in range(T - 1, -1, -1):
        for j, k in wanted.get(t, ()):
            xs[j, k] = x[j]
        delta = rng.standard_normal(x.shape)
        x = denoise_step(x, forward(fp_model, x, t), t, schedule, delta)
    # trajectory-major order so truncation drops whole trailing trajectories first
    xs = xs.reshape(-1, fp_model.input_dim)[:count]
    ts = picks.reshape(-1)[:count]
    return CalibrationSet(xs, ts)


def collect_activations(model, xs: np.ndarray, ts: np.ndarray) -> dict[str, np.ndarray]:
    """Inputs of every linear layer over the given states, flattened per site."""
    probe: dict[str, list] = {}
    for t in np.unique(ts):
        forward(model, xs[ts == t], int(t), probe=probe)
    return {site: np.concatenate([a.ravel() for a in chunks]) for site, chunks in probe.items()}


def probe_maxval0(model, schedule, n_traj: int, rng, sites=None) -> dict[str, float]:
    """Largest magnitude seen at each quantizer site.

    Activation sites are probed along ``n_traj`` random FP sampling
    trajectories; weight sites read the static weights.
    """
    peak: dict[str, float] = {}
    x = rng.standard_normal((n_traj, model.input_dim))
    for t in range(schedule.T - 1, -1, -1):
        probe: dict[str, list] = {}
        eps = forward(model, x, t, probe=probe)
        for site, chunks in probe.items():
            peak[site] = max(peak.get(site, 0.0), max(float(np.max(np.abs(c))) for c in chunks))
        x = denoise_step(x, eps, t, schedule, rng.standard_normal(x.shape))
    for i, layer in enumerate(model.layers):
        peak[f"layer{i}.weight"] = float(np.max(np.abs(layer.weight)))
    if sites is not None:
        missing = [s for s in sites if s not in peak]
        if missing:
            raise KeyError(f"sites never exercised by the probe: {missing}")
        peak = {s: peak[s] for s in sites}
    return peak


@dataclass
class SiteRecord:
    site_id: str
    kind: str
    mode: str  # signed | unsigned | passthrough
    params: FpQuantizerParams | None
    mse: float
    maxval0: float
    mode_mse: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        p = self.params
        return [
            self.site_id, self.kind, self.mode,
            "" if p is None else p.format.exponent_bits,
            "" if p is None else p.format.mantissa_bits,
            "" if p is None else repr(p.maxval),
            "" if p is None else repr(p.zero_point),
            repr(self.mse),
        ]


CSV_HEADER = ["site_id", "kind", "mode", "e", "m", "maxval", "zero_point", "mse"]


def subsample(x: np.ndarray, limit: int, rng) -> np.ndarray:
    """Uniform subset without replacement of at most ``limit`` elements."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size <= limit:
        return x
    return x[np.sort(rng.choice(x.size, size=limit, replace=False))]


def calibrate_site(samples, bits: int, role: str, kind: str, mixup: bool, maxval0: float | None = None,
                   site_id: str = "", n_maxvals: int = 100) -> SiteRecord:
    """Algorithm-1 search for one site; unsigned is tried only for AAL activations."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if bits >= 32:
        return SiteRecord(site_id, kind, "passthrough", None, 0.0, float("nan"))
    m0 = float(np.max(np.abs(x))) if maxval0 is None else float(maxval0)
    if not m0 > 0:
        return SiteRecord(site_id, kind, "passthrough", None, 0.0, m0)
    signed_space = build_search_space(bits, role, "signed", m0, n_maxvals)
    if role == "activation" and kind == "AAL" and mixup:
        res = search_mixup(x, signed_space, build_search_space(bits, role, "unsigned", m0, n_maxvals))
    else:
        res = search_signed(x, signed_space)
    mode = "signed" if res.params.signed else "unsigned"
    return SiteRecord(site_id, kind, mode, res.params, res.mse, m0, res.mode_mse)


def calibrate_model(model, calib: CalibrationSet, maxval0: dict[str, float], bits: list[tuple[int, int]],
                    mixup: bool = True, max_samples: int = 1 << 16, rng=None,
                    n_maxvals: int = 100) -> list[SiteRecord]:
    """Calibrate every weight and activation site of ``model``.

    ``bits[i]`` is the (weight, activation) bit-width of layer ``i``.
    Returns records in site order ``layer0.weight, layer0.act, layer1.weight, ...``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    acts = collect_activations(model, calib.xs, calib.ts)
    kinds = {c.layer_id: c.kind for c in classify_layers(model)}
    records = []
    for i, layer in enumerate(model.layers):
        wb, ab = bits[i]
        wid, aid = f"layer{i}.weight", f"layer{i}.act"
        records.append(calibrate_site(layer.weight, wb, "weight", kinds[i], False, maxval0.get(wid), wid, n_maxvals))
        samples = subsample(acts[aid], max_samples, rng)
        records.append(calibrate_site(samples, ab, "activation", kinds[i], mixup, maxval0.get(aid), aid, n_maxvals))
    return records


def quantized_model(model, records: list[SiteRecord]):
    """Frozen quantized denoiser built from :func:`calibrate_model` records."""
    params = {r.site_id: r.params for r in records}
    n = len(model.layers)
    return QuantizedDenoiser(model, [params[f"layer{i}.weight"] for i in range(n)],
                             [params[f"layer{i}.act"] for i in range(n)])
