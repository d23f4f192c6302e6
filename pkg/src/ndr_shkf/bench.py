"""Monte-Carlo evaluation, metrics, ablations, scenarios and latency profiling."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import chaos
from . import kalman as kf
from . import policy as pol
from . import tensor as tn
from .errors import AllRunsDiverged, ConfigInvalid
from .filter import EkfFilter, NdrFilter, ShkfFilter

DIVERGENCE_THRESHOLD = 100.0

THRESHOLD = "threshold"
NON_FINITE = "non-finite"
GROUND_TRUTH = "ground-truth"


# --- metrics ----------------------------------------------------------------


def rmse_step(error) -> np.ndarray:
    """Spatial RMSE ``sqrt(e^T e / n_x)`` over the last axis."""
    e = np.asarray(error, dtype=float)
    return np.sqrt(np.mean(e * e, axis=-1))


@dataclass
class RunRecord:
    rmse: np.ndarray  # per-step RMSE, NaN after divergence
    diverged: bool = False
    cause: str | None = None
    step: int | None = None

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))


def detect_divergence(step_error: float, state=None, threshold: float = DIVERGENCE_THRESHOLD):
    """Return ``(diverged, cause)`` for one step."""
    if state is not None and not np.all(np.isfinite(state)):
        return True, NON_FINITE
    if not np.isfinite(step_error):
        return True, NON_FINITE
    if step_error > threshold:
        return True, THRESHOLD
    return False, None


def _valid(records) -> list[RunRecord]:
    good = [r for r in records if not r.diverged]
    if not good:
        raise AllRunsDiverged("every run diverged")
    return good


def armse(records) -> tuple[float, float]:
    """Mean and population std over non-diverged runs of the time-averaged RMSE."""
    vals = np.array([r.mean_rmse for r in _valid(records)])
    return float(vals.mean()), float(vals.std())


def armse_median(records) -> float:
    return float(np.median([r.mean_rmse for r in _valid(records)]))


def crmse(records, t: int | None = None):
    """Cumulative RMSE ``sqrt(sum of RMSE^2 over runs and steps <= t / (N t))``.

    With ``t=None`` the whole series ``t = 1..T`` is returned.
    """
    good = np.stack([r.rmse for r in _valid(records)])
    cum = np.cumsum(np.mean(good * good, axis=0))
    series = np.sqrt(cum / np.arange(1, cum.size + 1))
    if t is None:
        return series
    if t < 1:
        raise ValueError("t must be >= 1")
    return float(series[t - 1])


def divergence_rate(records) -> float:
    return float(np.mean([r.diverged for r in records])) if records else 0.0


# --- batched runner ---------------------------------------------------------


def run_batch(
    filt,
    x_hat0,
    P0,
    Z,
    truth,
    U=None,
    threshold: float = DIVERGENCE_THRESHOLD,
    error_dims=None,
    switch: Callable | None = None,
    dt=None,
):
    """Run one filter over a batch of measurement streams.

    ``Z`` is ``(B, T, n_z)`` and ``truth`` ``(B, T, n_x)``. Each run stops at
    its first divergence (threshold, non-finite or filter error); stopped runs
    are re-seeded on a placeholder so the batch arithmetic stays finite. The
    error is measured over ``error_dims`` (all state dims by default).
    ``switch(k)`` may return ``(filter, Z_k, U_k)`` overrides for step ``k``.
    Returns a list of :class:`RunRecord` and the ``(B, T, n_x)`` estimates.
    """
    Z = np.asarray(Z, dtype=float)
    truth = np.asarray(truth, dtype=float)
    B, T = Z.shape[:2]
    dims = slice(None) if error_dims is None else error_dims
    est = np.full(truth.shape[:2] + (np.asarray(x_hat0).shape[-1],), np.nan)
    rmse = np.full((B, T), np.nan)
    dead = np.zeros(B, dtype=bool)
    cause: list[str | None] = [None] * B
    stop = [None] * B
    with tn.lenient():
        state = filt.init(x_hat0, P0)
        for k in range(T):
            f, zk, uk = filt, Z[:, k], (None if U is None else U[:, k])
            if switch is not None:
                f, zk, uk = switch(k, filt, zk, uk)
            new = f.step(state, zk, uk, dt)
            fs = f.filter_state(new)
            x = fs.x.data[..., 0]
            Pd = np.diagonal(fs.P.data, axis1=-2, axis2=-1)
            err = rmse_step(x[:, dims] - truth[:, k, dims])
            nonfinite = ~np.isfinite(x).all(-1) | ~np.isfinite(Pd).all(-1) | ~np.isfinite(err)
            over = ~nonfinite & (err > threshold)
            for b in np.flatnonzero((nonfinite | over) & ~dead):
                cause[b] = NON_FINITE if nonfinite[b] else THRESHOLD
                stop[b] = k
            dead |= nonfinite | over
            rmse[:, k] = np.where(dead, np.nan, err)
            est[:, k] = np.where(dead[:, None], np.nan, x)
            if dead.any():
                anchor = np.where(np.isfinite(truth[:, k]), truth[:, k], 0.0)
                new = filt.reset(new, dead, anchor, np.eye(anchor.shape[-1]))
            state = new
    records = [RunRecord(rmse[b], bool(dead[b]), cause[b], stop[b]) for b in range(B)]
    return records, est


# --- chaos Monte-Carlo ------------------------------------------------------


@dataclass
class MethodResult:
    name: str
    records: list
    mean: float = float("nan")
    std: float = float("nan")
    median: float = float("nan")
    divergence: float = 0.0
    causes: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, name, records) -> "MethodResult":
        res = cls(name, records, divergence=divergence_rate(records))
        for r in records:
            if r.diverged:
                res.causes[r.cause] = res.causes.get(r.cause, 0) + 1
        try:
            res.mean, res.std = armse(records)
            res.median = armse_median(records)
        except AllRunsDiverged:
            pass
        return res

    def row(self) -> dict:
        return {
            "method": self.name,
            "mean": self.mean,
            "std": self.std,
            "median": self.median,
            "divergence_pct": 100.0 * self.divergence,
            "n_runs": len(self.records),
        }


def chaos_filters(model, policies: Mapping[str, NdrFilter] | None = None, bs=(0.95, 0.99)) -> dict:
    filters = {"EKF": EkfFilter(model)}
    for b in bs:
        f = ShkfFilter(model, b)
        filters[f.name] = f
    for name, f in (policies or {}).items():
        filters[name] = f
    return filters


def run_monte_carlo(
    filters: Mapping,
    system: str = chaos.LORENZ,
    n_runs: int = 200,
    T: int = 600,
    seed: int = 1234,
    noise: str | None = None,
    init_sd: float | None = None,
    chunk: int = 200,
    threshold: float = DIVERGENCE_THRESHOLD,
) -> dict[str, MethodResult]:
    """Evaluate every filter on the same ``n_runs`` episodes (common random numbers).

    ``noise`` defaults to the training profile for Lorenz and the test
    profile for Rossler. Episodes come from the evaluation split, disjoint
    from the training episodes. Ground-truth escapes are recorded as diverged with
    cause ``ground-truth`` for every filter alike.
    """
    params = chaos.ChaosParams(system=system)
    noise = noise or ("train" if system == chaos.LORENZ else "test")
    per_method: dict[str, list] = {name: [] for name in filters}
    for start in range(0, n_runs, chunk):
        ids = np.arange(start, min(n_runs, start + chunk))
        ep = chaos.make_episodes(params, ids, T, seed, noise, init_sd, split=chaos.EVAL_SPLIT)
        ok = np.flatnonzero(~ep.gt_diverged)
        sub = ep.subset(ok)
        for name, f in filters.items():
            recs = [None] * len(ids)
            for i in np.flatnonzero(ep.gt_diverged):
                recs[i] = RunRecord(np.full(T, np.nan), True, GROUND_TRUTH, int(ep.diverged_at[i]))
            if len(ok):
                got, _ = run_batch(f, sub.x_hat0, sub.P0, sub.measurements, sub.states, threshold=threshold)
                for i, r in zip(ok, got):
                    recs[i] = r
            per_method[name].extend(recs)
    return {name: MethodResult.from_records(name, recs) for name, recs in per_method.items()}


def results_table(results: Mapping[str, MethodResult], title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'method':<14} {'ARMSE mean':>11} {'std':>8} {'median':>8} {'div %':>7}")
    for r in results.values():
        lines.append(f"{r.name:<14} {r.mean:>11.4f} {r.std:>8.4f} {r.median:>8.4f} {100 * r.divergence:>7.2f}")
    lines.append("(std is the population standard deviation over non-diverged runs)")
    return "\n".join(lines)


def write_results_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_records_jsonl(path, results: Mapping[str, MethodResult], extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        for name, res in results.items():
            for i, r in enumerate(res.records):
                rec = {"method": name, "run": i, "diverged": r.diverged, "cause": r.cause,
                       "mean_rmse": None if r.diverged else r.mean_rmse, **(extra or {})}
                fh.write(json.dumps(rec) + "\n")


def write_crmse_csv(path, results: Mapping[str, MethodResult]) -> None:
    series = {}
    for name, res in results.items():
        try:
            series[name] = crmse(res.records)
        except AllRunsDiverged:
            continue
    names = list(series)
    T = max((len(s) for s in series.values()), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for t in range(T):
            w.writerow([t + 1, *(repr(float(series[n][t])) for n in names)])


# --- UAV scenarios ----------------------------------------------------------

BASELINE = "baseline"
TRANSIENT = "transient"
SENSOR_DENIED = "sensor-denied"
SCENARIOS = (BASELINE, TRANSIENT, SENSOR_DENIED)


@dataclass(frozen=True)
class ScenarioSpec:
    """A degradation scenario over a flight log; the window is in seconds."""

    kind: str = BASELINE
    start: float = 4.0
    end: float = 6.0
    factor: float = 2.0
    switch_model: bool = False

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigInvalid(f"unknown scenario {self.kind!r}")
        if not 0.0 <= self.start < self.end:
            raise ConfigInvalid("scenario window must satisfy 0 <= start < end")
        if self.kind == SENSOR_DENIED and not self.switch_model:
            object.__setattr__(self, "switch_model", True)

    @classmethod
    def named(cls, kind: str, **kw) -> "ScenarioSpec":
        return cls(kind=kind, **kw)

    def window(self, dt: float, T: int) -> tuple[int, int]:
        a, b = int(round(self.start / dt)), int(round(self.end / dt))
        if b > T:
            raise ConfigInvalid(f"scenario window ends at step {b} but the log has {T} steps")
        return a, b

    def noise_scale(self, dt: float, T: int) -> np.ndarray:
        """Per-step multiplier of the measurement-noise standard deviation."""
        scale = np.ones(T)
        if self.kind == TRANSIENT:
            a, b = self.window(dt, T)
            scale[a:b] = np.sqrt(self.factor)
        return scale


def uav_filters(model, policy: NdrFilter | None = None, bs=(0.995, 0.999)) -> dict:
    filters = chaos_filters(model, None, bs)
    if policy is not None:
        filters[policy.name] = policy
    return filters


@dataclass
class ScenarioData:
    """Degraded streams for a batch of flight-log realizations, aligned for filtering.

    Step ``k`` predicts with ``U[:, k]`` (the input sample before ``t_k``) and
    updates with ``Z[:, k]``; ``truth[:, k]`` is the state at ``t_k``.
    """

    x_hat0: np.ndarray
    Z: np.ndarray  # pose
    U: np.ndarray  # degraded IMU driving the kinematic model
    imu_obs: np.ndarray  # degraded IMU as an observation (model switch)
    delta: np.ndarray  # motor commands driving the dynamic model
    truth: np.ndarray
    window: tuple
    dt: float


def scenario_data(spec: ScenarioSpec, logs, seed: int = 0, n_seeds: int = 1, drcfg=None) -> ScenarioData:
    """Degrade every log ``n_seeds`` times with independent draws (common across filters)."""
    from . import uav

    drcfg = drcfg or uav.DegradationConfig()
    lengths = {len(log) for log in logs}
    if len(lengths) != 1:
        raise ConfigInvalid("scenario logs must share one length")
    T = lengths.pop()
    dt = logs[0].dt
    window = spec.window(dt, T)
    scale = spec.noise_scale(dt, T)
    x0, Z, U, IMU, D, X = [], [], [], [], [], []
    for i, log in enumerate(logs):
        for s in range(n_seeds):
            rng = np.random.default_rng(np.random.SeedSequence([seed, 13, i, s]))
            z, u = uav.degrade_uav_signals(log.pose, log.imu, rng, drcfg.sample(rng), z_scale=scale, dt=dt)
            x0.append(uav.initial_estimate(log.pose[0]))
            Z.append(z[1:])
            U.append(u[:-1])
            IMU.append(u[1:])
            D.append(log.delta[:-1])
            X.append(log.states[1:])
    a, b = window
    return ScenarioData(np.stack(x0), np.stack(Z), np.stack(U), np.stack(IMU), np.stack(D), np.stack(X),
                        (max(a - 1, 0), max(b - 1, 0)), dt)


def run_scenario(spec: ScenarioSpec, filters: Mapping, logs, seed: int = 0, n_seeds: int = 1,
                 drcfg=None, threshold: float = DIVERGENCE_THRESHOLD, data: ScenarioData | None = None):
    """Position RMSE of every filter on the degraded logs.

    Baseline and transient runs use the kinematic formulation throughout.
    In the sensor-denied window each filter switches to the dynamic
    formulation (motor commands in, IMU readings observed), carrying its
    estimate, covariance and noise statistics across, and no pose
    measurement is consumed. Returns ``{name: MethodResult}``.
    """
    from . import uav

    data = data or scenario_data(spec, logs, seed, n_seeds, drcfg)
    a, b = data.window
    P0 = np.diag(uav.P0_DIAG)
    out = {}
    for name, f in filters.items():
        switch = None
        if spec.switch_model:
            dyn = f.with_model(uav.DynamicModel(f.model.params, f.model.dt))

            def switch(k, filt, zk, uk, dyn=dyn):
                if a <= k < b:
                    return dyn, data.imu_obs[:, k], data.delta[:, k]
                return filt, zk, uk

        recs, _ = run_batch(f, data.x_hat0, P0, data.Z, data.truth, data.U, threshold,
                            error_dims=slice(0, 3), switch=switch)
        out[name] = MethodResult.from_records(name, recs)
    return out


# --- latency ----------------------------------------------------------------


def profile_latency(filters: Mapping, n_steps: int = 10_000, warmup: int = 200, z=None, u=None, x0=None, P0=None) -> dict:
    """Median wall time of one filter step in microseconds, per filter.

    Filters are stepped in lockstep on a single trajectory so that machine
    load affects all of them alike.
    """
    first = next(iter(filters.values()))
    model = first.model
    x0 = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float)
    P0 = np.eye(model.n_x) if P0 is None else P0
    z = model.h(x0, u) if z is None else z
    states = {name: f.init(x0, P0) for name, f in filters.items()}
    times = {name: np.empty(n_steps) for name in filters}
    clock = time.perf_counter
    for i in range(warmup + n_steps):
        for name, f in filters.items():
            t0 = clock()
            states[name] = f.step(states[name], z, u)
            if i >= warmup:
                times[name][i - warmup] = clock() - t0
    return {name: float(np.median(t) * 1e6) for name, t in times.items()}


def uav_latency(depth: int = 3, d_h: int = 32, n_steps: int = 10_000, seed: int = 0) -> dict:
    """EKF and NDR per-step latency at UAV dimensions, hovering."""
    from . import uav

    model = uav.KinematicModel()
    arch = pol.PolicyArch.uav(depth, pol.FeatureConfig())
    if d_h != arch.d_h:
        arch = replace(arch, d_h=d_h)
    w = pol.init_weights(arch, np.random.default_rng(seed))
    x0 = uav.initial_estimate(np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))
    u = np.array([0.0, 0.0, uav.QdroneParams().g, 0.0, 0.0, 0.0])
    P0 = np.diag(uav.P0_DIAG)
    t = profile_latency({"ekf": EkfFilter(model), "ndr": NdrFilter(model, w, arch)}, n_steps, x0=x0, u=u, P0=P0)
    return {"ekf_us": t["ekf"], "ndr_us": t["ndr"], "ratio": t["ndr"] / t["ekf"], "n_steps": n_steps,
            "depth": depth, "d_h": d_h}


# --- policy diagnostics -----------------------------------------------------


def d_sensitivity(weights, arch, y, hidden=None, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian ``dd/dy`` of one policy step, shape ``(out_dim, feature_dim)``.

    A diagnostic of which input channels drive each adaptation rate.
    """
    w = pol.as_tensors(weights)
    y = np.asarray(y, dtype=float).reshape(-1)
    hidden = pol.zero_state(arch, ()) if hidden is None else hidden

    def d_of(v):
        return pol.policy_forward(w, arch, v[:, None], hidden, decode=False).d.data[:, 0]

    J = np.empty((arch.out_dim, y.size))
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = step
        J[:, j] = (d_of(y + e) - d_of(y - e)) / (2 * step)
    return J


# --- ablations --------------------------------------------------------------

ABLATION_AXES = {
    "depth": (1, 3, 5),
    "lambda_aux": (1.0, 0.1, 0.01, 0.0),
    "features": (pol.WHITENED, pol.RAW, pol.WHITENED_NO_LOG, pol.NIS),
}


@dataclass
class AblationRow:
    axis: str
    value: object
    domain: str
    mean: float
    std: float
    median: float
    divergence: float
    seeds: int

    def row(self) -> dict:
        return {"axis": self.axis, "value": self.value, "domain": self.domain, "mean": self.mean,
                "std": self.std, "median": self.median, "divergence_pct": 100.0 * self.divergence,
                "n_seeds": self.seeds}


def run_ablation(axis: str, train_cfg=None, values=None, n_seeds: int = 1, n_runs: int = 200, T: int = 600,
                 eval_seed: int = 1234, progress: Callable | None = None) -> list[AblationRow]:
    """Train one policy per (value, seed) and evaluate on both chaotic systems.

    Per variant, the mean/std/median are taken over the per-seed ARMSE means
    and divergence is pooled over all trajectories of all seeds.
    """
    from . import train as tr

    if axis not in ABLATION_AXES:
        raise ConfigInvalid(f"unknown ablation axis {axis!r}")
    base = train_cfg or tr.TrainConfig()
    rows = []
    for value in values if values is not None else ABLATION_AXES[axis]:
        per_domain: dict[str, list] = {chaos.LORENZ: [], chaos.ROSSLER: []}
        div: dict[str, list] = {chaos.LORENZ: [], chaos.ROSSLER: []}
        for s in range(n_seeds):
            cfg = replace(base, **{axis: value, "seed": base.seed + s})
            res = tr.train(cfg)
            for system in per_domain:
                model = kf.ChaosModel(chaos.ChaosParams(system=system))
                f = NdrFilter(model, res.weights, res.arch, res.features)
                mr = run_monte_carlo({"NDR": f}, system, n_runs, T, eval_seed)["NDR"]
                per_domain[system].append(mr.mean)
                div[system].extend(r.diverged for r in mr.records)
        for system, vals in per_domain.items():
            v = np.asarray(vals, dtype=float)
            ok = v[np.isfinite(v)]
            rows.append(AblationRow(axis, value, system,
                                    float(ok.mean()) if ok.size else float("nan"),
                                    float(ok.std()) if ok.size else float("nan"),
                                    float(np.median(ok)) if ok.size else float("nan"),
                                    float(np.mean(div[system])), n_seeds))
            if progress:
                progress(rows[-1].row())
    return rows
