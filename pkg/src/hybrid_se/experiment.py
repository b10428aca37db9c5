"""Monte-Carlo experiment loop and metric aggregation.

One run: perturb the base state, draw phase errors, simulate PMU and SCADA
data, run the SCADA estimator to get the prior, then every requested
algorithm. Each algorithm reports ``iters + 1`` rows: iteration 0 is the
prior and the last value is carried forward once an algorithm converges.

Algorithms
  ``wls``            WLS with the true phase errors (benchmark)
  ``wls-oblivious``  WLS assuming zero phase error
  ``cvi``            centralized variational inference
  ``am``             alternating maximisation
  ``dvi``            distributed mean-field inference; iteration 1 is the
                     initial exchange, every later iteration one colour group
"""
import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .centralized import am_estimate, cvi_run, stack_model, uniform_phase_prior, wls_estimate
from .distributed import run_algorithm1
from .measurement import draw_phase_errors, perturb_state, simulate
from .network import CaseError, bundled_case, distance2_coloring, load_case
from .scada import flat_start, irwls_estimate, polar_to_rect

__all__ = [
    "ALGORITHMS",
    "ConfigError",
    "ExperimentConfig",
    "MetricsRecord",
    "load_experiment_case",
    "run_experiment",
    "run_single",
    "write_records",
    "summarize",
    "write_summary",
    "CSV_HEADER",
]

ALGORITHMS = ("wls", "wls-oblivious", "cvi", "am", "dvi")
PHASE_AWARE = {"cvi", "am", "dvi"}
CSV_HEADER = ("run", "algo", "iter", "state_mse", "phase_mse", "elbo", "wall_ms")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    case: str = "ieee14"
    pmu_buses: tuple = None          # None keeps the placement stored in the case
    algorithms: tuple = ("wls", "wls-oblivious", "cvi", "am", "dvi")
    runs: int = 1000
    max_iter: int = 50
    sigma_pmu: float = 1e-2
    sigma_scada: float = 1e-2
    theta_bound_deg: float = 6.0
    perturb_fraction: float = 0.1
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"unknown algorithms {unknown}; choose from {list(ALGORITHMS)}")
        if not self.algorithms:
            raise ConfigError("no algorithms selected")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not (self.sigma_pmu > 0 and self.sigma_scada > 0):
            raise ConfigError("noise levels must be positive")
        if not self.theta_bound_deg >= 0:
            raise ConfigError("theta_bound_deg must be >= 0")
        if not 0 <= self.perturb_fraction < 1:
            raise ConfigError("perturb_fraction must lie in [0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def theta_bound(self):
        return math.radians(self.theta_bound_deg)


@dataclass(frozen=True)
class MetricsRecord:
    run: int
    algo: str
    iter: int
    state_mse: float
    phase_mse: float = None
    elbo: float = None
    wall_ms: float = None


def load_experiment_case(cfg):
    """Bundled name or JSON path, with the configured PMU placement applied."""
    if cfg.case.endswith(".json"):
        case = load_case(cfg.case)
    else:
        try:
            case = bundled_case(cfg.case)
        except FileNotFoundError as exc:
            raise CaseError(f"no bundled case named {cfg.case!r}") from exc
    if cfg.pmu_buses is not None:
        case = case.with_pmus(cfg.pmu_buses)
    return case


def _pad(values, n):
    """Carry the last value forward to length n (truncate if longer)."""
    values = list(values[:n])
    return values + [values[-1]] * (n - len(values))


def _state_mse(s, truth):
    d = np.asarray(s) - truth
    return float(d @ d) / d.size


def _phase_mse(est, theta):
    if not theta:
        return 0.0
    return float(np.mean([(est[i] - theta[i]) ** 2 for i in theta]))


def _series(algo, case, model, prior, prior_theta, theta, truth, cfg):
    """(state_mse, phase_mse, elbo) per iteration, length max_iter + 1."""
    n = cfg.max_iter + 1
    prior_phase = {i: prior_theta[i].mean() for i in case.pmu_list}
    if algo in ("wls", "wls-oblivious"):
        mu, _ = wls_estimate(model, prior, theta if algo == "wls" else None)
        state = [_state_mse(prior.s_hat, truth)] + [_state_mse(mu, truth)] * (n - 1)
        return state, [None] * n, [None] * n
    if algo == "cvi":
        post = cvi_run(model, prior, prior_theta, max_iter=cfg.max_iter)
        state = [_state_mse(r["mu"], truth) for r in post.trace]
        phase = [_phase_mse({i: b.mean for i, b in r["phase"].items()}, theta)
                 for r in post.trace]
        elbo = [r["elbo"] for r in post.trace]
        return _pad(state, n), _pad(phase, n), _pad(elbo, n)
    if algo == "am":
        res = am_estimate(model, prior, prior_theta, max_iter=cfg.max_iter)
        state = [_state_mse(r["mu"], truth) for r in res.trace]
        phase = [_phase_mse(r["theta"], theta) for r in res.trace]
        return _pad(state, n), _pad(phase, n), [None] * n
    if algo == "dvi":
        coloring = distance2_coloring(case)
        groups = sum(1 for g in coloring.groups() if g)
        rounds = max(1, math.ceil((cfg.max_iter - 1) / groups))
        res = run_algorithm1(case, prior, model_pmu(model), model.sigma, prior_theta,
                             coloring, max_rounds=rounds, tol=1e-8)
        state = [_state_mse(prior.s_hat, truth)]
        phase = [_phase_mse(prior_phase, theta)]
        elbo = [None]
        phase_now = dict(prior_phase)
        for step in res.steps:
            state.append(_state_mse(step["mu"], truth))
            phase_now.update(step.get("phase", {}))
            phase.append(_phase_mse(phase_now, theta))
            elbo.append(step.get("elbo"))
        return _pad(state, n), _pad(phase, n), _pad(elbo, n)
    raise ConfigError(f"unknown algorithm {algo!r}")


def model_pmu(model):
    return {i: model.z[model.rows[i]] for i in model.pmu_buses}


def run_single(cfg, case, r):
    """All records of run ``r``; estimator failures give NaN rows."""
    rng = np.random.default_rng(cfg.seed ^ r)
    state = perturb_state(case, cfg.perturb_fraction, rng)
    theta = draw_phase_errors(case, cfg.theta_bound, rng)
    meas = simulate(case, state, theta, cfg.sigma_pmu, cfg.sigma_scada, rng)
    truth = state.s
    n = cfg.max_iter + 1
    try:
        ref = state.angle[0]
        pe = irwls_estimate(case, meas.zeta, meas.W, init=flat_start(case, ref))
        prior = polar_to_rect(pe)
        model = stack_model(case, meas.pmu, meas.sigma)
        prior_theta = uniform_phase_prior(case.pmu_list, cfg.theta_bound)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError):
        prior = None
    out = []
    for algo in cfg.algorithms:
        t0 = time.perf_counter()
        try:
            if prior is None:
                raise RuntimeError("SCADA stage failed")
            state_m, phase_m, elbo = _series(algo, case, model, prior, prior_theta,
                                             theta, truth, cfg)
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError):
            state_m = [math.nan] * n
            phase_m = [math.nan if algo in PHASE_AWARE else None] * n
            elbo = [None] * n
        wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
        for k in range(n):
            out.append(MetricsRecord(r, algo, k, state_m[k], phase_m[k], elbo[k],
                                     wall if k == n - 1 else None))
    return out


def _run_chunk(args):
    cfg, runs = args
    case = load_experiment_case(cfg)
    return [rec for r in runs for rec in run_single(cfg, case, r)]


def run_experiment(cfg, workers=1):
    """Records ordered by (run, algorithm order in cfg, iteration)."""
    case = load_experiment_case(cfg)
    if workers <= 1:
        for r in range(cfg.runs):
            yield from run_single(cfg, case, r)
        return
    chunks = [(cfg, list(range(k, cfg.runs, workers))) for k in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        records = [rec for part in pool.map(_run_chunk, chunks) for rec in part]
    order = {a: k for k, a in enumerate(cfg.algorithms)}
    records.sort(key=lambda x: (x.run, order[x.algo], x.iter))
    yield from records


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_records(records, fh, fmt="csv"):
    """CSV with ``CSV_HEADER`` or JSON lines; floats written with repr."""
    if fmt == "csv":
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in records:
            w.writerow([_fmt(getattr(rec, k)) for k in CSV_HEADER])
    elif fmt == "jsonl":
        for rec in records:
            d = asdict(rec)
            d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}
            fh.write(json.dumps(d) + "\n")
    else:
        raise ConfigError(f"unknown format {fmt!r}")


@dataclass(frozen=True)
class SummaryRow:
    algo: str
    iter: int
    n: int
    state_mse: float
    state_se: float
    phase_mse: float = None
    phase_se: float = None
    elbo: float = None
    elbo_se: float = None


def _mean_se(values):
    vals = np.array([v for v in values if v is not None and not math.isnan(v)], dtype=float)
    if vals.size == 0:
        return None, None
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


def summarize(records):
    """Mean and standard error across runs per (algorithm, iteration)."""
    groups, order = {}, []
    for rec in records:
        key = (rec.algo, rec.iter)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)
    rows = []
    for algo, it in order:
        recs = groups[(algo, it)]
        n = sum(1 for r in recs if not math.isnan(r.state_mse))
        sm, ss = _mean_se([r.state_mse for r in recs])
        pm, ps = _mean_se([r.phase_mse for r in recs])
        em, es = _mean_se([r.elbo for r in recs])
        rows.append(SummaryRow(algo, it, n, sm, ss, pm, ps, em, es))
    return rows


SUMMARY_HEADER = ("algo", "iter", "n", "state_mse", "state_se", "phase_mse", "phase_se",
                  "elbo", "elbo_se")


def write_summary(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for row in rows:
        w.writerow([_fmt(getattr(row, k)) for k in SUMMARY_HEADER])


def records_to_csv(records):
    buf = io.StringIO()
    write_records(records, buf)
    return buf.getvalue()
