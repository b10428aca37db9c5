"""Shared instance builders for the test-suite."""
import math
from dataclasses import dataclass

import numpy as np

from hybrid_se.centralized import stack_model, uniform_phase_prior
from hybrid_se.measurement import draw_phase_errors, perturb_state, simulate
from hybrid_se.network import parse_case
from hybrid_se.scada import flat_start, irwls_estimate, polar_to_rect

BOUND = 6 * math.pi / 180


@dataclass
class Instance:
    case: object
    state: object
    theta: dict
    meas: object
    prior: object
    model: object
    prior_theta: dict


def make_instance(case, seed, bound=BOUND, sigma=1e-2, zero_theta=False, prior_bound=None):
    """Simulated data plus SCADA prior, following the experiment protocol."""
    rng = np.random.default_rng(seed)
    state = perturb_state(case, 0.1, rng)
    theta = draw_phase_errors(case, 0.0 if zero_theta else bound, rng)
    meas = simulate(case, state, theta, sigma, sigma, rng)
    pe = irwls_estimate(case, meas.zeta, meas.W, init=flat_start(case, state.angle[0]))
    prior = polar_to_rect(pe)
    model = stack_model(case, meas.pmu, meas.sigma)
    pb = bound if prior_bound is None else prior_bound
    return Instance(case, state, theta, meas, prior, model, uniform_phase_prior(case.pmu_list, pb))


def two_bus_case(pmus=(1,), g=2.0, b=-8.0, tap=1.0, shift=0.0, shunt=(0.05, 0.02)):
    return parse_case({
        "name": "two-bus",
        "buses": [{"id": 1, "vm": 1.0, "va": 0.0, "shunt_b": shunt[0]},
                  {"id": 2, "vm": 0.98, "va": -0.05, "shunt_b": shunt[1]}],
        "branches": [{"from": 1, "to": 2, "g": g, "b": b, "tap": tap, "shift": shift}],
        "pmu_buses": list(pmus),
    })


def three_bus_case(pmus=(2,)):
    return parse_case({
        "name": "three-bus",
        "buses": [{"id": 1, "vm": 1.02, "va": 0.0, "shunt_b": 0.03},
                  {"id": 2, "vm": 1.0, "va": -0.04, "shunt_b": 0.01},
                  {"id": 3, "vm": 0.97, "va": -0.09, "shunt_b": 0.0}],
        "branches": [{"from": 1, "to": 2, "g": 1.5, "b": -6.0, "tap": 1.0, "shift": 0.0},
                     {"from": 2, "to": 3, "g": 1.1, "b": -4.5, "tap": 0.97, "shift": 0.01}],
        "pmu_buses": list(pmus),
    })


def mse(a, b):
    d = np.asarray(a) - np.asarray(b)
    return float(d @ d) / d.size
