"""Ground-truth states and synthetic PMU / SCADA observations."""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .network import kappa

__all__ = [
    "TrueState",
    "MeasurementSet",
    "perturb_state",
    "draw_phase_errors",
    "exact_pmu",
    "scada_layout",
    "scada_function",
    "scada_jacobian",
    "scada_measure",
    "simulate",
]


@dataclass(frozen=True)
class TrueState:
    """Polar bus voltages in ascending bus-id order."""
    magnitude: np.ndarray
    angle: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.magnitude) <= 0):
            raise ValueError("voltage magnitudes must be positive")

    @property
    def rect(self):
        """(n, 2) array of [E^r, E^j] per bus."""
        return np.column_stack([self.magnitude * np.cos(self.angle),
                                self.magnitude * np.sin(self.angle)])

    @property
    def s(self):
        """Stacked rectangular state, length 2n."""
        return self.rect.reshape(-1)

    @property
    def xi(self):
        """Stacked polar state [A_1, phi_1, A_2, phi_2, ...]."""
        return np.column_stack([self.magnitude, self.angle]).reshape(-1)

    @property
    def complex(self):
        return self.magnitude * np.exp(1j * self.angle)

    @classmethod
    def from_case(cls, case):
        return cls(np.array([case.bus[i].vm for i in case.bus_ids]),
                   np.array([case.bus[i].va for i in case.bus_ids]))

    @classmethod
    def from_xi(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(-1, 2)
        return cls(xi[:, 0].copy(), xi[:, 1].copy())


@dataclass
class MeasurementSet:
    """PMU observations ``pmu[i] = z_i`` plus the SCADA vector ``zeta``.

    ``W`` is the diagonal of the SCADA noise covariance. JSON layout (see
    ``to_json``) is a flat object with keys ``pmu``, ``sigma``, ``zeta``,
    ``W`` and ``theta_true``; map keys are bus ids as strings.
    """
    pmu: dict
    sigma: dict
    zeta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    W: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta_true: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "pmu": {str(k): np.asarray(v).tolist() for k, v in sorted(self.pmu.items())},
            "sigma": {str(k): float(v) for k, v in sorted(self.sigma.items())},
            "zeta": np.asarray(self.zeta).tolist(),
            "W": np.asarray(self.W).tolist(),
            "theta_true": {str(k): float(v) for k, v in sorted(self.theta_true.items())},
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            pmu={int(k): np.array(v) for k, v in doc["pmu"].items()},
            sigma={int(k): float(v) for k, v in doc["sigma"].items()},
            zeta=np.array(doc["zeta"]),
            W=np.array(doc["W"]),
            theta_true={int(k): float(v) for k, v in doc["theta_true"].items()},
        )


def perturb_state(case, fraction, rng):
    """Scale each magnitude by (1+u) and shift each angle by u * max(|phi|, 0.1).

    Independent ``u ~ U(-fraction, fraction)`` per bus and per quantity.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    base = TrueState.from_case(case)
    n = case.n_bus
    if fraction == 0:
        return base
    u_mag = rng.uniform(-fraction, fraction, n)
    u_ang = rng.uniform(-fraction, fraction, n)
    return TrueState(base.magnitude * (1.0 + u_mag),
                     base.angle + u_ang * np.maximum(np.abs(base.angle), 0.1))


def draw_phase_errors(case, bound_rad, rng):
    """i.i.d. U(-bound, bound) sampling phase errors, one per PMU bus."""
    if bound_rad < 0:
        raise ValueError("bound must be non-negative")
    pmus = case.pmu_list
    if bound_rad == 0:
        return {i: 0.0 for i in pmus}
    draws = rng.uniform(-bound_rad, bound_rad, len(pmus))
    return {i: float(t) for i, t in zip(pmus, draws)}


def exact_pmu(case, state, theta, sigma, rng=None):
    """Nonlinear PMU observations with sampling phase error and noise.

    Voltage: ``A_i cos(theta_i + phi_i)``, ``A_i sin(theta_i + phi_i)``.
    Current toward neighbour j (ascending order), with rotated phasors
    ``E'_k = A_k exp(j(theta_i + phi_k))``::

        y^r = k1 Re E'_i - k2 Im E'_i - k3 Re E'_j + k4 Im E'_j
        y^j = k2 Re E'_i + k1 Im E'_i - k4 Re E'_j - k3 Im E'_j
    """
    missing = [i for i in case.pmu_buses if i not in theta or i not in sigma]
    if missing:
        raise KeyError(f"no phase error / noise level for PMU buses {sorted(missing)}")
    idx = case.index
    A, phi = state.magnitude, state.angle
    out = {}
    for i in case.pmu_list:
        th = theta[i]
        ai, pi_ = A[idx[i]], phi[idx[i]]
        er_i, ej_i = ai * math.cos(th + pi_), ai * math.sin(th + pi_)
        z = [er_i, ej_i]
        for j in case.adjacency[i]:
            kc = kappa(case.branch_between[(i, j)], case.bus[i])
            aj, pj = A[idx[j]], phi[idx[j]]
            er_j, ej_j = aj * math.cos(th + pj), aj * math.sin(th + pj)
            z.append(kc.k1 * er_i - kc.k2 * ej_i - kc.k3 * er_j + kc.k4 * ej_j)
            z.append(kc.k2 * er_i + kc.k1 * ej_i - kc.k4 * er_j - kc.k3 * ej_j)
        z = np.array(z)
        if sigma[i] > 0:
            if rng is None:
                raise ValueError("noisy PMU simulation needs an rng")
            z = z + rng.normal(0.0, sigma[i], z.size)
        out[i] = z
    return out


# --- SCADA --------------------------------------------------------------------

@dataclass(frozen=True)
class ScadaLayout:
    """Index bookkeeping for the SCADA measurement vector.

    Order: |V| per bus, P injections, Q injections, P flows per branch end,
    Q flows per branch end. Branch ends are listed as (from, to) then
    (to, from) for each branch in case order.
    """
    n_bus: int
    ends: tuple          # ((i_pos, j_pos, a, c), ...) per branch end
    ends_ids: tuple      # ((i, j), ...)
    shunt: np.ndarray

    @property
    def size(self):
        return 3 * self.n_bus + 2 * len(self.ends)

    def slices(self):
        n, m = self.n_bus, len(self.ends)
        return {"vm": slice(0, n), "p_inj": slice(n, 2 * n), "q_inj": slice(2 * n, 3 * n),
                "p_flow": slice(3 * n, 3 * n + m), "q_flow": slice(3 * n + m, 3 * n + 2 * m)}


def scada_layout(case):
    idx = case.index
    ends, ids = [], []
    for br in case.branches:
        y = complex(br.g, br.b)
        for i, j in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
            rho_ij, rho_ji, phi = br.ratios(i)
            a = rho_ij**2 * y
            c = rho_ij * rho_ji * np.exp(1j * phi) * y
            ends.append((idx[i], idx[j], a, c))
            ids.append((i, j))
    shunt = np.array([case.bus[i].shunt_b for i in case.bus_ids])
    return ScadaLayout(case.n_bus, tuple(ends), tuple(ids), shunt)


def _end_arrays(layout):
    ip = np.array([e[0] for e in layout.ends], dtype=int)
    jp = np.array([e[1] for e in layout.ends], dtype=int)
    a = np.array([e[2] for e in layout.ends], dtype=complex)
    c = np.array([e[3] for e in layout.ends], dtype=complex)
    return ip, jp, a, c


def scada_function(layout, xi):
    """g(xi): series flows S_ij = V_i conj(a V_i - c V_j); injections add -j B |V|^2."""
    xi = np.asarray(xi).reshape(-1, 2)
    A, phi = xi[:, 0], xi[:, 1]
    V = A * np.exp(1j * phi)
    ip, jp, a, c = _end_arrays(layout)
    S = V[ip] * np.conj(a * V[ip] - c * V[jp])
    inj = np.zeros(layout.n_bus, dtype=complex)
    np.add.at(inj, ip, S)
    inj -= 1j * layout.shunt * A**2
    return np.concatenate([A, inj.real, inj.imag, S.real, S.imag])


def scada_jacobian(layout, xi):
    """d g / d xi with xi = [A_1, phi_1, A_2, phi_2, ...]."""
    xi = np.asarray(xi).reshape(-1, 2)
    A, phi = xi[:, 0], xi[:, 1]
    n = layout.n_bus
    ip, jp, a, c = _end_arrays(layout)
    m = ip.size
    cc = np.conj(c)
    rot = np.exp(1j * (phi[ip] - phi[jp]))
    # complex partials of S_ij = conj(a) A_i^2 - conj(c) A_i A_j e^{j(phi_i - phi_j)}
    dA_i = 2 * np.conj(a) * A[ip] - cc * A[jp] * rot
    dA_j = -cc * A[ip] * rot
    dphi_i = -1j * cc * A[ip] * A[jp] * rot
    dphi_j = -dphi_i

    dS = np.zeros((m, 2 * n), dtype=complex)
    rows = np.arange(m)
    np.add.at(dS, (rows, 2 * ip), dA_i)
    np.add.at(dS, (rows, 2 * jp), dA_j)
    np.add.at(dS, (rows, 2 * ip + 1), dphi_i)
    np.add.at(dS, (rows, 2 * jp + 1), dphi_j)

    dInj = np.zeros((n, 2 * n), dtype=complex)
    np.add.at(dInj, ip, dS)
    dInj[np.arange(n), 2 * np.arange(n)] += -2j * layout.shunt * A

    dV = np.zeros((n, 2 * n))
    dV[np.arange(n), 2 * np.arange(n)] = 1.0
    return np.vstack([dV, dInj.real, dInj.imag, dS.real, dS.imag])


def scada_measure(case, state, noise_std, rng, layout=None):
    """Noisy SCADA vector and the diagonal of its covariance."""
    if not noise_std > 0:
        raise ValueError("noise_std must be positive")
    layout = layout or scada_layout(case)
    clean = scada_function(layout, state.xi)
    zeta = clean + rng.normal(0.0, noise_std, clean.size)
    return zeta, np.full(clean.size, noise_std**2)


def simulate(case, state, theta, sigma_pmu, sigma_scada, rng):
    """Full measurement set for one run; PMU draws precede SCADA draws."""
    sigma = {i: sigma_pmu for i in case.pmu_list}
    pmu = exact_pmu(case, state, theta, sigma, rng)
    zeta, W = scada_measure(case, state, sigma_scada, rng)
    return MeasurementSet(pmu, sigma, zeta, W, dict(theta))
