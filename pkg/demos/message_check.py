"""Compare one distributed message with its Monte-Carlo expectation.

The message a PMU bus sends about a neighbour's state is the quadratic part
of the expected log-likelihood; the oracle estimates the same coefficients
by sampling the phase error and the other neighbours' states.
"""
import dataclasses

import numpy as np

from hybrid_se.centralized import PhaseBelief, uniform_phase_prior
from hybrid_se.distributed import StateBelief, compute_message, initial_nodes
from hybrid_se.measurement import TrueState, exact_pmu
from hybrid_se.network import bundled_case
from hybrid_se.oracle import mc_loglik_quadratic
from hybrid_se.scada import RectPrior
from hybrid_se.truncnorm import TruncatedGaussian


def main():
    rng = np.random.default_rng(0)
    case = bundled_case("ieee14")
    st = TrueState.from_case(case)
    j = case.pmu_list[0]
    sigma = 1e-2
    z = exact_pmu(case, st, {i: 0.03 for i in case.pmu_list},
                  {i: sigma for i in case.pmu_list}, rng)
    prior = RectPrior(st.s, 1e-4 * np.eye(st.s.size))
    nodes = initial_nodes(case, prior, z, {i: sigma for i in case.pmu_list},
                          uniform_phase_prior(case.pmu_list, np.radians(6)))
    beliefs = {i: StateBelief(st.rect[case.index[i]], 1e-4 * np.eye(2))
               for i in nodes[j].neighbors}
    dist = TruncatedGaussian(-np.radians(6), np.radians(6), 0.03, 1e-4)
    node = dataclasses.replace(nodes[j], cache=beliefs, phase=PhaseBelief.of(dist))
    lm = node.local
    for r in node.neighbors:
        msg = compute_message(node, r)
        fit = mc_loglik_quadratic(r, lm.z, lm.H, lm.G, sigma, lm.neighbors,
                                  {i: (b.mu, b.P) for i, b in beliefs.items()},
                                  dist, 200_000, rng)
        dev = np.abs(msg.info - fit.info) / fit.info_se
        print(f"bus {j} -> bus {r}: information {np.round(msg.info, 2)}, "
              f"MC {np.round(fit.info, 2)}, deviation {dev.max():.2f} SE")


if __name__ == "__main__":
    main()
