"""Shared fixtures: acceptance-criterion ledger and cached desk-scale fits.

The ledger prints one PASS/FAIL line per acceptance criterion in the
terminal summary so a full run ends with a readable scorecard.  Desk-scale
posterior fits are expensive (thousands of sweeps), so they are built once
per session and shared between the acceptance module and the prediction
tests; build wall time is recorded per fit and charged to whichever
criterion uses it, independent of test execution order.
"""

import time

import numpy as np
import pytest

CRITERIA = {
    1: "structured covariance ops match dense oracles on random instances",
    2: "160x160 lattice Laplacian density, row sums and build time",
    3: "slice/ESS/inverse-gamma samplers match closed-form moments",
    4: "log posteriors match dense-expression oracles for both models",
    5: "desk-scale replication: errors, flatness and trial-count ordering",
    6: "predictions match dense Gaussian conditioning and exactness limits",
    7: "basis-coefficient covariance matches diagonal lambda^2 law",
    8: "CLI simulate and fit are byte-identical under a repeated seed",
    9: "image-scale smoke run stays within structured memory bounds",
}

_results = {}


def record_criterion(num, ok, detail):
    _results[num] = (bool(ok), str(detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(CRITERIA):
        if num in _results:
            ok, detail = _results[num]
            tag = "PASS" if ok else "FAIL"
            terminalreporter.write_line(
                "[%s] criterion %d: %s  [%s]" % (tag, num, CRITERIA[num],
                                                 detail))
        else:
            terminalreporter.write_line(
                "[SKIP] criterion %d: %s  [not run]" % (num, CRITERIA[num]))


# ---------------------------------------------------------------------------
# desk-scale replication fits, built lazily and cached for the session
# ---------------------------------------------------------------------------

DESK_RUN = {"n_iter": 6000, "burn_in": 2000, "thin": 2}


def desk_prior(model):
    from stkron.inference import PriorConfig
    if model == "II":
        return PriorConfig(a=(1.0, 1.0, 1.0), b=(0.1, 1.0, 5.0),
                           m=(0.0, 0.0, 0.0), V=(1.0, 1.0, 1.0),
                           kappa=2.0, L=5, model="II")
    return PriorConfig(a=(1.0, 1.0, 1.0), b=(5.0, 10.0, 10.0),
                       m=(0.0, 0.0, 0.0), V=(0.1, 0.1, 0.01),
                       kappa=2.0, L=5, model="I")


class DeskCache:
    """Lazily fitted desk-scale chains keyed by (model, seed, K)."""

    def __init__(self):
        self._fits = {}
        self._data = {}
        self.seconds = {}

    def dataset(self, K, seed):
        key = (K, seed)
        if key not in self._data:
            from stkron.simulate import SimParams, generate
            self._data[key] = generate(SimParams(K=K, seed=seed),
                                       sub_I=5, sub_J=41)
        return self._data[key]

    def fit(self, model, seed, K):
        key = (model, seed, K)
        if key not in self._fits:
            from stkron.inference import fit
            ds = self.dataset(K, seed)
            run = dict(DESK_RUN, seed=seed)
            t0 = time.monotonic()
            self._fits[key] = fit(ds, desk_prior(model), run)
            self.seconds[key] = time.monotonic() - t0
        return self._fits[key]

    def truth(self, K, seed):
        from stkron.simulate import SimParams, TruthOracle
        ds = self.dataset(K, seed)
        return TruthOracle(SimParams(K=K, seed=seed), ds.space.points,
                           ds.time.times)


@pytest.fixture(scope="session")
def desk():
    return DeskCache()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
