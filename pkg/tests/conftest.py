import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)


@pytest.fixture
def report(capsys):
    """Print a [PASS]/[FAIL] line that bypasses pytest's capture."""
    def _report(name: str, ok: bool, detail: str = "") -> bool:
        tag = "PASS" if ok else "FAIL"
        with capsys.disabled():
            line = f"[{tag}] {name}"
            if detail:
                line += f" -- {detail}"
            print(line)
        return ok
    return _report


def draw_physical(rng, **overrides):
    """Random but valid microscopic parameter set (log-uniform couplings)."""
    from polgas import PhysicalParams

    def lu(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    fields = dict(
        n_atoms=int(rng.integers(10, 10**6)),
        n_photons=int(rng.integers(1, 5)),
        length=lu(1e-6, 1e-2),
        g13=lu(1e6, 1e10),
        g24=lu(1e6, 1e10),
        omega_c=lu(1e6, 1e10),
        gamma31=lu(1e5, 1e8),
        gamma32=lu(1e5, 1e8),
        gamma42=lu(1e5, 1e8),
        delta=-lu(1e7, 1e10),
        delta_int=lu(1e5, 1e9),
        delta_omega=lu(1e3, 1e7),
    )
    fields.update(overrides)
    return PhysicalParams(**fields)
