import numpy as np
import pytest

from gatebias import dataset as dsm
from gatebias import surrogate
from gatebias.sae import SaeModel


def oracle_sae(gt, k=2, extra=0, seed=0):
    """Tied SAE whose first d features are the planted basis, plus optional random extras."""
    atoms = gt.basis
    if extra:
        rng = np.random.default_rng(seed)
        atoms = np.vstack([atoms, rng.standard_normal((extra, atoms.shape[1]))])
    return SaeModel.from_dictionary(atoms, k)


@pytest.fixture(scope="session")
def small_world():
    cfg = surrogate.SurrogateConfig(d=16, n_records=4000, seed=11)
    ds, gt = surrogate.generate(cfg)
    ds = dsm.split(ds, 0.5, seed=3)
    return cfg, ds, gt


@pytest.fixture(scope="session")
def small_oracle(small_world):
    _, _, gt = small_world
    return oracle_sae(gt, k=2)


CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = (title, passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {title} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {title} {detail}".rstrip())
