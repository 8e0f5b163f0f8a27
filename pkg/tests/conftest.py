import numpy as np
import pytest

from evpoi.geodata import Dataset, Poi, Station
from evpoi.synth import SynthConfig, synth_generate

ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def record(criterion: str, passed: bool | None, detail: str = "") -> None:
    """Remember an acceptance outcome for the end-of-session summary; ``None`` means not run."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE_RESULTS.append((criterion, status, detail))
    print(f"{status}  {criterion}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status}  {name}  {detail}")


def tiny_dataset(n: int = 12, seed: int = 0, types=("Restaurant", "Education")) -> Dataset:
    """A hand-sized random city: stations and POIs in a 2 km square."""
    rng = np.random.default_rng(seed)
    S = rng.uniform(0, 2, size=(n, 2))
    stations = tuple(Station(f"s{i}", (float(S[i, 0]), float(S[i, 1])), float(rng.uniform(0.1, 0.9)),
                             tuple(float(v) for v in rng.normal(size=4))) for i in range(n))
    pois = []
    for t in types:
        W = rng.uniform(0, 2, size=(5, 2))
        pois += [Poi(f"{t}{j}", (float(w[0]), float(w[1])), t) for j, w in enumerate(W)]
    return Dataset(stations, tuple(pois), (4.9, 52.37), tuple(types))


@pytest.fixture
def tiny():
    return tiny_dataset()


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_stations=60, poi_counts=(20, 20, 10, 15), bbox=(0, 0, 2, 2), seed=11)
    return synth_generate(cfg)
