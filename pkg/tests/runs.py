"""Expensive simulation runs shared by several test modules (cached per session)."""
from functools import lru_cache

from stepwedge import run_scenario, table1_scenario


@lru_cache(maxsize=None)
def continuous_run():
    """Scenario C-I, I=32, J=5, K=50, 2000 replications."""
    sc = table1_scenario("C-I", 32, 5, 50, replications=2000)
    return sc, *run_scenario(sc)


@lru_cache(maxsize=None)
def binary_run():
    """Scenario B-I, I=16, J=5, K=50, p0=0.2, 1000 replications."""
    sc = table1_scenario("B-I", 16, 5, 50, p0=0.2, replications=1000)
    return sc, *run_scenario(sc)


@lru_cache(maxsize=None)
def sparse_run():
    """One cluster per sequence: B-I, I=8, J=9, K=10, p0=0.2, 2000 replications."""
    sc = table1_scenario("B-I", 8, 9, 10, p0=0.2, replications=2000, singular="pinv")
    return sc, *run_scenario(sc)
