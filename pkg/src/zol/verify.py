"""Self-contained oracle suite over random tabular MDPs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evalkit import tabular_return
from .mdporacle import (TabularReward, check_centered_reweighting, check_chi2_identity,
                        check_on_policy_flat, initial_pair_distribution, q_from_successor,
                        random_mdp, random_policy, verify_ratio_identity)

CHECKS = ("ratio_identity", "centered_return", "chi2_identity", "on_policy_flat", "q_two_route")


@dataclass
class CheckResult:
    name: str
    max_error: float = 0.0
    worst_instance: int = -1

    def update(self, err: float, instance: int) -> None:
        if err > self.max_error or self.worst_instance < 0:
            self.max_error = max(err, self.max_error)
            self.worst_instance = instance


@dataclass
class SuiteReport:
    seed: int
    n_instances: int
    tolerance: float
    checks: dict = field(default_factory=dict)
    gamma_zero: dict = field(default_factory=dict)

    def failures(self) -> list[tuple[str, CheckResult]]:
        out = [(name, c) for name, c in self.checks.items() if not c.max_error < self.tolerance]
        out += [("gamma0/" + name, c) for name, c in self.gamma_zero.items()
                if not c.max_error < self.tolerance]
        return out

    @property
    def passed(self) -> bool:
        return not self.failures()

    def lines(self) -> list[str]:
        rows = [f"oracle suite: {self.n_instances} random MDPs, seed {self.seed}, "
                f"tolerance {self.tolerance:.0e}"]
        for name, c in self.checks.items():
            rows.append(f"{name:16s} max_error {c.max_error:.3e}  (instance {c.worst_instance})")
        for name, c in self.gamma_zero.items():
            rows.append(f"gamma0/{name:9s} max_error {c.max_error:.3e}  (instance {c.worst_instance})")
        rows.append("PASS" if self.passed else "FAIL")
        return rows


def _instance(rng: np.random.Generator, max_states: int, max_actions: int, gamma=None):
    n_s = int(rng.integers(2, max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    g = float(rng.uniform(0.0, 0.95)) if gamma is None else gamma
    mdp = random_mdp(n_s, n_a, g, rng)
    pi = random_policy(n_s, n_a, rng)
    beta = random_policy(n_s, n_a, rng)
    reward = TabularReward(rng.normal(size=(n_s, n_a)))
    return mdp, pi, beta, reward


def instance_errors(mdp, pi, beta, reward) -> dict:
    flat_w, flat_j = check_on_policy_flat(mdp, beta, reward)
    q = q_from_successor(mdp, pi, reward)
    two_route = abs(tabular_return(mdp, pi, reward)
                    - (1.0 - mdp.gamma) * float(initial_pair_distribution(mdp, pi) @ q.ravel()))
    return {
        "ratio_identity": verify_ratio_identity(mdp, pi, beta),
        "centered_return": check_centered_reweighting(mdp, pi, beta, reward)[2],
        "chi2_identity": check_chi2_identity(mdp, pi, beta)[2],
        "on_policy_flat": max(flat_w, flat_j),
        "q_two_route": two_route,
    }


def run_suite(seed: int = 0, n_instances: int = 50, max_states: int = 20, max_actions: int = 4,
              tolerance: float = 1e-8) -> SuiteReport:
    """Every check over ``n_instances`` random MDPs, then the ratio identity again at gamma = 0."""
    rng = np.random.default_rng(seed)
    report = SuiteReport(seed, n_instances, tolerance, {n: CheckResult(n) for n in CHECKS})
    for i in range(n_instances):
        for name, err in instance_errors(*_instance(rng, max_states, max_actions)).items():
            report.checks[name].update(err, i)
    zero = CheckResult("ratio_identity")
    for i in range(n_instances):
        mdp, pi, beta, _ = _instance(rng, max_states, max_actions, gamma=0.0)
        zero.update(verify_ratio_identity(mdp, pi, beta), i)
    report.gamma_zero["ratio_identity"] = zero
    return report
