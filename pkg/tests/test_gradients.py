"""Per-case finite-difference checks, a few instances each.

The full 20-instance sweep with its runtime budget lives in the acceptance suite.
"""

import pytest

from grad_suite import E2E_CASES, E2E_ENTRIES, E2E_RTOL, OP_CASES, OP_RTOL, run_case

SEEDS = (1000, 1001, 1002)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient(name):
    for seed in SEEDS:
        assert run_case(OP_CASES[name], seed, None) < OP_RTOL, (name, seed)


@pytest.mark.parametrize("name", sorted(E2E_CASES))
def test_module_loss_gradient(name):
    for seed in SEEDS[:2]:
        assert run_case(E2E_CASES[name], seed, E2E_ENTRIES[name]) < E2E_RTOL, (name, seed)
