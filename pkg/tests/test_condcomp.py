import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from balloc.condcomp import (
    DEFAULT_FAMILY,
    VariationalFamily,
    allocate,
    apply_sharing,
    cond_comp_account,
    hazard_from_tail,
    reverse_hazard_weights,
    step_dominating_pair,
    step_hazards,
    tail_bound_add,
    tail_bound_remove,
    _tau_core,
)
from balloc.mechanism import Schedule, StrategyMatrix, build_identity, mixture_means
from balloc.mc import TernaryLoss, mc_exceedance, ternary_loss_samples
from balloc.pld import ADD, REMOVE

from oracles import gaussian_profile_delta


def test_reverse_hazard_weights_cases():
    assert reverse_hazard_weights([1.0, 0.5]) == pytest.approx([0.5, 0.5])
    assert reverse_hazard_weights([1.0, 0.5, 0.2]) == pytest.approx([0.4, 0.4, 0.2])
    b = 6
    uniform = reverse_hazard_weights([1.0 / i for i in range(1, b + 1)])
    assert uniform == pytest.approx(np.full(b, 1.0 / b))
    with pytest.raises(ValueError):
        reverse_hazard_weights([1.0, 1.5])
    with pytest.raises(ValueError):
        reverse_hazard_weights([0.9, 0.5])
    with pytest.raises(ValueError):
        reverse_hazard_weights([1.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8), st.integers(0, 10**6))
def test_weights_sum_to_one_and_dominance(raw, seed):
    lam = np.array([1.0] + raw)
    w = reverse_hazard_weights(lam)
    assert abs(w.sum() - 1.0) < 1e-12
    # pointwise-larger hazards give stochastically larger weights:
    # the tail sums P(rank >= i) only grow
    rng = np.random.default_rng(seed)
    bigger = np.minimum(1.0, lam + rng.uniform(0.0, 0.5, lam.size))
    bigger[0] = 1.0
    w2 = reverse_hazard_weights(bigger)
    tail1 = np.cumsum(w[::-1])[::-1]
    tail2 = np.cumsum(w2[::-1])[::-1]
    assert np.all(tail2 >= tail1 - 1e-12)


def test_hazard_from_tail_values():
    assert hazard_from_tail(2, 0.0) == pytest.approx(0.5)
    assert hazard_from_tail(3, 0.0) == pytest.approx(1.0 / 3.0)
    assert hazard_from_tail(2, np.inf) == 0.0
    assert hazard_from_tail(2, -np.inf) == 1.0
    with pytest.raises(ValueError):
        hazard_from_tail(1, 0.0)


def test_tail_bound_add_single_component():
    beta = float(norm.cdf(-2.0))
    tau = tail_bound_add([np.zeros(3)], np.array([1.0, 0.0, 0.0]), 1.0, beta)
    assert tau == pytest.approx(-1.5, abs=1e-9)


def test_point_mass_member_pays_kl():
    # two distinct candidates; compare a point-mass member against uniform
    mus = [np.array([2.0, 0.0]), np.array([0.0, 2.0])]
    mu_i = np.array([0.0, 0.0])
    v = np.vstack(mus + [mu_i])
    h = v @ v.T
    beta = 1e-4
    point = np.array([[1.0, 0.0]])
    uniform = np.array([[0.5, 0.5]])
    z = float(norm.ppf(beta))
    tau_point = _tau_core(h, 2, None, 1.0, beta, _FixedFamily(point))
    tau_unif = _tau_core(h, 2, None, 1.0, beta, _FixedFamily(uniform))
    # point mass: nu = (0 - 4)/2 - log(2); uniform: nu = (0 - 4)/2 - 0
    assert tau_point == pytest.approx(-2.0 - math.log(2.0) + 2.0 * z, abs=1e-9)
    assert tau_unif == pytest.approx(-2.0 + math.sqrt(2.0) * z, abs=1e-9)
    assert tau_point - tau_unif == pytest.approx(
        -math.log(2.0) + (2.0 - math.sqrt(2.0)) * z, abs=1e-9
    )


class _FixedFamily:
    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=float)

    def members(self, sq_dists):
        return self.rows


def test_tail_bound_remove_single_reference_matches_analytic():
    beta = float(norm.cdf(-2.0))
    mus = [np.zeros(2)]
    mu_i = np.array([1.0, 0.0])
    tails = [np.array([0.5, 0.0])]
    tau = tail_bound_remove(mus, mu_i, tails, 1.0, beta)
    # single psi on the single candidate: nu = rho.(E[mu]-mu_i) + 0.5 = 0
    assert tau == pytest.approx(-2.0, abs=1e-9)


def test_tail_bound_remove_collapsed_mixture():
    # all reference components identical -> same as analytic inverse
    beta = 1e-3
    mus = [np.zeros(2)]
    mu_i = np.array([1.0, 0.0])
    tails = [np.array([0.2, 0.0])] * 4
    tau = tail_bound_remove(mus, mu_i, tails, 1.0, beta)
    nu = 0.2 * (-1.0) + 0.5
    assert tau == pytest.approx(nu + norm.ppf(beta), abs=1e-9)


def test_tail_bound_remove_cdf_hits_beta():
    rng = np.random.default_rng(9)
    for _ in range(5):
        dim = 6
        mus = [rng.normal(size=dim) for _ in range(2)]
        mu_i = rng.normal(size=dim)
        tails = [mu_i] + [rng.normal(size=dim) for _ in range(2)]
        sigma = float(rng.uniform(0.7, 1.5))
        beta = 10 ** float(rng.uniform(-8, -3))
        tau = tail_bound_remove(mus, mu_i, tails, sigma, beta, DEFAULT_FAMILY)
        # re-evaluate the variational mixture CDF at the returned tau for the
        # best member: it must sit in [beta - 1e-10, beta]
        best = -np.inf
        v = np.vstack(mus + [mu_i] + tails)
        h = v @ v.T
        i = len(mus)
        d = np.diag(h)[:i] + h[i, i] - 2 * h[i, :i]
        psis = DEFAULT_FAMILY.members(d)
        sig2 = sigma * sigma
        found = False
        for psi in psis:
            kl = float(np.sum(psi[psi > 0] * np.log(psi[psi > 0]))) + math.log(i)
            const = (h[i, i] - psi @ np.diag(h)[:i]) / (2 * sig2) - kl
            xi = math.sqrt((h[i, i] - 2 * psi @ h[i, :i] + psi @ h[:i, :i] @ psi) / sig2)
            nus = np.array(
                [(h[k, :i] @ psi - h[k, i]) / sig2 + const for k in range(i + 1, h.shape[0])]
            )
            cdf = float(np.mean(norm.cdf((tau - nus) / xi)))
            if cdf <= beta + 1e-15:
                found = found or cdf >= beta - 1e-10
        assert found


def test_hazard_monotone_in_beta():
    # larger beta -> larger tau -> smaller hazard bound
    rng = np.random.default_rng(13)
    mus = [rng.normal(size=4) for _ in range(3)]
    mu_i = rng.normal(size=4)
    taus = [tail_bound_add(mus, mu_i, 1.0, b) for b in (1e-8, 1e-5, 1e-3, 1e-1)]
    assert all(a <= b + 1e-12 for a, b in zip(taus, taus[1:]))
    lams = [hazard_from_tail(4, t) for t in taus]
    assert all(a >= b - 1e-12 for a, b in zip(lams, lams[1:]))


def test_variational_bound_is_valid_elbo():
    rng = np.random.default_rng(17)
    dim, i = 5, 4
    mus = [rng.normal(size=dim) for _ in range(i - 1)]
    mu_i = rng.normal(size=dim)
    sigma = 1.2
    v = np.vstack(mus + [mu_i])
    h = v @ v.T
    d = np.diag(h)[: i - 1] + h[i - 1, i - 1] - 2 * h[i - 1, : i - 1]
    psis = DEFAULT_FAMILY.members(d)
    xs = rng.normal(size=(10**4, dim)) * sigma
    mus_arr = np.array(mus)
    log_comp = (
        -((xs[:, None, :] - mus_arr[None]) ** 2).sum(axis=2) / (2 * sigma**2)
    )
    log_den = -((xs - mu_i) ** 2).sum(axis=1) / (2 * sigma**2)
    losses_ij = log_comp - log_den[:, None]
    true_loss = (
        np.log(np.exp(losses_ij - losses_ij.max(axis=1, keepdims=True)).mean(axis=1))
        + losses_ij.max(axis=1)
    )
    for psi in psis:
        kl = float(np.sum(psi[psi > 0] * np.log(psi[psi > 0] * (i - 1))))
        lower = losses_ij @ psi - kl
        assert np.all(true_loss >= lower - 1e-10)


def test_identical_components_are_excluded_but_bound_finite():
    mus = [np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    mu_i = np.array([1.0, 0.0])  # identical to the first two candidates
    tau = tail_bound_add(mus, mu_i, 1.0, 1e-4)
    assert np.isfinite(tau)
    fam = VariationalFamily((math.inf,))
    v = np.vstack(mus + [mu_i])
    h = v @ v.T
    d = np.diag(h)[:3] + h[3, 3] - 2 * h[3, :3]
    members = fam.members(d)
    # uniform-over-all member plus the identical-excluding member
    assert members.shape[0] == 2
    assert members[0] == pytest.approx([1 / 3, 1 / 3, 1 / 3])
    assert members[1] == pytest.approx([0.0, 0.0, 1.0])


def test_all_identical_candidates_give_zero_tau():
    mus = [np.array([1.0, 0.0])] * 3
    mu_i = np.array([1.0, 0.0])
    assert tail_bound_add(mus, mu_i, 1.0, 1e-6) == 0.0


def test_tail_bounds_statistically_sound_small():
    rng = np.random.default_rng(23)
    n_samples = 10**5
    for _ in range(4):
        dim = int(rng.integers(2, 8))
        i = int(rng.integers(2, 5))
        mus = [rng.normal(size=dim) for _ in range(i - 1)]
        mu_i = rng.normal(size=dim)
        sigma = float(rng.uniform(0.7, 1.5))
        beta = 1e-3
        tau_add = tail_bound_add(mus, mu_i, sigma, beta)
        loss_spec = TernaryLoss(np.array(mus), mu_i, np.zeros((1, dim)), sigma)
        freq = mc_exceedance(loss_spec, tau_add, n_samples, seed=int(rng.integers(2**31)))
        assert freq <= beta + 3 * math.sqrt(beta / n_samples)

        tails = [mu_i] + [rng.normal(size=dim) for _ in range(2)]
        tau_rem = tail_bound_remove(mus, mu_i, tails, sigma, beta)
        loss_spec = TernaryLoss(np.array(mus), mu_i, np.array(tails), sigma)
        freq = mc_exceedance(loss_spec, tau_rem, n_samples, seed=int(rng.integers(2**31)))
        assert freq <= beta + 3 * math.sqrt(beta / n_samples)


def test_allocate_strategies_and_ledger():
    sched = Schedule(4, 100)
    for strategy in ("union", "global-max", "hybrid"):
        plan = allocate(sched, 0.5e-5, strategy)
        assert sum(c * b for c, b in plan.bound_events()) <= 0.5e-5 * (1 + 1e-12)
    hybrid = allocate(sched, 0.5e-5, "hybrid")
    assert hybrid.beta(5, 3) == pytest.approx(0.5e-5 / (400 * 99))
    assert hybrid.beta(150, 3) == pytest.approx(0.5e-5 / (4 * 99))
    union = allocate(sched, 0.5e-5, "union")
    assert union.beta(150, 3) == pytest.approx(0.5e-5 / (400 * 99))
    gmax = allocate(sched, 0.5e-5, "global-max")
    assert gmax.beta(150, 3) == pytest.approx(0.5e-5 / 99)
    with pytest.raises(ValueError):
        allocate(sched, 0.0, "union")
    with pytest.raises(ValueError):
        allocate(sched, 1e-5, "bogus")


def test_hybrid_equals_union_for_single_epoch():
    sched = Schedule(1, 10)
    hybrid = allocate(sched, 1e-5, "hybrid")
    union = allocate(sched, 1e-5, "union")
    for n in (1, 5, 10):
        for i in (2, 7):
            assert hybrid.beta(n, i) == union.beta(n, i)
    assert hybrid.shared_blocks() == union.shared_blocks()


def test_allocate_b_equals_one():
    plan = allocate(Schedule(4, 1), 1e-5, "hybrid")
    assert plan.bound_events() == []
    with pytest.raises(ValueError):
        plan.beta(1, 2)


def test_apply_sharing_blocks():
    sched = Schedule(2, 3)
    plan = allocate(sched, 1e-5, "hybrid")
    hazards = np.arange(18, dtype=float).reshape(6, 3) + 1.0
    hazards /= hazards.max()
    shared = apply_sharing(hazards, plan)
    assert np.allclose(shared[:3], hazards[:3])  # epoch 1 untouched
    assert np.allclose(shared[3:], hazards[3:].max(axis=0))


def test_step_pair_first_step_is_uniform():
    means = mixture_means(build_identity(4), Schedule(1, 4))
    plan = allocate(Schedule(1, 4), 1e-5, "union")
    for direction in (REMOVE, ADD):
        pair = step_dominating_pair(means, 1, 1.0, plan, direction)
        assert pair.weights == pytest.approx(np.full(4, 0.25))
        assert pair.hazards == pytest.approx([1.0, 0.5, 1 / 3, 0.25])


def test_step_pair_b_equals_one():
    means = mixture_means(build_identity(3), Schedule(3, 1))
    plan = allocate(Schedule(3, 1), 1e-5, "hybrid")
    pair = step_dominating_pair(means, 2, 1.5, plan, REMOVE)
    assert pair.weights == pytest.approx([1.0])
    assert pair.sorted_scalar_means == pytest.approx([1.0])


def test_step_hazards_match_single_step_builder():
    means = mixture_means(build_identity(6), Schedule(2, 3))
    plan = allocate(Schedule(2, 3), 1e-4, "union")
    lam = step_hazards(means, 1.0, plan, REMOVE)
    for n in (1, 3, 4, 6):
        single = step_dominating_pair(means, n, 1.0, plan, REMOVE)
        assert lam[n - 1] == pytest.approx(single.hazards, rel=1e-10)


def test_cond_comp_single_batch_matches_gaussian_composition():
    # b = 1: per-step pairs are plain unit-shift Gaussians; the N-fold
    # composition is a Gaussian mechanism with sensitivity sqrt(N)
    n, sigma, eps, delta_e = 4, 2.0, 1.0, 1e-6
    delta = cond_comp_account(
        build_identity(n), Schedule(n, 1), sigma, eps, delta_e, grid_spacing=2e-4
    )
    oracle = gaussian_profile_delta(math.sqrt(n), sigma, eps) + delta_e
    assert delta >= oracle - 1e-12
    assert delta - oracle < 1e-4


def test_cond_comp_monotone_in_sigma_and_epsilon():
    strategy = build_identity(8)
    sched = Schedule(2, 4)
    deltas_eps = [cond_comp_account(strategy, sched, 1.0, e, 1e-6) for e in (0.5, 1.0, 2.0)]
    assert all(a >= b for a, b in zip(deltas_eps, deltas_eps[1:]))
    deltas_sig = [cond_comp_account(strategy, sched, s, 1.0, 1e-6) for s in (0.7, 1.0, 2.0)]
    assert all(a >= b for a, b in zip(deltas_sig, deltas_sig[1:]))


def test_cond_comp_zero_mechanism():
    zero = StrategyMatrix.from_dense(np.zeros((4, 4)))
    assert cond_comp_account(zero, Schedule(2, 2), 1.0, 0.5, 1e-6) == 0.0


def test_cond_comp_details_directions():
    delta, per = cond_comp_account(
        build_identity(6), Schedule(2, 3), 1.0, 1.0, 1e-6, return_details=True
    )
    assert set(per) == {REMOVE, ADD}
    assert delta == pytest.approx(min(1.0, max(per.values()) + 1e-6))
