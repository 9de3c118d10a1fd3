from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csemchan import optim, scatter, stochastic_env as se, swf
from csemchan.errors import ConfigError, ConvergenceError, DomainError


def projected_gradient(B, s, P_T, iters=20_000):
    """Accelerated projected gradient on the power ball; independent of the closed form."""
    L = 2 * np.linalg.norm(B, 2) ** 2
    x = np.zeros(B.shape[1], complex)
    y, t = x.copy(), 1.0
    r = np.sqrt(P_T)
    for _ in range(iters):
        g = 2 * B.conj().T @ (B @ y - s)
        xn = y - g / L
        nrm = np.linalg.norm(xn)
        if nrm > r:
            xn *= r / nrm
        tn = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = xn + (t - 1) / tn * (xn - x)
        x, t = xn, tn
    return x


def objective(B, j, s):
    return float(np.sum(np.abs(B @ j - s) ** 2))


def random_instance(rng, K, P):
    B = rng.normal(size=(K, P)) + 1j * rng.normal(size=(K, P))
    s = np.exp(2j * np.pi * rng.uniform(size=K))
    return B, s


def _users(op, K, seed):
    rng = np.random.default_rng(seed)
    pos = se.draw_users(op.geometry, K, rng, fill=0.9)
    return optim.make_users(pos, optim.random_symbols(K, rng))


# --------------------------------------------------------------------------- beam vectors


def test_beam_vector_radial_only(small_operator):
    users = optim.make_users([[4.2, 0.3, -0.1]], w=[1, 0, 0])
    b = optim.build_beam_vectors(users, small_operator, 20)
    u = small_operator.u(users[0].position, 20)[:, 0, 0]
    assert np.allclose(b[0], small_operator.sigma[:20] * u, rtol=0, atol=1e-15)


def test_beam_vector_linear_in_w(small_operator):
    pos = [[4.2, 0.3, -0.1]]
    w1, w2 = np.array([1, 2j, -1]), np.array([0.5, 0, 1 + 1j])
    b1 = optim.build_beam_vectors(optim.make_users(pos, w=w1), small_operator, 30)
    b2 = optim.build_beam_vectors(optim.make_users(pos, w=w2), small_operator, 30)
    b12 = optim.build_beam_vectors(optim.make_users(pos, w=w1 + w2), small_operator, 30)
    assert np.allclose(b12, b1 + b2, rtol=1e-14, atol=1e-16)


def test_beam_vector_cross_module(small_operator):
    op = small_operator
    users = _users(op, 5, 0)
    P = 24
    b = optim.build_beam_vectors(users, op, P)
    for k, u in enumerate(users):
        r, th, ph = swf.cart_to_sph(u.position[None])
        for p in range(1, P + 1):
            idx = swf.unflatten(p)
            comp = swf.eval_U(idx, (r[0], th[0], ph[0]), op.k).values.ravel() / op.norm_U[p - 1]
            assert b[k, p - 1] == pytest.approx(op.sigma[p - 1] * (u.w @ comp), rel=1e-12, abs=1e-18)


def test_beam_vector_range_checked(small_operator):
    with pytest.raises(ConfigError):
        optim.build_beam_vectors(_users(small_operator, 1, 0), small_operator, small_operator.P_max + 1)
    with pytest.raises(DomainError):
        optim.UserTarget([1, 0, 0], w=[0, 0, 0])


# --------------------------------------------------------------------------- P1


def test_p1_single_user_exact():
    rng = np.random.default_rng(0)
    B, s = random_instance(rng, 1, 6)
    r = optim.solve_p1(B, s, 1e12)
    assert r.err < 1e-10
    assert not r.constrained and r.lam == 0.0


def test_p1_power_constraint_active():
    rng = np.random.default_rng(1)
    for _ in range(10):
        B, s = random_instance(rng, 4, 12)
        B *= 1e-2
        r = optim.solve_p1(B, s, 1.0)
        assert r.constrained
        assert r.power <= 1.0
        assert r.power == pytest.approx(1.0, rel=1e-6)


def test_p1_kkt_and_projected_gradient_oracle():
    rng = np.random.default_rng(2)
    for i in range(20):
        B, s = random_instance(rng, 4, 12)
        P_T = 10.0 ** rng.uniform(-2, 1)
        r = optim.solve_p1(B, s, P_T)
        kkt = r.kkt(B, s)
        assert kkt["lambda"] >= 0
        assert kkt["stationarity"] < 1e-8
        assert kkt["slackness"] < 1e-6 * P_T
        assert kkt["primal"] == 0.0
        ref = projected_gradient(B, s, P_T)
        f, fr = objective(B, r.j, s), objective(B, ref, s)
        assert abs(f - fr) <= 1e-5 * max(1.0, fr)


def test_p1_underdetermined_warns_and_is_least_squares():
    rng = np.random.default_rng(3)
    B, s = random_instance(rng, 6, 3)
    with pytest.warns(UserWarning):
        r = optim.solve_p1(B, s, 1e9)
    ls = np.linalg.lstsq(B, s, rcond=None)[0]
    assert np.allclose(r.j, ls, atol=1e-10)


def test_p1_input_checks():
    with pytest.raises(DomainError):
        optim.solve_p1(np.ones((2, 3)), [1, 1], 0.0)
    with pytest.raises(DomainError):
        optim.solve_p1(np.array([[np.nan, 1.0]]), [1], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 2 * np.pi), st.floats(-2, 2))
def test_p1_global_phase_invariance(seed, alpha, logp):
    rng = np.random.default_rng(seed)
    B, s = random_instance(rng, 3, 7)
    a = optim.solve_p1(B, s, 10.0**logp)
    b = optim.solve_p1(B, s * np.exp(1j * alpha), 10.0**logp)
    assert np.allclose(np.abs(a.j), np.abs(b.j), rtol=1e-9, atol=1e-12)
    assert b.err == pytest.approx(a.err, rel=1e-9, abs=1e-14)


# --------------------------------------------------------------------------- signal error and P2


def _scene(op, scatterers, users):
    return se.Scene(op.geometry, tuple(scatterers), optim._positions(users), se.EnvParams())


def test_signal_error_trivial_cases(small_operator):
    users = _users(small_operator, 3, 4)
    assert optim.signal_error(np.zeros(20), users, small_operator) == 1.0
    B = optim.build_beam_vectors(users, small_operator, 20)
    j = optim.solve_p1(B, optim.symbols_of(users), 1e12).j
    assert optim.signal_error(j, users, small_operator) < 1e-20


def test_signal_error_matches_brute_force(small_operator):
    op = small_operator
    users = _users(op, 3, 5)
    scs = [scatter.Scatterer((5.3, 0.2, 0.0), 0.1, id=0), scatter.Scatterer((4.0, 0.3, 1.4), 0.08, id=1)]
    P = 30
    rng = np.random.default_rng(6)
    j = rng.normal(size=P) + 1j * rng.normal(size=P)
    resp = optim.ScatteringResponse.build(_scene(op, scs, users), users, op, P)
    pos = optim._positions(users)

    def incident(pts):
        return swf.radiate(j, pts, op).to_cartesian().values

    sol = scatter.solve_induced_currents(scs, incident, op.k, omega=op.omega, mu=op.mu)
    Es = scatter.scattered_field(sol, scs, pos, op.k, omega=op.omega, mu=op.mu).to_spherical().values
    E = swf.radiate(j, pos, op).values
    y = np.einsum("kc,kc->k", optim._weights(users), E + Es)
    s = optim.symbols_of(users)
    brute = np.sum(np.abs(y - s) ** 2) / np.sum(np.abs(s) ** 2)
    assert optim.signal_error(j, users, op, resp) == pytest.approx(brute, rel=1e-12)
    assert optim.signal_error(j, users, op) != pytest.approx(brute, rel=1e-6)


def test_p2_without_scatterers_equals_p1(small_operator):
    op = small_operator
    users = _users(op, 4, 7)
    r2 = optim.solve_p2(_scene(op, [], users), users, op, 12, 50.0)
    r1 = optim.solve_p1(optim.build_beam_vectors(users, op, 12), optim.symbols_of(users), 50.0)
    assert r2.iterations == 1 and r2.converged
    assert np.array_equal(r2.j, r1.j)


def test_p2_weak_scatterer_converges_fast(small_operator):
    op = small_operator
    users = _users(op, 3, 8)
    sc = scatter.Scatterer((4.0, 2.5, 0.0), 0.2 / op.k)
    r = optim.solve_p2(_scene(op, [sc], users), users, op, 12, 50.0, eps1=1e-3)
    assert r.converged and r.iterations <= 3


def test_p2_improves_on_scatter_blind_solution(small_operator):
    op = small_operator
    users = _users(op, 4, 9)
    scs = [scatter.Scatterer((5.2, 0.0, 0.3), 0.15, id=0), scatter.Scatterer((4.3, 1.25, -0.2), 0.12, id=1)]
    scene = _scene(op, scs, users)
    P, P_T = 16, 5.0
    r = optim.solve_p2(scene, users, op, P, P_T, eps1=1e-6, max_iter=50)
    assert r.converged and np.vdot(r.j, r.j).real <= P_T * (1 + 1e-9)
    resp = optim.ScatteringResponse.build(scene, users, op, P)
    assert r.err == pytest.approx(optim.signal_error(r.j, users, op, resp), rel=1e-10)
    assert r.err <= optim.signal_error(r.blind_j, users, op, resp)
    assert r.err < r.blind_err
    # the retargeting fixed point is not the scatter-aware optimum; the direct solve bounds it
    direct = optim.solve_p2(scene, users, op, P, P_T, method="direct", response=resp)
    ref = optim.solve_p1(optim.build_beam_vectors(users, op, P) + resp.L, optim.symbols_of(users), P_T)
    assert direct.err == pytest.approx(ref.err, rel=1e-12)
    assert direct.err <= r.err


def test_p2_non_convergence_carries_trace(small_operator):
    op = small_operator
    users = _users(op, 4, 9)
    scs = [scatter.Scatterer((5.2, 0.0, 0.3), 0.15, id=0)]
    with pytest.raises(ConvergenceError) as exc:
        optim.solve_p2(_scene(op, scs, users), users, op, 16, 5.0, eps1=1e-14, max_iter=2)
    assert len(exc.value.trace) == 3


# --------------------------------------------------------------------------- SVD order sweep


def test_sweep_err_non_increasing(small_operator):
    users = _users(small_operator, 5, 10)
    rows = optim.sweep_svd_order(users, small_operator, range(1, 31), 1e3)
    errs = [r.err for r in rows]
    assert all(b <= a * (1 + 1e-9) + 1e-15 for a, b in zip(errs, errs[1:]))
    assert [r.P for r in rows] == list(range(1, 31))


def test_sweep_sharp_drop_at_K_on_shell(shell_operator):
    rng = np.random.default_rng(11)
    K = 5
    users = optim.make_users(se.draw_users(shell_operator.geometry, K, rng), optim.random_symbols(K, rng))
    rows = {r.P: r for r in optim.sweep_svd_order(users, shell_operator, range(1, 3 * K + 1), 1e15)}
    assert rows[K + 2].err / rows[K - 1].err < 0.1
    peak = max(rows.values(), key=lambda r: r.power).P
    assert K - 1 <= peak <= K + 1


# --------------------------------------------------------------------------- water filling


def test_water_fill_single_and_equal_modes():
    a = optim.water_fill([0.7], 3.0, 2.0)
    assert a.power[0] == pytest.approx(3.0) and a.dof == 1
    assert a.capacity([0.7], 2.0) == pytest.approx(np.log2(1 + 0.49 * 3.0 / 2.0))
    b = optim.water_fill([0.4, 0.4], 5.0)
    assert b.power[0] == pytest.approx(b.power[1]) == pytest.approx(2.5)
    z = optim.water_fill([1.0, 2.0], 0.0)
    assert z.dof == 0 and np.all(z.power == 0)


def test_water_fill_grid_search_oracle():
    rng = np.random.default_rng(12)
    for _ in range(5):
        sig = rng.uniform(0.2, 2.0, 3)
        P_T, N = rng.uniform(0.5, 5), 1.0
        a = optim.water_fill(sig, P_T, N)
        g = np.linspace(0, P_T, 100)
        p1, p2 = np.meshgrid(g, g, indexing="ij")
        p3 = P_T - p1 - p2
        ok = p3 >= 0
        c = (np.log2(1 + sig[0] ** 2 * p1 / N) + np.log2(1 + sig[1] ** 2 * p2 / N)
             + np.log2(1 + sig[2] ** 2 * np.where(ok, p3, 0) / N))
        best = c[ok].max()
        cap = a.capacity(sig, N)
        assert best <= cap + 1e-12
        assert cap - best < 1e-3 * 10  # 100-point grid resolution
    # 10^4-point refinement on a fixed instance
    sig, P_T = np.array([1.3, 0.9, 0.35]), 2.0
    a = optim.water_fill(sig, P_T)
    g = np.linspace(0, P_T, 10_001)
    best = 0.0
    for p1 in np.linspace(0, P_T, 401):
        p2 = g[g <= P_T - p1]
        c = np.log2(1 + sig[0] ** 2 * p1) + np.log2(1 + sig[1] ** 2 * p2) + np.log2(1 + sig[2] ** 2 * (P_T - p1 - p2))
        best = max(best, c.max())
    assert abs(a.capacity(sig) - best) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 5.0), min_size=1, max_size=8), st.floats(1e-3, 100.0), st.floats(0.1, 10.0))
def test_water_fill_invariants(sig, P_T, N):
    sig = np.array(sig)
    a = optim.water_fill(sig, P_T, N)
    assert a.power.sum() == pytest.approx(P_T, rel=1e-9)
    act = a.power > 0
    lvl = a.power[act] + N / sig[act] ** 2
    assert np.allclose(lvl, a.water_level, rtol=1e-9)
    assert np.all(N / sig[~act] ** 2 >= a.water_level * (1 - 1e-12))
    assert optim.water_fill(sig, 2 * P_T, N).dof >= a.dof


def test_water_fill_rejects_bad_input():
    with pytest.raises(DomainError):
        optim.water_fill([0.0, 1.0], 1.0)
    with pytest.raises(DomainError):
        optim.water_fill([1.0], 1.0, 0.0)


def test_warning_free_default_path(small_operator):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        users = _users(small_operator, 2, 13)
        optim.solve_p1(optim.build_beam_vectors(users, small_operator, 6), optim.symbols_of(users), 1.0)
