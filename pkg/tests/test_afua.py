import numpy as np
import pytest

from biozpipe import afua
from biozpipe.afua import AfuaState, IntegrationConfig, NetworkParams
from biozpipe.errors import ConfigError


def rand_params(n_hidden=16, n_inputs=25, seed=0, scale=0.5):
    r = np.random.default_rng(seed)
    return NetworkParams(
        W_z=r.normal(0, scale, (n_hidden, n_inputs)),
        U_z=r.normal(0, scale, (n_hidden, n_hidden)),
        W=r.normal(0, scale, (n_hidden, n_inputs)),
        U=r.normal(0, scale, (n_hidden, n_hidden)),
        fc1_w=r.normal(0, scale, (2, n_hidden)),
        fc1_b=r.normal(0, scale, 2),
        fc2_w=r.normal(0, scale, (2, 2)),
        fc2_b=r.normal(0, scale, 2),
    )


def zero_params(n_hidden=16, n_inputs=25):
    return NetworkParams(
        W_z=np.zeros((n_hidden, n_inputs)), U_z=np.zeros((n_hidden, n_hidden)),
        W=np.zeros((n_hidden, n_inputs)), U=np.zeros((n_hidden, n_hidden)),
        fc1_w=np.zeros((2, n_hidden)), fc1_b=np.zeros(2),
        fc2_w=np.zeros((2, 2)), fc2_b=np.zeros(2),
    )


class TestSigmoid:
    def test_zero(self):
        assert afua.sigmoid(0.0) == 0.5

    def test_reference_value(self):
        assert afua.sigmoid(2.0) == pytest.approx(0.880797077978, abs=1e-10)

    def test_open_range_even_when_saturated(self):
        assert 0.0 < afua.sigmoid(-800.0) < afua.sigmoid(40.0) < 1.0

    def test_monotone(self):
        v = np.linspace(-30, 30, 301)
        out = afua.sigmoid(v)
        assert np.all(np.diff(out) >= 0)


class TestStep:
    def test_dt_zero_is_identity(self):
        p = zero_params(4, 3)
        st = AfuaState(h=np.full(4, 0.3), z=np.full(4, 0.5),
                       h_tilde=np.full(4, 0.5))
        cfg = IntegrationConfig(substeps_per_pattern=1, dt=0.0)
        out = afua.afua_step(np.zeros(3), st, p, cfg)
        assert np.array_equal(out.h, st.h)

    def test_zero_weights_fixed_point(self):
        # z = h_tilde = 0.5 and h = 0.5 make the derivative exactly zero
        p = zero_params(4, 3)
        st = afua.initial_state(4, h0=0.5)
        cfg = IntegrationConfig()
        for _ in range(40):
            st = afua.afua_step(np.zeros(3), st, p, cfg)
        assert np.all(st.h == 0.5)
        assert np.all(st.z == 0.5)
        assert np.all(st.h_tilde == 0.5)

    def test_euler_arithmetic(self):
        # h=0.25, h_tilde=0.5, z=0.5, tau=1, dt=0.1 -> 0.25 + 0.1*0.5*0.5
        p = zero_params(1, 1)
        st = AfuaState(h=np.array([0.25]), z=np.array([0.5]),
                       h_tilde=np.array([0.5]))
        cfg = IntegrationConfig(substeps_per_pattern=1, dt=0.1)
        out = afua.afua_step(np.array([0.0]), st, p, cfg)
        assert out.h[0] == pytest.approx(0.275, abs=1e-15)

    def test_state_stays_in_open_unit_interval(self):
        p = rand_params(8, 5, seed=3, scale=2.0)
        cfg = IntegrationConfig()
        rng = np.random.default_rng(0)
        st = afua.initial_state(8)
        for _ in range(300):
            st = afua.afua_step(rng.uniform(-1, 1, 5), st, p, cfg)
            assert np.all(st.h >= cfg.epsilon)
            assert np.all(st.h <= 1 - cfg.epsilon)

    def test_no_cross_unit_coupling_without_recurrent_weights(self):
        # with U and U_z zero, perturbing h_k leaves every other unit's
        # update unchanged: units couple only through matrix products
        p = rand_params(6, 4, seed=9)
        p = NetworkParams(W_z=p.W_z, U_z=np.zeros((6, 6)), W=p.W,
                          U=np.zeros((6, 6)), fc1_w=p.fc1_w, fc1_b=p.fc1_b,
                          fc2_w=p.fc2_w, fc2_b=p.fc2_b)
        cfg = IntegrationConfig()
        x = np.random.default_rng(1).uniform(-1, 1, 4)
        base = afua.initial_state(6)
        bumped = AfuaState(h=base.h.copy(), z=base.z, h_tilde=base.h_tilde)
        bumped.h[2] = 0.9
        out_a = afua.afua_step(x, base, p, cfg)
        out_b = afua.afua_step(x, bumped, p, cfg)
        others = [i for i in range(6) if i != 2]
        assert np.array_equal(out_a.h[others], out_b.h[others])


class TestRunSequence:
    def test_zero_weights_keeps_initial_h(self):
        p = zero_params()
        seq = np.zeros((28, 25))
        h = afua.run_sequence(seq, p, IntegrationConfig(), h0=0.5)
        assert np.all(h == 0.5)

    def test_output_shape_and_range(self):
        p = rand_params(seed=4)
        seq = np.random.default_rng(2).uniform(-1, 1, (28, 25))
        h = afua.run_sequence(seq, p, IntegrationConfig())
        assert h.shape == (16,)
        assert np.all((h > 0) & (h < 1))

    def test_constant_input_converges_to_equilibrium(self):
        # hold one input for 20 tau; h must sit at the self-consistent
        # fixed point h* = max(sigmoid(Wx + U h*), eps) within 1e-3
        p = rand_params(8, 5, seed=11)
        x = np.random.default_rng(5).uniform(-1, 1, 5)
        cfg = IntegrationConfig(substeps_per_pattern=200, dt=0.1)
        h = afua.run_sequence(x[None, :].repeat(1, axis=0), p, cfg)
        # fixed-point iteration oracle
        h_star = np.full(8, 0.5)
        for _ in range(10000):
            h_star = np.maximum(afua.sigmoid(p.W @ x + p.U @ h_star),
                                cfg.epsilon)
        assert np.max(np.abs(h - h_star)) <= 1e-3

    def test_euler_first_order_convergence(self):
        p = rand_params(6, 4, seed=12)
        seq = np.random.default_rng(3).uniform(-1, 1, (5, 4))
        results = {}
        for s, dt in ((10, 0.1), (20, 0.05), (40, 0.025)):
            cfg = IntegrationConfig(substeps_per_pattern=s, dt=dt)
            results[dt] = afua.run_sequence(seq, p, cfg)
        d1 = np.max(np.abs(results[0.1] - results[0.05]))
        d2 = np.max(np.abs(results[0.05] - results[0.025]))
        assert d2 < d1
        assert d1 < 1e-2

    def test_dt_above_tau_rejected(self):
        p = zero_params(2, 2)
        cfg = IntegrationConfig(substeps_per_pattern=1, dt=1.5)
        with pytest.raises(ConfigError):
            afua.run_sequence(np.zeros((2, 2)), p, cfg)


class TestHead:
    def test_uniform_when_fc2_output_zero(self):
        p = zero_params()
        out = afua.head_forward(np.full(16, 0.5), p)
        assert np.allclose(out, [0.5, 0.5])

    def test_softmax_closed_form(self):
        # relu outputs (ln 3, 0) -> probabilities (0.75, 0.25)
        p = zero_params(2, 2)
        p = NetworkParams(W_z=p.W_z, U_z=p.U_z, W=p.W, U=p.U,
                          fc1_w=np.zeros((2, 2)), fc1_b=np.zeros(2),
                          fc2_w=np.zeros((2, 2)),
                          fc2_b=np.array([np.log(3.0), 0.0]))
        out = afua.head_forward(np.full(2, 0.5), p)
        assert out[0] == pytest.approx(0.75, abs=1e-12)
        assert out[1] == pytest.approx(0.25, abs=1e-12)

    def test_probabilities_normalized(self):
        rng = np.random.default_rng(7)
        p = rand_params(seed=8, scale=2.0)
        for _ in range(20):
            out = afua.head_forward(rng.uniform(0, 1, 16), p)
            assert abs(out.sum() - 1.0) < 1e-12
            assert np.all(out > 0)


class TestClassify:
    def test_argmax_and_tiebreak(self):
        p = zero_params()
        seq = np.zeros((28, 25))
        label, probs = afua.classify(seq, p)
        assert np.allclose(probs, [0.5, 0.5])
        assert label == 0  # tie resolves to the benign class

    def test_scale_invariance_of_argmax(self):
        # scaling relu outputs leaves the argmax unchanged
        p = rand_params(seed=20)
        seq = np.random.default_rng(9).uniform(-1, 1, (28, 25))
        label1, _ = afua.classify(seq, p)
        p2 = NetworkParams(W_z=p.W_z, U_z=p.U_z, W=p.W, U=p.U,
                           fc1_w=p.fc1_w, fc1_b=p.fc1_b,
                           fc2_w=3.0 * p.fc2_w, fc2_b=3.0 * p.fc2_b)
        label2, _ = afua.classify(seq, p2)
        assert label1 == label2


class TestModelFile:
    def test_bit_exact_roundtrip(self, tmp_path):
        p = rand_params(seed=31)
        cfg = IntegrationConfig(substeps_per_pattern=7, dt=0.05, epsilon=1e-5)
        path = tmp_path / "model.afua"
        afua.save_model(p, cfg, path)
        back, cfg2 = afua.load_model(path)
        for name, mat in p.matrices().items():
            assert np.array_equal(getattr(back, name), mat), name
        assert back.tau_h == p.tau_h
        assert cfg2 == cfg

    def test_rewrite_identical(self, tmp_path):
        p = rand_params(seed=32)
        cfg = IntegrationConfig()
        p1, p2 = tmp_path / "a.afua", tmp_path / "b.afua"
        afua.save_model(p, cfg, p1)
        back, cfg2 = afua.load_model(p1)
        afua.save_model(back, cfg2, p2)
        assert p1.read_bytes() == p2.read_bytes()
