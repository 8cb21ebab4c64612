"""Entropy model checks: quantization rules, rate estimates against an
error-function oracle, coder-table construction, and round trips through
the Gaussian and context coding paths."""

import numpy as np
import pytest
from scipy.special import erf

from gdclab import entropy as E
from gdclab import layers as L
from gdclab import tensor as T
from gdclab.errors import ContractError, NumericError, ShapeError
from gdclab.rangecoder import CDF_TOTAL
from gdclab.tensor import Tensor


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def gauss_prob_oracle(v, mu, sigma):
    """Direct error-function evaluation of the integer-bin probability."""
    z_hi = (v - mu + 0.5) / (sigma * np.sqrt(2.0))
    z_lo = (v - mu - 0.5) / (sigma * np.sqrt(2.0))
    return 0.5 * (erf(z_hi) - erf(z_lo))


class TestQuantize:
    def test_round_ties_away_from_zero(self):
        x = t64([[[[2.4, 2.5, -2.5, -0.5]]]])
        out = E.quantize(x, "round")
        assert out.data.reshape(-1).tolist() == [2.0, 3.0, -3.0, -1.0]

    def test_round_fixes_integers(self):
        x = t64([[[[-3.0, 0.0, 7.0, 1.0]]]])
        assert np.array_equal(E.quantize(x, "round").data, x.data)

    def test_noise_bound_and_determinism(self):
        x = t64(np.zeros((2, 3, 4, 4)))
        out1 = E.quantize(x, "noise", rng=np.random.default_rng(9))
        out2 = E.quantize(x, "noise", rng=np.random.default_rng(9))
        assert np.abs(out1.data).max() <= 0.5
        assert np.array_equal(out1.data, out2.data)

    def test_noise_requires_rng(self):
        with pytest.raises(ContractError):
            E.quantize(t64(np.zeros((1, 1, 1, 1))), "noise")

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            E.quantize(t64(np.zeros((1, 1, 1, 1))), "floor")

    @pytest.mark.parametrize("mode", ["noise", "round"])
    def test_gradient_passes_through(self, mode):
        with T.using_dtype(np.float64):
            x = Tensor(np.full((1, 1, 2, 2), 0.3), requires_grad=True)
            out = E.quantize(x, mode, rng=np.random.default_rng(0))
            T.backward(T.sum_all(out))
        assert np.array_equal(x.grad, np.ones((1, 1, 2, 2)))


class TestGaussianBits:
    def test_unit_gaussian_center_bin(self):
        # central bin of a unit Gaussian: p = erf(0.5 / sqrt 2) = 0.38292...
        with T.using_dtype(np.float64):
            bits = E.gaussian_bits(t64(np.zeros((1, 1, 1, 1))),
                                   t64(np.zeros((1, 1, 1, 1))),
                                   t64(np.ones((1, 1, 1, 1))))
        assert bits.item() == pytest.approx(1.38486653429099, abs=1e-12)

    def test_matches_erf_oracle_elementwise(self):
        rng = np.random.default_rng(10)
        v = rng.integers(-3, 4, size=(1, 2, 3, 3)).astype(np.float64)
        mu = rng.normal(size=v.shape)
        sigma = rng.uniform(0.2, 2.0, size=v.shape)
        with T.using_dtype(np.float64):
            bits = E.gaussian_bits(t64(v), t64(mu), t64(sigma))
        want = -np.log2(np.maximum(gauss_prob_oracle(v, mu, sigma), E.PROB_FLOOR))
        assert bits.data == pytest.approx(want, abs=1e-10)

    def test_deep_tail_clamps_to_sixteen(self):
        with T.using_dtype(np.float64):
            bits = E.gaussian_bits(t64(np.full((1, 1, 1, 1), 50.0)),
                                   t64(np.zeros((1, 1, 1, 1))),
                                   t64(np.ones((1, 1, 1, 1))))
        assert bits.item() == 16.0

    def test_symmetry_about_mean(self):
        with T.using_dtype(np.float64):
            sig = t64(np.full((1, 1, 1, 1), 0.7))
            mu = t64(np.zeros((1, 1, 1, 1)))
            plus = E.gaussian_bits(t64(np.full((1, 1, 1, 1), 3.0)), mu, sig)
            minus = E.gaussian_bits(t64(np.full((1, 1, 1, 1), -3.0)), mu, sig)
        assert plus.item() == pytest.approx(minus.item(), abs=1e-12)

    def test_contracts(self):
        ok = t64(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ShapeError):
            E.gaussian_bits(ok, t64(np.zeros((1, 1, 1, 1))), t64(np.ones((1, 1, 2, 2))))
        with pytest.raises(NumericError):
            E.gaussian_bits(ok, t64(np.full((1, 1, 2, 2), np.nan)), t64(np.ones((1, 1, 2, 2))))
        with pytest.raises(ContractError):
            E.gaussian_bits(ok, t64(np.zeros((1, 1, 2, 2))), t64(np.full((1, 1, 2, 2), 0.01)))

    def test_mean_gradient_via_finite_differences(self):
        # the rate estimate stays differentiable w.r.t. the mean
        rng = np.random.default_rng(11)
        with T.using_dtype(np.float64):
            values = t64(rng.integers(-2, 3, size=(1, 2, 3, 3)).astype(float))
            scale = t64(rng.uniform(0.5, 1.5, size=(1, 2, 3, 3)))
            mean = Tensor(rng.uniform(-0.4, 0.4, size=(1, 2, 3, 3)), requires_grad=True)

            def f(m):
                return T.sum_all(E.gaussian_bits(values, m, scale))

            assert T.grad_check(f, [mean]) < 1e-5

    def test_scale_from_raw_floor(self):
        with T.using_dtype(np.float64):
            s0 = E.scale_from_raw(t64(np.zeros((1, 1, 1, 1))))
            s_neg = E.scale_from_raw(t64(np.full((1, 1, 1, 1), -40.0)))
        assert s0.item() == pytest.approx(0.8031471805599453, abs=1e-12)
        assert s_neg.item() >= E.SCALE_MIN


class TestBuildCdfs:
    def test_shape_and_grid(self):
        mean = np.zeros(5)
        scale = np.ones(5)
        cdfs = E.build_cdfs(mean, scale, -4, 4)
        assert cdfs.shape == (5, 9 + 2)  # 9 value bins + escape, +1 edge
        assert np.all(cdfs[:, 0] == 0)
        assert np.all(cdfs[:, -1] == CDF_TOTAL)
        assert np.all(np.diff(cdfs, axis=1) >= 1)

    def test_frequencies_track_probabilities(self):
        cdfs = E.build_cdfs(np.zeros(1), np.ones(1), -8, 8)
        freqs = np.diff(cdfs[0])[:-1]  # drop escape
        probs = gauss_prob_oracle(np.arange(-8, 9, dtype=float), 0.0, 1.0)
        assert freqs / CDF_TOTAL == pytest.approx(probs, abs=2e-4)

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        mean = rng.normal(size=7)
        scale = rng.uniform(0.2, 3.0, size=7)
        a = E.build_cdfs(mean, scale, -5, 5)
        b = E.build_cdfs(mean, scale, -5, 5)
        assert np.array_equal(a, b)

    def test_support_contracts(self):
        with pytest.raises(ContractError):
            E.build_cdfs(np.zeros(1), np.ones(1), 3, 2)
        with pytest.raises(ContractError):
            E.build_cdfs(np.zeros(1), np.ones(1), 0, CDF_TOTAL)


class TestGaussianCoding:
    def test_round_trip_random(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            n = int(rng.integers(1, 200))
            mean = rng.normal(scale=2.0, size=n)
            scale = rng.uniform(E.SCALE_MIN, 3.0, size=n)
            values = np.rint(rng.normal(scale=3.0, size=n)).astype(np.int64)
            payload, support = E.encode_gaussian(values, mean, scale)
            back = E.decode_gaussian(payload, mean, scale, support, n)
            assert np.array_equal(back, values)

    def test_rate_close_to_estimate(self):
        rng = np.random.default_rng(14)
        n = 1000
        mean = np.zeros(n)
        scale = np.full(n, 1.3)
        values = np.rint(rng.normal(scale=1.3, size=n)).astype(np.int64)
        payload, support = E.encode_gaussian(values, mean, scale)
        with T.using_dtype(np.float64):
            est = E.gaussian_bits(t64(values.reshape(1, 1, 1, -1).astype(float)),
                                  t64(mean.reshape(1, 1, 1, -1)),
                                  t64(scale.reshape(1, 1, 1, -1)))
        est_total = float(est.data.sum())
        assert 8 * len(payload) <= est_total + 0.01 * n + 64

    def test_escape_path(self):
        # values far outside the declared support survive the round trip
        mean = np.zeros(4)
        scale = np.ones(4)
        values = np.array([0, -40, 1, 123456], dtype=np.int64)
        payload, support = E.encode_gaussian(values, mean, scale, support=(-2, 2))
        back = E.decode_gaussian(payload, mean, scale, (-2, 2), 4)
        assert np.array_equal(back, values)

    def test_escape_value_too_large(self):
        from gdclab.rangecoder import RangeEncoder
        cdf = E.build_cdfs(np.zeros(1), np.ones(1), -1, 1)[0]
        with pytest.raises(ContractError):
            E._encode_value(RangeEncoder(), 1 << 31, -1, 1, cdf)

    def test_count_mismatch(self):
        payload, support = E.encode_gaussian(np.zeros(3, dtype=np.int64),
                                             np.zeros(3), np.ones(3))
        with pytest.raises(ShapeError):
            E.decode_gaussian(payload, np.zeros(3), np.ones(3), support, 5)
        with pytest.raises(ShapeError):
            E.encode_gaussian(np.zeros(3, dtype=np.int64), np.zeros(2), np.ones(2))

    def test_empty_tensor(self):
        payload, support = E.encode_gaussian(np.zeros(0, dtype=np.int64),
                                             np.zeros(0), np.ones(0))
        back = E.decode_gaussian(payload, np.zeros(0), np.ones(0), support, 0)
        assert back.size == 0


def _context_net(channels, hidden, seed, zero=False):
    params = L.ParamStore(np.float64)
    net = L.make_network(L.context_spec(channels, hidden=hidden), params, "ctx",
                         rng=np.random.default_rng(seed))
    if zero:
        params.load_arrays({n: np.zeros(t.shape) for n, t in params.items()})
    return net


class TestContextCoding:
    def test_round_trip_random(self):
        rng = np.random.default_rng(15)
        with T.using_dtype(np.float64):
            net = _context_net(2, 4, seed=16)
            z = rng.integers(-4, 5, size=(1, 2, 5, 6)).astype(np.float64)
            payload, support = E.encode_context(z, net)
            back = E.decode_context(payload, net, z.shape, support, dtype=np.float64)
        assert np.array_equal(back, z)

    def test_all_zero_with_zero_net(self):
        # a zeroed context net gives every position the same parameters
        with T.using_dtype(np.float64):
            net = _context_net(2, 4, seed=0, zero=True)
            z = np.zeros((1, 2, 4, 4))
            mean, scale = E.context_params(net, z, np.float64)
            assert np.all(mean == mean.reshape(-1)[0])
            assert np.all(scale == scale.reshape(-1)[0])
            payload, support = E.encode_context(z, net)
            back = E.decode_context(payload, net, z.shape, support, dtype=np.float64)
        assert np.array_equal(back, z)

    def test_causality_of_parameters(self):
        # flipping a value never changes the parameters used before it
        rng = np.random.default_rng(17)
        with T.using_dtype(np.float64):
            net = _context_net(2, 4, seed=18)
            z = rng.integers(-2, 3, size=(1, 2, 4, 5)).astype(np.float64)
            m1, s1 = E.context_params(net, z, np.float64)
            qy, qx = 2, 3
            z2 = z.copy()
            z2[0, :, qy, qx] += 4.0
            m2, s2 = E.context_params(net, z2, np.float64)
        cut = qy * 5 + qx
        dm = np.abs(m1 - m2).max(axis=(0, 1)).reshape(-1)
        ds = np.abs(s1 - s2).max(axis=(0, 1)).reshape(-1)
        assert np.all(dm[:cut + 1] == 0.0)
        assert np.all(ds[:cut + 1] == 0.0)

    def test_rate_close_to_estimate(self):
        rng = np.random.default_rng(19)
        with T.using_dtype(np.float64):
            net = _context_net(2, 4, seed=20)
            z = rng.integers(-3, 4, size=(1, 2, 6, 6)).astype(np.float64)
            payload, support = E.encode_context(z, net)
            est = E.context_bits(t64(z), net)
        n = z.size
        assert 8 * len(payload) <= float(est.data.sum()) + 0.01 * n + 64

    def test_decode_rejects_batches(self):
        net = _context_net(1, 4, seed=21)
        with pytest.raises(ContractError):
            E.decode_context(b"\x00" * 8, net, (2, 1, 2, 2), (0, 0))


class TestFactorizedModel:
    def test_bits_and_coding_round_trip(self):
        params = L.ParamStore(np.float64)
        model = E.FactorizedModel(params, "fm", channels=2)
        rng = np.random.default_rng(22)
        values = np.rint(rng.normal(size=(1, 2, 4, 4))).astype(np.int64)
        with T.using_dtype(np.float64):
            bits = model.bits(t64(values.astype(float)))
            assert bits.shape == values.shape
            assert np.all(bits.data > 0)
        mean, scale = model.coder_params(values.shape)
        payload, support = E.encode_gaussian(values, mean, scale)
        back = E.decode_gaussian(payload, mean.reshape(-1), scale.reshape(-1),
                                 support, values.size)
        assert np.array_equal(back, values.reshape(-1))

    def test_channel_contract(self):
        params = L.ParamStore(np.float64)
        model = E.FactorizedModel(params, "fm", channels=2)
        with pytest.raises(ShapeError):
            model.bits(t64(np.zeros((1, 3, 2, 2))))

    def test_reuses_existing_parameters(self):
        params = L.ParamStore(np.float64)
        E.FactorizedModel(params, "fm", channels=2)
        E.FactorizedModel(params, "fm", channels=2)  # no duplicate error
        assert len(params.names()) == 2
