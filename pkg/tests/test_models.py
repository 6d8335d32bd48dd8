import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmkit.errors import ConfigError
from ebmkit.models import EnergyModel, Mode, build_model
from ebmkit.tensor import Tensor

# Oracle: log(e^1 + e^2 + e^3) computed in extended precision.
LSE_123 = float(np.log(np.sum(np.exp(np.array([1.0, 2.0, 3.0], dtype=np.longdouble)))))
# Oracle: softmax([1, 2]) = (1/(1+e), e/(1+e)).
SOFTMAX_12 = (1.0 / (1.0 + float(np.e)), float(np.e) / (1.0 + float(np.e)))


def small_model(mode, num_classes=None, seed=0):
    return EnergyModel(2, hidden=(8, 8), mode=mode, num_classes=num_classes,
                       rng=np.random.default_rng(seed))


class TestHeads:
    def test_uncond_has_energy_head_only(self):
        m = small_model(Mode.UNCOND)
        assert m.energy_head is not None
        assert m.classifier_head is None
        with pytest.raises(ConfigError):
            m.logits(np.zeros((1, 2)))

    def test_mjem_has_both_heads(self):
        m = small_model(Mode.MJEM, num_classes=4)
        assert m.energy_head is not None
        assert m.classifier_head is not None

    def test_lsejem_has_classifier_only(self):
        m = small_model(Mode.LSEJEM, num_classes=4)
        assert m.energy_head is None
        assert m.classifier_head is not None

    def test_conditional_modes_require_num_classes(self):
        for mode in (Mode.MJEM, Mode.LSEJEM):
            with pytest.raises(ConfigError):
                small_model(mode)

    def test_mode_parse_rejects_unknown(self):
        with pytest.raises(ConfigError):
            Mode.parse("softmax")

    def test_mode_parse_accepts_strings(self):
        assert Mode.parse("MJEM") is Mode.MJEM
        m = EnergyModel(2, hidden=(4,), mode="uncond")
        assert m.mode is Mode.UNCOND

    def test_input_dim_mismatch_raises(self):
        m = small_model(Mode.UNCOND)
        with pytest.raises(ValueError, match="shape"):
            m.energy(np.zeros((3, 5)))


class TestEnergy:
    def test_energy_shape_is_flat_batch(self):
        m = small_model(Mode.UNCOND)
        e = m.energy(np.zeros((7, 2)))
        assert e.data.shape == (7,)

    def test_lse_energy_of_uniform_logits_is_minus_log_c(self):
        m = small_model(Mode.LSEJEM, num_classes=5)
        w, b = m.classifier_head
        w.data[:] = 0.0
        b.data[:] = 0.0
        e = m.energy(np.random.default_rng(1).normal(size=(4, 2)))
        np.testing.assert_allclose(e.data, -np.log(5.0), rtol=0, atol=1e-12)

    def test_lse_energy_matches_frozen_oracle(self):
        m = small_model(Mode.LSEJEM, num_classes=3)
        logits = Tensor(np.array([[1.0, 2.0, 3.0]]))
        # Bypass the trunk: energy of given logits is -logsumexp(logits).
        from ebmkit.tensor import logsumexp
        e = -logsumexp(logits)
        np.testing.assert_allclose(e.data, [-LSE_123], rtol=0, atol=1e-12)
        assert abs(LSE_123 - 3.40760596444438) < 1e-11

    def test_zeroed_energy_head_gives_constant_bias(self):
        m = small_model(Mode.UNCOND)
        w, b = m.energy_head
        w.data[:] = 0.0
        b.data[:] = 2.5
        e = m.energy(np.random.default_rng(2).normal(size=(6, 2)))
        np.testing.assert_allclose(e.data, 2.5, rtol=0, atol=1e-12)

    def test_mjem_energy_ignores_classifier_head(self):
        # The energy head is separate: perturbing classifier weights must not
        # change the energy, and vice versa.
        m = small_model(Mode.MJEM, num_classes=3)
        x = np.random.default_rng(3).normal(size=(5, 2))
        e_before = m.energy(x).data.copy()
        cw, cb = m.classifier_head
        cw.data += 1.0
        cb.data -= 0.5
        np.testing.assert_array_equal(m.energy(x).data, e_before)
        logits_before = m.logits(x).data.copy()
        ew, eb = m.energy_head
        ew.data += 1.0
        np.testing.assert_array_equal(m.logits(x).data, logits_before)


class TestPosterior:
    def test_rows_sum_to_one(self):
        m = small_model(Mode.MJEM, num_classes=6)
        p = m.class_posterior(np.random.default_rng(4).normal(size=(9, 2)))
        assert p.shape == (9, 6)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        assert (p >= 0).all()

    def test_softmax_two_logit_oracle(self):
        m = small_model(Mode.LSEJEM, num_classes=2)
        w, b = m.classifier_head
        w.data[:] = 0.0
        b.data[:] = np.array([1.0, 2.0])
        p = m.class_posterior(np.zeros((1, 2)))
        np.testing.assert_allclose(p[0], SOFTMAX_12, rtol=0, atol=1e-12)
        np.testing.assert_allclose(SOFTMAX_12, [0.2689414213699951, 0.7310585786300049],
                                   rtol=0, atol=1e-15)

    def test_uncond_posterior_raises(self):
        m = small_model(Mode.UNCOND)
        with pytest.raises(ConfigError):
            m.class_posterior(np.zeros((1, 2)))

    @given(shift=st.floats(-30.0, 30.0))
    @settings(max_examples=25, deadline=None)
    def test_logit_shift_covariance(self, shift):
        # Adding a constant to every logit lowers the LSE energy by that
        # constant and leaves the posterior unchanged.
        m = small_model(Mode.LSEJEM, num_classes=4, seed=7)
        x = np.random.default_rng(8).normal(size=(3, 2))
        e0 = m.energy(x).data.copy()
        p0 = m.class_posterior(x)
        _, b = m.classifier_head
        b.data += shift
        np.testing.assert_allclose(m.energy(x).data, e0 - shift, rtol=0, atol=1e-9)
        np.testing.assert_allclose(m.class_posterior(x), p0, rtol=0, atol=1e-9)


class TestInit:
    def test_same_seed_same_weights(self):
        a = small_model(Mode.MJEM, num_classes=3, seed=11)
        b = small_model(Mode.MJEM, num_classes=3, seed=11)
        for (ka, va), (kb, vb) in zip(a.named_parameters().items(),
                                      b.named_parameters().items()):
            assert ka == kb
            np.testing.assert_array_equal(va.data, vb.data)

    def test_different_seed_different_weights(self):
        a = small_model(Mode.UNCOND, seed=0)
        b = small_model(Mode.UNCOND, seed=1)
        assert not np.array_equal(a.trunk[0][0].data, b.trunk[0][0].data)

    def test_init_bound_scales_with_fan_in(self):
        m = EnergyModel(100, hidden=(50,), mode=Mode.UNCOND,
                        rng=np.random.default_rng(5))
        w0 = m.trunk[0][0].data
        assert np.abs(w0).max() <= 1.0 / np.sqrt(100)
        assert np.abs(w0).max() > 0.5 / np.sqrt(100)

    def test_build_model_width_rule(self):
        assert build_model(2, Mode.UNCOND).hidden == (128, 128, 128)
        assert build_model(784, Mode.MJEM, num_classes=10).hidden == (256, 256, 256)


class TestFrozen:
    def test_frozen_blocks_param_grads(self):
        m = small_model(Mode.UNCOND)
        x = Tensor(np.random.default_rng(6).normal(size=(4, 2)), requires_grad=True)
        with m.frozen():
            assert all(not p.requires_grad for p in m.parameters())
            m.energy(x).sum().backward()
        assert all(p.requires_grad for p in m.parameters())
        assert all(p.grad is None for p in m.parameters())
        assert x.grad is not None

    def test_frozen_restores_on_error(self):
        m = small_model(Mode.UNCOND)
        with pytest.raises(RuntimeError):
            with m.frozen():
                raise RuntimeError("boom")
        assert all(p.requires_grad for p in m.parameters())


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        m = small_model(Mode.MJEM, num_classes=4, seed=13)
        path = tmp_path / "model.ebmc"
        m.save(path, seed=13)
        m2 = EnergyModel.load(path)
        assert m2.mode is Mode.MJEM
        assert m2.num_classes == 4
        assert m2.hidden == m.hidden
        for k, v in m.named_parameters().items():
            np.testing.assert_array_equal(m2.named_parameters()[k].data, v.data)
        x = np.random.default_rng(14).normal(size=(5, 2))
        np.testing.assert_array_equal(m2.energy(x).data, m.energy(x).data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ConfigError, match="magic"):
            EnergyModel.load(path)

    def test_truncated_payload_rejected(self, tmp_path):
        m = small_model(Mode.UNCOND, seed=3)
        path = tmp_path / "model.ebmc"
        m.save(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ConfigError, match="truncated"):
            EnergyModel.load(path)
