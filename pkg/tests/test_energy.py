import numpy as np
import pytest

from ckdsnn.energy import (
    EnergyReport,
    LayerProfile,
    conv_macs,
    count_sops,
    estimate_energy,
    fire_rate,
    profile_student,
)
from ckdsnn.models import make_student
from ckdsnn.spiking import SpikeTrain
from ckdsnn.tensor import Tensor


class TestFireRate:
    def test_all_zeros(self):
        assert fire_rate(np.zeros((2, 3, 4))) == 0.0

    def test_all_ones(self):
        assert fire_rate(np.ones((3, 3))) == 100.0

    def test_hand_counted(self):
        train = np.zeros((2, 1, 2, 2, 2), dtype=np.float32)  # 16 elements
        train[0, 0, 0, 0, 0] = 1
        train[1, 0, 1, 1, 1] = 1
        train[0, 0, 1, 0, 1] = 1
        assert fire_rate(train) == 18.75

    def test_exact_rational(self):
        train = np.zeros(3, dtype=np.float32)
        train[0] = 1
        assert fire_rate(train) == 100.0 * 1 / 3

    def test_accepts_spike_train(self):
        st = SpikeTrain(Tensor(np.ones((2, 1, 1, 2, 2), dtype=np.float32)), 2)
        assert fire_rate(st) == 100.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fire_rate(np.zeros((0,)))

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            fire_rate(np.array([0.5]))


class TestSops:
    def test_zero_everywhere(self):
        profiles = [LayerProfile("a", 100, 0.0), LayerProfile("b", 50, 0.0)]
        assert count_sops(profiles, 4) == 0.0

    def test_single_layer_arithmetic(self):
        assert count_sops([LayerProfile("a", 100, 0.5)], 2) == 100.0

    def test_two_layer_hand_accounting(self):
        # spreadsheet: 0.25*1000*4 + 0.1*500*4 = 1000 + 200 = 1200
        profiles = [LayerProfile("conv", 1000, 0.25), LayerProfile("head", 500, 0.1)]
        assert count_sops(profiles, 4) == 1200.0

    def test_linear_in_time_and_rate(self):
        base = count_sops([LayerProfile("a", 320, 0.2)], 2)
        assert count_sops([LayerProfile("a", 320, 0.2)], 4) == 2 * base
        assert count_sops([LayerProfile("a", 320, 0.4)], 2) == 2 * base

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            LayerProfile("bad", 0, 0.5)
        with pytest.raises(ValueError):
            LayerProfile("bad", 10, 1.5)


class TestEnergy:
    def test_zero_counts(self):
        assert estimate_energy(0, 0) == 0.0

    def test_unit_conversion(self):
        # 1e9 SOPs at 0.9 pJ = 0.9 mJ
        assert estimate_energy(1e9, 0, time_steps=4, e_ac_pj=0.9) == pytest.approx(0.9)

    def test_first_layer_mac_term(self):
        # 1e6 MACs * T=2 at 4.6 pJ = 9.2e6 pJ = 9.2e-3 mJ
        got = estimate_energy(0, 1e6, time_steps=2, e_mac_pj=4.6)
        assert got == pytest.approx(9.2e-3)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            estimate_energy(-1, 0)


class TestProfileStudent:
    def test_report_fields_consistent(self):
        rng = np.random.default_rng(0)
        student = make_student("tiny", rng=rng)
        images = rng.random((4, 3, 16, 16), dtype=np.float32)
        report = profile_student(student, images, time_steps=3)
        assert 0.0 <= report.fire_rate_percent <= 100.0
        assert report.total_sops >= 0.0
        assert report.energy_mj >= 0.0
        assert len(report.layers) == 4  # stages 2-4 plus head
        names = [p.name for p in report.layers]
        assert names == ["stage2.conv", "stage3.conv", "stage4.conv", "head"]

    def test_silent_student_zero_sops(self):
        from ckdsnn.spiking import NeuronParams

        rng = np.random.default_rng(1)
        student = make_student("tiny", rng=rng, neuron=NeuronParams(v_threshold=1e6))
        images = rng.random((2, 3, 16, 16), dtype=np.float32)
        report = profile_student(student, images, time_steps=2)
        assert report.fire_rate_percent == 0.0
        assert report.total_sops == 0.0
        assert report.energy_mj > 0.0  # analog first layer still pays MAC cost

    def test_rows_serializable(self):
        report = EnergyReport(12.5, 1000.0, 0.5, 4, 0.9, 4.6, [LayerProfile("x", 10, 0.5)])
        rows = dict(report.rows())
        assert rows["time_steps"] == "4"
        assert "layer.x.macs" in rows

    def test_macs_formula(self):
        assert conv_macs(3, 16, 3, 16, 16) == 16 * 16 * 16 * 27
