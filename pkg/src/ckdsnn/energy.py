"""Efficiency accounting over recorded spike trains: fire rate, SOPs, energy.

A synaptic operation (SOP) is one accumulate triggered by an input spike;
each layer contributes input_fire_rate * MACs * T. The first (encoding)
layer sees analog input and is charged at full multiply-accumulate cost.
Per-operation energies default to the 45 nm convention (0.9 pJ per AC,
4.6 pJ per MAC) and are configurable since they are an accounting choice,
not a measured quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import StudentNet
from .spiking import SpikeTrain
from .tensor import Tensor, no_grad

E_AC_PJ = 0.9
E_MAC_PJ = 4.6


@dataclass(frozen=True)
class LayerProfile:
    name: str
    macs: int  # multiply-accumulates of the ANN-equivalent layer, per sample
    fire_rate_in: float  # fraction of input entries that are spikes, per time step

    def __post_init__(self):
        if self.macs <= 0:
            raise ValueError(f"layer {self.name}: MAC count must be positive")
        if not 0.0 <= self.fire_rate_in <= 1.0:
            raise ValueError(f"layer {self.name}: fire rate {self.fire_rate_in} outside [0,1]")


@dataclass
class EnergyReport:
    fire_rate_percent: float
    total_sops: float
    energy_mj: float
    time_steps: int
    e_ac_pj: float
    e_mac_pj: float
    layers: list[LayerProfile] = field(default_factory=list)

    def rows(self):
        yield ("overall_fire_rate_percent", f"{self.fire_rate_percent:.6f}")
        yield ("total_sops", f"{self.total_sops:.6f}")
        yield ("energy_mj", f"{self.energy_mj:.9f}")
        yield ("time_steps", str(self.time_steps))
        yield ("e_ac_pj", f"{self.e_ac_pj}")
        yield ("e_mac_pj", f"{self.e_mac_pj}")
        for layer in self.layers:
            yield (f"layer.{layer.name}.macs", str(layer.macs))
            yield (f"layer.{layer.name}.fire_rate_in", f"{layer.fire_rate_in:.8f}")


def spike_count(spikes) -> tuple[int, int]:
    """(ones, total) as exact integers."""
    values = spikes.spikes.data if isinstance(spikes, SpikeTrain) else np.asarray(spikes)
    if values.size == 0:
        raise ValueError("empty spike train")
    if not np.all((values == 0) | (values == 1)):
        raise ValueError("fire rate requires a binary train")
    return int(values.sum()), int(values.size)


def fire_rate(spikes) -> float:
    """Percentage of entries equal to 1; exact counts, one final division."""
    ones, total = spike_count(spikes)
    return 100.0 * ones / total


def count_sops(profiles, time_steps: int) -> float:
    """Total synaptic operations: sum of fire_rate_in * MACs * T over layers."""
    return float(sum(p.fire_rate_in * p.macs * time_steps for p in profiles))


def estimate_energy(sops: float, macs_first_layer: float, time_steps: int = 1,
                    e_ac_pj: float = E_AC_PJ, e_mac_pj: float = E_MAC_PJ) -> float:
    """Millijoules: AC cost on spike-driven ops plus MAC cost on the analog first layer."""
    if sops < 0 or macs_first_layer < 0:
        raise ValueError("counts must be non-negative")
    picojoules = e_ac_pj * sops + e_mac_pj * macs_first_layer * time_steps
    return picojoules * 1e-9


def conv_macs(in_ch: int, out_ch: int, ksize: int, out_h: int, out_w: int) -> int:
    return out_ch * out_h * out_w * in_ch * ksize * ksize


def linear_macs(in_features: int, out_features: int) -> int:
    return in_features * out_features


def profile_student(student: StudentNet, images: np.ndarray, time_steps: int,
                    e_ac_pj: float = E_AC_PJ, e_mac_pj: float = E_MAC_PJ) -> EnergyReport:
    """Run one recorded eval pass and assemble per-sample energy accounting."""
    was_training = student.training
    student.eval()
    with no_grad():
        _, train, stage_outputs = student.forward(Tensor(images), time_steps, record_stages=True)
    if was_training:
        student.train()

    profiles = []
    prev_spikes: np.ndarray | None = None
    first_layer_macs = 0
    for i, (stage, out) in enumerate(zip(student.stages, stage_outputs), start=1):
        o, c, kh, _ = stage.conv.weight.shape
        out_h, out_w = out.shape[-2:]
        macs = conv_macs(c, o, kh, out_h, out_w)
        if i == 1:
            first_layer_macs = macs  # analog input, charged at MAC cost
        else:
            ones, total = spike_count(prev_spikes)
            profiles.append(LayerProfile(f"stage{i}.conv", macs, ones / total))
        prev_spikes = out
    ones, total = spike_count(prev_spikes)
    profiles.append(
        LayerProfile("head", linear_macs(student.channels[-1], student.num_classes), ones / total)
    )

    sops = count_sops(profiles, time_steps)
    overall = fire_rate(np.concatenate([s.reshape(-1) for s in stage_outputs]))
    energy = estimate_energy(sops, first_layer_macs, time_steps, e_ac_pj, e_mac_pj)
    return EnergyReport(overall, sops, energy, time_steps, e_ac_pj, e_mac_pj, profiles)
