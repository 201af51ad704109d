"""Theoretical energy accounting from FLOP counts and measured firing rates.

Spiking layers are charged per synaptic operation (an accumulate triggered
by an incoming spike); layers fed with real values are charged per dense
multiply-accumulate.  One MAC counts as one FLOP throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .tensor import no_grad

E_SOP = 0.9e-12  # joules per synaptic operation
E_MAC = 4.6e-12  # joules per multiply-accumulate
MAC_BANNER = "FLOP convention: 1 multiply-accumulate (MAC) = 1 FLOP"


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Shape description of a single weighted layer.

    ``kind`` is ``"conv"`` (any spatial rank) or ``"linear"``.  For a conv,
    ``kernel`` and ``out_shape`` are the kernel and output spatial sizes.
    """

    kind: str
    in_features: int
    out_features: int
    kernel: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()


def count_flops(spec: LayerSpec) -> int:
    if spec.kind == "conv":
        return int(spec.out_features * np.prod(spec.out_shape) * spec.in_features * np.prod(spec.kernel))
    if spec.kind == "linear":
        return int(spec.in_features * spec.out_features)
    raise EnergyError(f"unknown layer kind {spec.kind!r}")


def measure_firing_rate(spikes) -> float:
    """Fraction of ones in a binary spike tensor."""
    s = np.asarray(spikes)
    if s.size == 0:
        raise EnergyError("empty spike tensor")
    if not np.isin(s, (0, 1)).all():
        raise EnergyError("firing rate is only defined for binary spike tensors")
    return float(s.mean())


def sops(fr: float, t: int, flops: int) -> int:
    return int(round(fr * t * flops))


def snn_energy(total_sops: float, analog_flops: float = 0.0) -> float:
    return E_SOP * total_sops + E_MAC * analog_flops


def ann_energy(flops: float) -> float:
    return E_MAC * flops


@dataclass(frozen=True)
class LayerCostProfile:
    """Cost of one layer per input item.

    ``flops`` is the dense MAC count of one pass at T=1.  ``firing_rate`` is
    None for layers fed with real values.  ``per_step`` layers execute once
    per time step; the others (post temporal averaging) once per forward.
    """

    name: str
    flops: int
    firing_rate: float | None
    timesteps: int
    per_step: bool = True

    def __post_init__(self):
        if self.flops < 0:
            raise EnergyError(f"{self.name}: negative flop count {self.flops}")
        if self.firing_rate is not None and not 0.0 <= self.firing_rate <= 1.0:
            raise EnergyError(f"{self.name}: firing rate {self.firing_rate} outside [0, 1]")

    @property
    def spiking(self) -> bool:
        return self.firing_rate is not None

    @property
    def runs(self) -> int:
        return self.timesteps if self.per_step else 1

    @property
    def sops(self) -> int:
        return sops(self.firing_rate, self.runs, self.flops) if self.spiking else 0

    @property
    def analog_flops(self) -> int:
        return 0 if self.spiking else self.flops * self.runs


@dataclass
class EnergyReport:
    layers: list[LayerCostProfile]
    ann_flops: int | None = None  # the comparison network's own count; defaults to our dense T=1 total
    notes: list[str] = field(default_factory=list)

    @property
    def total_sops(self) -> int:
        return sum(p.sops for p in self.layers)

    @property
    def total_flops_analog(self) -> int:
        return sum(p.analog_flops for p in self.layers)

    @property
    def dense_flops(self) -> int:
        return sum(p.flops for p in self.layers)

    @property
    def e_snn_joules(self) -> float:
        return snn_energy(self.total_sops, self.total_flops_analog)

    @property
    def e_ann_equiv_joules(self) -> float:
        return ann_energy(self.dense_flops if self.ann_flops is None else self.ann_flops)

    @classmethod
    def from_totals(cls, total_sops: int, analog_flops: int, ann_flops: int | None = None) -> "EnergyReport":
        """A report with one aggregate spiking row and one aggregate analog row."""
        rows = []
        if total_sops:
            rows.append(LayerCostProfile("spiking (aggregate)", int(total_sops), 1.0, 1))
        if analog_flops:
            rows.append(LayerCostProfile("analog (aggregate)", int(analog_flops), None, 1))
        return cls(rows, ann_flops)

    def with_timesteps(self, t: int) -> "EnergyReport":
        """Same firing rates and counts re-evaluated at ``t`` time steps."""
        return EnergyReport([replace(p, timesteps=t) for p in self.layers], self.ann_flops, list(self.notes))

    def to_dict(self) -> dict:
        return {
            "convention": MAC_BANNER,
            "energy_model": "E_snn = 0.9pJ * SOPs + 4.6pJ * analog FLOPs; E_ann = 4.6pJ * FLOPs",
            "layers": [
                {
                    "name": p.name,
                    "flops": p.flops,
                    "fr": p.firing_rate,
                    "T": p.runs,
                    "sops": p.sops,
                    "analog_flops": p.analog_flops,
                }
                for p in self.layers
            ],
            "total_sops": self.total_sops,
            "total_flops_analog": self.total_flops_analog,
            "ann_flops": self.dense_flops if self.ann_flops is None else self.ann_flops,
            "e_snn_joules": self.e_snn_joules,
            "e_ann_equiv_joules": self.e_ann_equiv_joules,
            "e_snn_mJ": self.e_snn_joules * 1e3,
            "e_ann_equiv_mJ": self.e_ann_equiv_joules * 1e3,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [MAC_BANNER, f"{'layer':<24}{'FLOPs':>14}{'fr':>8}{'T':>4}{'SOPs':>14}{'analog':>14}"]
        for p in self.layers:
            fr = f"{p.firing_rate:.4f}" if p.spiking else "-"
            lines.append(f"{p.name:<24}{p.flops:>14d}{fr:>8}{p.runs:>4d}{p.sops:>14d}{p.analog_flops:>14d}")
        lines.append(f"{'total':<24}{'':>14}{'':>8}{'':>4}{self.total_sops:>14d}{self.total_flops_analog:>14d}")
        lines.append(f"E_snn = {self.e_snn_joules * 1e3:.3f} mJ   E_ann = {self.e_ann_equiv_joules * 1e3:.3f} mJ")
        lines.extend(self.notes)
        return "\n".join(lines)


def _layer_spec(module, x: np.ndarray) -> tuple[LayerSpec, int]:
    """Spec for one probe entry plus the number of rows it was applied to."""
    if isinstance(module, nn.Conv):
        nsp = len(module.kernel_size)
        rows = int(np.prod(x.shape[: x.ndim - nsp - 1]))
        out = tuple(
            (n + 2 * module.padding - k) // module.stride + 1
            for n, k in zip(x.shape[-nsp:], module.kernel_size)
        )
        return LayerSpec("conv", module.in_channels, module.out_channels, module.kernel_size, out), rows
    if isinstance(module, nn.Linear):
        rows = int(np.prod(x.shape[:-1]))
        return LayerSpec("linear", module.in_features, module.out_features), rows
    raise EnergyError(f"cannot cost module of type {type(module).__name__}")


def energy_report(model, support, support_labels, query, way: int, ann_flops: int | None = None) -> EnergyReport:
    """Run one instrumented forward and cost every weighted layer.

    Counts are normalised per input item.  Layers that see ``T`` copies of
    the batch (backbone, SFE, head) are ``per_step``; the cross-feature
    layers run once on temporally averaged features.
    """
    T = model.config.backbone.timesteps
    n_items = len(support_labels) + (query.shape[0] if query.ndim == 4 else query.shape[1])
    probe = model.attach_probe()
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            model(support, support_labels, query, way)
    finally:
        model.detach_probe()
        model.train(was_training)
    merged: dict[str, list] = {}
    for name, module, x in probe:
        spec, rows = _layer_spec(module, x)
        per_step = not name.startswith("cfc.")
        per_item = count_flops(spec) * rows / n_items / (T if per_step else 1)
        binary = name.startswith("backbone.") and np.isin(x, (0, 1)).all()
        entry = merged.setdefault(name, [0.0, [], per_step])
        entry[0] += per_item
        if binary:
            entry[1].append(x)
    layers = []
    for name, (flops, spikes, per_step) in merged.items():
        fr = None
        if spikes:
            fr = float(np.mean([measure_firing_rate(s) for s in spikes]))
        layers.append(LayerCostProfile(name, int(round(flops)), fr, T, per_step))
    return EnergyReport(
        layers,
        ann_flops,
        notes=[
            "spiking layers: SOPs = fr * T * FLOPs; analog layers (encoding input, SFE, head, CFC) charged per MAC",
        ],
    )


def average_reports(reports: list[EnergyReport]) -> EnergyReport:
    """Layer-wise mean of reports over several probe batches."""
    if not reports:
        raise EnergyError("no reports to average")
    names = [p.name for p in reports[0].layers]
    for r in reports[1:]:
        if [p.name for p in r.layers] != names:
            raise EnergyError("reports cover different layers")
    layers = []
    for i, first in enumerate(reports[0].layers):
        rows = [r.layers[i] for r in reports]
        fr = None if first.firing_rate is None else float(np.mean([p.firing_rate for p in rows]))
        flops = int(round(np.mean([p.flops for p in rows])))
        layers.append(LayerCostProfile(first.name, flops, fr, first.timesteps, first.per_step))
    return EnergyReport(layers, reports[0].ann_flops, list(reports[0].notes))
