"""Multi-core neuromorphic cost model: memory footprint, channel-wise mapping, energy and latency.

Every layer's output channels are split over one or more cores.  A core
holding part of a layer keeps that layer's full input line buffer plus the
weights and states of its own channels, receives every input event of the
layer, and performs the MACs, neuron updates and emissions of its channels.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .netspec import NetworkSpec, describe

UNLIMITED = None
_UNLIMITED_CAP = 1_000_000


@dataclass(frozen=True)
class ProcessorSpec:
    core_count: int = 256
    mem_per_core_bits: int = 2 * 2 ** 20
    npe_per_core: int = 8
    ns_per_instruction: float = 2.0  # 500 MHz

    def __post_init__(self):
        if min(self.core_count, self.mem_per_core_bits, self.npe_per_core) <= 0 or self.ns_per_instruction <= 0:
            raise ValueError("processor parameters must be positive")


@dataclass(frozen=True)
class KernelCostModel:
    """Instruction counts of the event micro-kernels and energy per instruction class.

    The defaults are placeholders, not measured values; reports built from
    them carry ``calibrated: false``.
    """

    a_int: float = 5.0  # per received input event
    k_mac: float = 1.0  # per multiply-accumulate
    a_gen: float = 4.0  # per neuron update
    a_emit: float = 3.0  # per emitted event
    energy_pj: tuple = (("integrate", 12.0), ("mac", 12.0), ("generate", 12.0), ("emit", 12.0))
    calibrated: bool = False

    def __post_init__(self):
        if min(self.a_int, self.k_mac, self.a_gen, self.a_emit) < 0:
            raise ValueError("instruction counts must be non-negative")
        if any(v < 0 for _, v in self.energy_pj):
            raise ValueError("energies must be non-negative")

    @property
    def energy(self) -> dict:
        return dict(self.energy_pj)

    def to_json(self):
        d = asdict(self)
        d["energy_pj"] = self.energy
        return d


# ---------------------------------------------------------------- footprint


@dataclass
class LayerFootprint:
    name: str
    kind: str
    channels: int
    weight_bits: int
    state_bits: int
    buffer_bits: int  # replicated on every core that holds part of the layer
    macs: float  # per frame, density weighted
    input_events: float  # per frame, events arriving at the layer's convolutions
    neurons: float  # per frame, neuron updates
    emitted: float  # per frame, nonzero outputs

    @property
    def total_bits(self) -> int:
        return self.weight_bits + self.state_bits + self.buffer_bits

    @property
    def split_bits(self) -> int:
        """Bits that are divided between cores along the channel axis."""
        return self.weight_bits + self.state_bits


def conv_buffer_bits(conv, bits: int) -> int:
    """Depth-first line buffer of one convolution: kernel-height rows of the full-width input."""
    return conv.k * conv.in_hw[1] * conv.c_in * bits


def conv_weight_bits(conv, bits: int) -> int:
    return conv.params * bits


@dataclass
class _Unit:
    """A mappable group of convolutions sharing one output channel axis."""

    name: str
    kind: str
    convs: list
    channels: int
    bn_channels: int = 0
    state_values: int = 0  # dense per-neuron states plus thresholds
    produced: list = field(default_factory=list)  # (density key or None for dense outputs, neurons)
    self_key: str | None = None  # recurrent input that lives in the state


def _units(spec: NetworkSpec) -> list[_Unit]:
    out = []
    for l in describe(spec):
        if l.kind == "SSDHead":
            for c in l.convs:
                if ".stem" in c.name:
                    out.append(_Unit(c.name, "HeadStem", [c], c.c_out,
                                     produced=[(c.name, c.c_out * c.out_hw[0] * c.out_hw[1])]))
            pred = [c for c in l.convs if ".stem" not in c.name]
            ch = sum(c.c_out for c in pred)
            out.append(_Unit(l.name, l.kind, pred, ch, produced=[(None, ch * pred[0].out_hw[0] * pred[0].out_hw[1])]))
        elif l.kind == "ResidualBlock":
            c1 = l.convs[0]
            out.append(_Unit(l.name, l.kind, l.convs, l.out_channels, l.bn_channels,
                             produced=[(f"{l.name}.mid", c1.c_out * c1.out_hw[0] * c1.out_hw[1]),
                                       (l.output_key, l.neurons)]))
        elif l.kind == "EventConvRNN":
            out.append(_Unit(l.name, l.kind, l.convs, l.out_channels, 0,
                             l.state_tensors * l.neurons + l.threshold_count, [(l.output_key, l.neurons)],
                             self_key=l.output_key))
        else:
            out.append(_Unit(l.name, l.kind, l.convs, l.out_channels, l.bn_channels,
                             produced=[(l.output_key, l.neurons)]))
    return out


def unit_buffer_bits(convs, bits: int, self_key=None) -> int:
    """One line buffer per distinct feed-forward input.

    Convolutions sharing an input share its buffer (sized by the tallest
    kernel).  A recurrent layer's own previous output is not buffered: it is
    recomputed from the stored state and thresholds.
    """
    rows = {}
    for c in convs:
        if c.input_key == self_key:
            continue
        k, w, ch = rows.get(c.input_key, (0, c.in_hw[1], c.c_in))
        rows[c.input_key] = (max(k, c.k), w, ch)
    return sum(k * w * ch * bits for k, w, ch in rows.values())


def required_keys(spec: NetworkSpec) -> list[str]:
    keys = []
    for u in _units(spec):
        for k in [c.input_key for c in u.convs] + [k for k, _ in u.produced if k is not None]:
            if k not in keys:
                keys.append(k)
    return keys


def uniform_densities(spec: NetworkSpec, value: float = 1.0) -> dict:
    return {k: float(value) for k in required_keys(spec)}


def _density(densities, key, layer):
    if key not in densities:
        raise KeyError(f"layer {layer}: no density recorded for activation {key!r}")
    d = float(densities[key])
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"density of {key!r} must lie in [0, 1], got {d}")
    return d


def footprint(spec: NetworkSpec, bits: int = 16, densities: dict | None = None) -> list[LayerFootprint]:
    """Per-unit memory and per-frame work.

    Weights count every inference parameter (batch norm folded to one shift
    per channel).  Recurrent layers additionally hold their dense states and
    per-neuron thresholds.  Each head stem and each scale's prediction pair
    is its own unit.  Without ``densities`` every activation is dense.
    """
    if bits <= 0:
        raise ValueError("bits must be positive")
    densities = uniform_densities(spec) if densities is None else densities
    out = []
    for u in _units(spec):
        w = sum(conv_weight_bits(c, bits) for c in u.convs) + u.bn_channels * bits
        macs = sum(c.dense_synops() * _density(densities, c.input_key, u.name) for c in u.convs)
        events = sum(c.c_in * c.in_hw[0] * c.in_hw[1] * _density(densities, c.input_key, u.name) for c in u.convs)
        neurons = emitted = 0.0
        for key, n in u.produced:
            neurons += n
            emitted += n * (1.0 if key is None else _density(densities, key, u.name))
        out.append(LayerFootprint(u.name, u.kind, u.channels, int(w), int(u.state_values * bits),
                                  int(unit_buffer_bits(u.convs, bits, u.self_key)), macs, events, neurons, emitted))
    return out


def count_gsop(spec: NetworkSpec, densities: dict | None = None) -> dict:
    """Effective synaptic operations per frame (in units of 1e9), per layer and in total."""
    per = {f.name: f.macs / 1e9 for f in footprint(spec, 16, densities)}
    return {"per_layer": per, "total": float(sum(per.values()))}


def memory_mbit(fps) -> float:
    """Total network memory in megabits (1e6 bits)."""
    return sum(f.total_bits for f in fps) / 1e6


# ---------------------------------------------------------------- mapping


def channel_ranges(channels: int, n: int) -> list[tuple[int, int]]:
    """Contiguous split into ``n`` ranges whose sizes differ by at most one (larger first)."""
    base, extra = divmod(channels, n)
    out, start = [], 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size))
        start += size
    return out


def core_memory(fp: LayerFootprint, n_channels: int) -> int:
    return fp.buffer_bits + math.ceil(fp.split_bits * n_channels / fp.channels)


def core_instructions(fp: LayerFootprint, n_channels: int, model: KernelCostModel) -> dict:
    share = n_channels / fp.channels
    return {
        "integrate": fp.input_events * model.a_int,
        "mac": fp.macs * share * model.k_mac,
        "generate": fp.neurons * share * model.a_gen,
        "emit": fp.emitted * share * model.a_emit,
    }


def layer_load(fp: LayerFootprint, n_cores: int, model: KernelCostModel) -> float:
    """Instructions per frame on the busiest core of a layer split over ``n_cores``."""
    return sum(core_instructions(fp, math.ceil(fp.channels / n_cores), model).values())


def min_cores(fp: LayerFootprint, mem_bits: int) -> int | None:
    """Fewest cores whose channel split fits ``mem_bits`` per core, or None if impossible."""
    for n in _distinct_splits(fp.channels):
        if core_memory(fp, math.ceil(fp.channels / n)) <= mem_bits:
            return n
    return None


def _distinct_splits(channels: int):
    """Core counts at which the largest channel share changes, ascending."""
    seen = set()
    for n in range(1, channels + 1):
        m = math.ceil(channels / n)
        if m not in seen:
            seen.add(m)
            yield n


@dataclass
class CoreAssignment:
    core: int
    layer: str
    channels: tuple  # [start, end)
    mem_bits: int
    instructions: float


@dataclass
class Mapping:
    spec_name: str
    bits: int
    core_budget: int | None  # None means unlimited
    cores_per_layer: dict
    assignments: list = field(default_factory=list)
    footprints: list = field(default_factory=list)
    feasible: bool = True
    reason: str = ""
    infeasible_layer: str | None = None

    @property
    def cores_used(self) -> int:
        return sum(self.cores_per_layer.values())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "core", "channel_start", "channel_end", "mem_bits", "instructions"])
            for a in self.assignments:
                w.writerow([a.layer, a.core, a.channels[0], a.channels[1], a.mem_bits, f"{a.instructions:.1f}"])


def _assign(fps, counts, model):
    out, core = [], 0
    for fp in fps:
        for lo, hi in channel_ranges(fp.channels, counts[fp.name]):
            ins = sum(core_instructions(fp, hi - lo, model).values())
            out.append(CoreAssignment(core, fp.name, (lo, hi), core_memory(fp, hi - lo), ins))
            core += 1
    return out


def map_network(fps: list[LayerFootprint], proc: ProcessorSpec = ProcessorSpec(), core_budget: int | None = -1,
                model: KernelCostModel = KernelCostModel(), spec_name: str = "") -> Mapping:
    """Greedy two-phase channel-wise mapping.

    Phase one gives every layer the fewest cores that satisfy the per-core
    memory bound.  Phase two repeatedly grants one more core to the layer
    owning the busiest core (lowest layer index on ties) until the budget is
    spent or that layer already has one channel per core.  ``core_budget``
    defaults to the processor's core count; ``None`` means unlimited.
    """
    budget = proc.core_count if core_budget == -1 else core_budget
    if budget is not None and budget < 1:
        raise ValueError("core budget must be positive")
    bits = 0  # set by callers that know the bit width
    counts, used = {}, 0
    for fp in fps:
        n = min_cores(fp, proc.mem_per_core_bits)
        if n is None:
            return Mapping(spec_name, bits, budget, {}, footprints=fps, feasible=False, infeasible_layer=fp.name,
                           reason=f"layer {fp.name}: one channel per core still exceeds "
                                  f"{proc.mem_per_core_bits} bits (line buffer {fp.buffer_bits} bits)")
        if budget is not None and used + n > budget:
            return Mapping(spec_name, bits, budget, counts, footprints=fps, feasible=False, infeasible_layer=fp.name,
                           reason=f"layer {fp.name} needs {n} cores for memory but only {budget - used} of "
                                  f"{budget} remain")
        counts[fp.name] = n
        used += n
    cap = budget if budget is not None else _UNLIMITED_CAP
    loads = {fp.name: layer_load(fp, counts[fp.name], model) for fp in fps}
    by_name = {fp.name: fp for fp in fps}
    order = {fp.name: i for i, fp in enumerate(fps)}
    while used < cap:
        busiest = max(loads, key=lambda k: (loads[k], -order[k]))
        fp = by_name[busiest]
        if counts[busiest] >= fp.channels:
            break
        counts[busiest] += 1
        used += 1
        loads[busiest] = layer_load(fp, counts[busiest], model)
    m = Mapping(spec_name, bits, budget, counts, _assign(fps, counts, model), fps)
    for a in m.assignments:
        if a.mem_bits > proc.mem_per_core_bits:
            raise AssertionError(f"core {a.core} of {a.layer} exceeds memory: {a.mem_bits} bits")
    return m


def optimal_max_load(fps, proc: ProcessorSpec, budget: int, model: KernelCostModel = KernelCostModel()):
    """Exhaustive search over per-layer core counts; smallest achievable busiest-core load."""
    lo = [min_cores(fp, proc.mem_per_core_bits) for fp in fps]
    if any(v is None for v in lo) or sum(lo) > budget:
        return None
    ranges = [range(l, min(fp.channels, budget - sum(lo) + l) + 1) for fp, l in zip(fps, lo)]
    best = math.inf
    for combo in itertools.product(*ranges):
        if sum(combo) > budget:
            continue
        best = min(best, max(layer_load(fp, n, model) for fp, n in zip(fps, combo)))
    return best


def max_load(mapping: Mapping) -> float:
    return max((a.instructions for a in mapping.assignments), default=0.0)


# ---------------------------------------------------------------- simulation


@dataclass
class HwReport:
    energy_mJ: float
    latency_ms: float
    memory_Mb: float
    cores: int
    gsop: float
    per_layer: list
    calibrated: bool
    cost_model: dict
    feasible: bool = True
    reason: str = ""
    frames: int = 1
    busiest_core_instructions: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def simulate(mapping: Mapping, model: KernelCostModel = KernelCostModel(), proc: ProcessorSpec = ProcessorSpec(),
             frames: int = 1) -> HwReport:
    """Latency is the busiest core's instruction count times the instruction time; energy sums all cores."""
    if frames < 1:
        raise ValueError("frames must be positive")
    fps = mapping.footprints
    gsop = sum(f.macs for f in fps) / 1e9
    mem = memory_mbit(fps)
    if not mapping.feasible:
        return HwReport(math.nan, math.nan, mem, mapping.cores_used, gsop, [], model.calibrated, model.to_json(),
                        False, mapping.reason, frames)
    energy_pj = model.energy
    per_layer, total_pj, busiest = [], 0.0, 0.0
    by_layer = {}
    for a in mapping.assignments:
        by_layer.setdefault(a.layer, []).append(a)
    for fp in fps:
        layer_pj, layer_max = 0.0, 0.0
        for a in by_layer[fp.name]:
            ins = core_instructions(fp, a.channels[1] - a.channels[0], model)
            core_total = sum(ins.values()) * frames
            layer_pj += sum(v * energy_pj[k] for k, v in ins.items()) * frames
            layer_max = max(layer_max, core_total)
        busiest = max(busiest, layer_max)
        total_pj += layer_pj
        per_layer.append({
            "layer": fp.name, "cores": len(by_layer[fp.name]), "weight_bits": fp.weight_bits,
            "state_bits": fp.state_bits, "buffer_bits": fp.buffer_bits, "gsop": fp.macs / 1e9,
            "busiest_core_instructions": layer_max, "energy_mJ": layer_pj * 1e-9,
        })
    return HwReport(
        energy_mJ=total_pj * 1e-9,
        latency_ms=busiest * proc.ns_per_instruction * 1e-6,
        memory_Mb=mem,
        cores=mapping.cores_used,
        gsop=gsop,
        per_layer=per_layer,
        calibrated=model.calibrated,
        cost_model=model.to_json(),
        frames=frames,
        busiest_core_instructions=busiest,
    )


def run_hwsim(spec: NetworkSpec, densities: dict | None = None, bits: int = 16, proc: ProcessorSpec = ProcessorSpec(),
              core_budget: int | None = -1, model: KernelCostModel = KernelCostModel(), frames: int = 1):
    fps = footprint(spec, bits, densities)
    mapping = map_network(fps, proc, core_budget, model, spec.name)
    mapping.bits = bits
    return mapping, simulate(mapping, model, proc, frames)


def mean_densities(traces: list[dict]) -> dict:
    keys = set().union(*traces) if traces else set()
    return {k: float(np.mean([t[k] for t in traces if k in t])) for k in sorted(keys)}
