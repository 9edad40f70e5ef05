"""Analytic parameter, operation, memory and energy accounting.

Counting convention: one multiply-accumulate is one FLOP; a convolution bias add
costs one op per output element, batchnorm two (scale and shift), ReLU and
global pooling one per element, the fusion operator one per fused element
(zero for concatenation), and the classifier F*K MACs plus K bias adds.
A training epoch costs three times the forward ops of the segment being
trained (forward plus a backward pass at twice the forward cost), per sample.
Memory is counted in 4-byte floats; a trainable tensor needs four copies
(value, gradient, two Adam moments).
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import ModelConfig, layer_plan

BYTES_PER_VALUE = 4
TRAINING_COPIES = 4  # value, gradient, Adam first and second moments
BACKWARD_FACTOR = 3  # forward + 2x forward for backward
POLICIES = ("full", "classifier-only", "embedding-only", "backbone-only")

# Published reference figures (four samples per class on GSC10, batch 10):
# FLOPs [M], memory [kB], energy [uJ] per epoch.
REFERENCE_COSTS = {
    ("S", "full"): (354, 1530, 4481), ("M", "full"): (2064, 5467, 26126), ("L", "full"): (6252, 12998, 79139),
    ("S", "classifier-only"): (0.07, 8.1, 0.98), ("M", "classifier-only"): (0.20, 21.5, 2.62),
    ("L", "classifier-only"): (0.33, 34.4, 4.20),
    ("S", "embedding-only"): (1.04, 3.6, 13.22), ("M", "embedding-only"): (2.80, 9.7, 35.53),
    ("L", "embedding-only"): (4.50, 15.5, 57.01),
}
REFERENCE_PARAMS = {"S": 23.7e3, "M": 138.1e3, "L": 416.7e3}
REFERENCE_OPS = {"S": 2.95e6, "M": 17.2e6, "L": 52.1e6}


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    ops: int
    activations: int  # output values per sample


def layer_costs(config: ModelConfig):
    """Per-layer parameter, op and activation counts for one sample."""
    config.validate()
    rows = []
    for spec in layer_plan(config):
        kh, kw = spec.kernel
        ho, wo = spec.out_hw
        co, ci = spec.out_channels, spec.in_channels
        out = ho * wo * co
        if spec.kind == "conv":
            weights, macs = kh * kw * ci * co, ho * wo * kh * kw * ci * co
        else:
            weights, macs = kh * kw * co, ho * wo * kh * kw * co
        rows.append(LayerCost(spec.name, weights + co, macs + out, out))
        rows.append(LayerCost(f"{spec.name}.bn", 2 * co, 2 * out, out))
        rows.append(LayerCost(f"{spec.name}.relu", 0, out, out))
    pooled = config.pooled_width
    rows.append(LayerCost("pool", 0, ho * wo * pooled, pooled))
    fuse_ops = config.width if config.fusion in ("add", "mul") else 0
    rows.append(LayerCost("fuse", 0, fuse_ops, config.classifier_width))
    f, k = config.classifier_width, config.num_classes
    rows.append(LayerCost("classifier", f * k + k, f * k + k, k))
    return rows


def count_params(config: ModelConfig, embedding_rows=0) -> int:
    """Weights, biases and batchnorm affine terms, plus ``embedding_rows`` rows
    of the speaker table. Batchnorm running statistics are not parameters."""
    return sum(r.params for r in layer_costs(config)) + embedding_rows * config.width


def count_inference_ops(config: ModelConfig) -> int:
    return sum(r.ops for r in layer_costs(config))


def _segment(config, names):
    return {r.name: r for r in layer_costs(config) if r.name in names}


@dataclass(frozen=True)
class UpdateStrategy:
    policy: str = "embedding-only"
    samples: int = 40
    batch_size: int = 10

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.samples < 0 or self.batch_size < 0:
            raise ValueError("samples and batch_size must be non-negative")


def training_flops(config: ModelConfig, strategy: UpdateStrategy) -> int:
    """FLOPs of one epoch over ``strategy.samples`` samples.

    With a frozen backbone the pooled activations are computed once up front and
    excluded from the per-epoch cost.
    """
    if strategy.policy in ("full", "backbone-only"):
        per_sample = count_inference_ops(config)
    elif strategy.policy == "classifier-only":
        per_sample = _segment(config, {"classifier"})["classifier"].ops
    else:
        per_sample = sum(r.ops for r in _segment(config, {"fuse", "classifier"}).values())
    return BACKWARD_FACTOR * per_sample * strategy.samples


def peak_training_memory(config: ModelConfig, strategy: UpdateStrategy) -> int:
    """Peak bytes held during one training step.

    embedding-only: the speaker's row x 4 copies, plus a batch of fusion-point
    activations. classifier-only: classifier weights x 4 copies, plus a batch of
    classifier inputs and logits. full / backbone-only: every parameter x 4
    copies (one embedding row), plus a batch of the input map, each layer's
    output, the pooled and fused vectors and the logits.
    """
    b = strategy.batch_size
    if strategy.policy == "embedding-only":
        values = TRAINING_COPIES * config.width + b * config.pooled_width
    elif strategy.policy == "classifier-only":
        values = TRAINING_COPIES * _segment(config, {"classifier"})["classifier"].params
        values += b * (config.classifier_width + config.num_classes)
    else:
        h, w = config.input_shape
        stored = h * w + sum(r.activations for r in layer_costs(config) if "." not in r.name)
        values = TRAINING_COPIES * count_params(config, embedding_rows=1) + b * stored
    return BYTES_PER_VALUE * values


@dataclass(frozen=True)
class SocProfile:
    name: str
    flops_per_joule: float  # FLOP/s/W
    memory_levels: tuple = ()  # ((name, bytes), ...) innermost first

    def __post_init__(self):
        if self.flops_per_joule <= 0:
            raise ValueError("efficiency must be positive")

    @classmethod
    def from_file(cls, path):
        """Key-value profile: ``name``, ``gflops_per_watt``, ``mem.<level> = bytes``."""
        name, eff, levels = Path(path).stem, None, []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key == "name":
                name = value
            elif key == "gflops_per_watt":
                eff = float(value) * 1e9
            elif key.startswith("mem."):
                levels.append((key[4:], int(float(value))))
            else:
                raise ValueError(f"{path}: unknown key {key!r}")
        if eff is None:
            raise ValueError(f"{path}: missing gflops_per_watt")
        return cls(name, eff, tuple(levels))


VEGA = SocProfile("vega", 79e9, (("L2", 1_600_000), ("L3", 2_000_000)))


def energy(flops, profile: SocProfile = VEGA) -> float:
    """Joules to execute ``flops`` at the profile's FLOP/s/W efficiency."""
    return flops / profile.flops_per_joule


@dataclass(frozen=True)
class FitVerdict:
    levels: dict
    level: str | None  # innermost level that holds the working set

    @property
    def fits(self):
        return self.level is not None

    def __str__(self):
        return self.level if self.fits else "does not fit"


def fits_on(profile: SocProfile, peak_bytes) -> FitVerdict:
    if isinstance(peak_bytes, CostReport):
        peak_bytes = peak_bytes.peak_memory_bytes
    levels = {name: peak_bytes <= cap for name, cap in profile.memory_levels}
    first = next((name for name, ok in levels.items() if ok), None)
    return FitVerdict(levels, first)


@dataclass(frozen=True)
class CostReport:
    size: str
    policy: str
    samples: int
    batch_size: int
    parameters: int
    inference_ops: int
    training_flops: int
    peak_memory_bytes: int
    energy_joules: float
    reference: dict = field(default_factory=dict)

    @property
    def row(self):
        d = asdict(self)
        ref = d.pop("reference")
        d.update({f"ref_{k}": v for k, v in ref.items()})
        return d


def cost_report(config: ModelConfig, strategy: UpdateStrategy, profile: SocProfile = VEGA,
                embedding_rows=0) -> CostReport:
    flops = training_flops(config, strategy)
    ref = REFERENCE_COSTS.get((config.size, strategy.policy))
    reference = {}
    if ref and config.num_classes == 10 and strategy.samples == 40:
        reference = {"mflops": ref[0], "memory_kb": ref[1], "energy_uj": ref[2]}
    return CostReport(config.size, strategy.policy, strategy.samples, strategy.batch_size,
                      count_params(config, embedding_rows), count_inference_ops(config), flops,
                      peak_training_memory(config, strategy), energy(flops, profile), reference)


def format_reports(reports, fmt="text"):
    """Table of reports: ``csv`` or aligned ``text`` (M FLOP, kB, uJ units)."""
    cols = ["size", "policy", "samples", "params", "infer_MFLOP", "train_MFLOP", "memory_kB", "energy_uJ",
            "ref_MFLOP", "ref_kB", "ref_uJ"]
    rows = []
    for r in reports:
        ref = r.reference
        rows.append([r.size, r.policy, r.samples, r.parameters, f"{r.inference_ops / 1e6:.3f}",
                     f"{r.training_flops / 1e6:.3f}", f"{r.peak_memory_bytes / 1e3:.1f}",
                     f"{r.energy_joules * 1e6:.2f}", ref.get("mflops", ""), ref.get("memory_kb", ""),
                     ref.get("energy_uj", "")])
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        writer.writerows(rows)
        return buf.getvalue()
    table = [cols] + [[str(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in table) + "\n"
