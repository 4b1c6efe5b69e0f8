"""Parameter and MAC accounting for the generator variants, compared
against the published reference budgets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .networks import SCCONV_POOL_RATE, generator_config, Generator
from .tensor import count_macs

# Reference budgets per variant: (parameters, MACs at 256x256).
REFERENCE_BUDGETS = {
    "T": (1.94e6, 2.88e9),
    "S": (7.70e6, 10.59e9),
    "B": (18.08e6, 38.28e9),
}

ASSUMPTIONS = [
    "counts cover the generator only (no discriminator or projection heads)",
    "token embedding dimension is 6x the first conv width, with a"
    " per-block embed/unembed pair at patch size 4",
    "self-calibrated convolutions pool at rate %d and appear in the stem,"
    " both downsampling stages, both upsampling stages, and once before"
    " the output head" % SCCONV_POOL_RATE,
    "decoder skip connections merge by addition (no channel concatenation)",
    "MACs count conv/linear/rational multiply-accumulates only;"
    " normalizations, activations and elementwise ops are excluded",
    "rational activations cost m+n+2 = 11 MACs per element",
]


@dataclass
class AuditReport:
    variant: str
    input_size: int
    param_breakdown: dict
    total_params: int
    total_macs: int
    mac_breakdown: dict
    reference_params: float
    reference_macs: float
    assumptions: list = field(default_factory=lambda: list(ASSUMPTIONS))

    @property
    def param_deviation(self):
        return self.total_params / self.reference_params - 1.0

    @property
    def mac_deviation(self):
        return self.total_macs / self.reference_macs - 1.0

    def to_dict(self):
        return {
            "variant": self.variant,
            "input_size": self.input_size,
            "param_breakdown": self.param_breakdown,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "mac_breakdown": self.mac_breakdown,
            "reference_params": self.reference_params,
            "reference_macs": self.reference_macs,
            "param_deviation": self.param_deviation,
            "mac_deviation": self.mac_deviation,
            "assumptions": self.assumptions,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self):
        lines = [
            f"variant {self.variant} @ {self.input_size}x{self.input_size}",
            "",
            f"{'submodule':<12}{'params':>12}",
        ]
        for name, count in self.param_breakdown.items():
            lines.append(f"{name:<12}{count:>12,}")
        lines += [
            f"{'total':<12}{self.total_params:>12,}"
            f"   (reference {self.reference_params / 1e6:.2f} M,"
            f" deviation {self.param_deviation:+.1%})",
            "",
            f"{'op':<12}{'MACs':>16}",
        ]
        for name, count in self.mac_breakdown.items():
            lines.append(f"{name:<12}{count:>16,}")
        lines += [
            f"{'total':<12}{self.total_macs:>16,}"
            f"   (reference {self.reference_macs / 1e9:.2f} G,"
            f" deviation {self.mac_deviation:+.1%})",
            "",
            "assumptions affecting the count:",
        ]
        lines += [f"  - {a}" for a in self.assumptions]
        return "\n".join(lines)


def audit_model(variant="S", input_size=256, generator=None):
    """Exact parameter count plus analytic MACs for one forward pass."""
    if generator is None:
        cfg = generator_config(variant)
        generator = Generator(cfg, np.random.default_rng(0))
    breakdown = {
        "encoder": generator.encoder.num_params(),
        "blocks": sum(b.num_params() for b in generator.blocks),
        "decoder": generator.decoder.num_params(),
    }
    total = generator.num_params()
    assert total == sum(breakdown.values())
    x = np.zeros((1, 3, input_size, input_size), dtype=np.float32)
    with count_macs() as tally:
        generator.forward(x)
    ref_p, ref_m = REFERENCE_BUDGETS[variant]
    return AuditReport(
        variant=variant, input_size=input_size,
        param_breakdown=breakdown, total_params=total,
        total_macs=sum(tally.values()), mac_breakdown=dict(tally),
        reference_params=ref_p, reference_macs=ref_m)
