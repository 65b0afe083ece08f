"""Parameter and multiply-accumulate accounting.

Convolutions count ``k*k*(Cin/g)*Cout`` Mult-Adds per output position, linear
layers ``Din*Dout`` per token and attention ``heads*L*L*(d_q + d_v)`` per
call.  Layers run at the LR grid of the requested HR size; weight-shared LFFMs
are charged for both passes and transformer modules for every recursion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

from lbnet.arch.model import LBNetModel
from lbnet.errors import UsageError

DEFAULT_HR_SIZE = (720, 1280)  # (height, width)

_FOOTER = (
    "cnn-side total counts convolutions only; transformer-side (linear + attention) is listed separately",
    "the reference per-recursion Mult-Adds increment (~0.0004G) is smaller than a single transformer "
    "pass at this size, so transformer cost is not comparable to that accounting",
)


@dataclass
class ProfileRow:
    name: str
    params: int
    mult_adds: int
    side: str = "cnn"


@dataclass
class ProfileReport:
    """Per-layer parameter and Mult-Add rows at one HR output size."""

    hr_size: Tuple[int, int]
    rows: List[ProfileRow] = field(default_factory=list)
    notes: Tuple[str, ...] = _FOOTER

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_mult_adds(self) -> int:
        return sum(r.mult_adds for r in self.rows)

    @property
    def cnn_mult_adds(self) -> int:
        return sum(r.mult_adds for r in self.rows if r.side == "cnn")

    @property
    def transformer_mult_adds(self) -> int:
        return sum(r.mult_adds for r in self.rows if r.side == "transformer")

    def summary(self) -> str:
        h, w = self.hr_size
        return (f"params {format_count(self.total_params, 'K')}  "
                f"mult-adds(cnn) {format_count(self.cnn_mult_adds, 'G')}  "
                f"mult-adds(transformer) {format_count(self.transformer_mult_adds, 'G')}  "
                f"@ {w}x{h}")

    def to_tsv(self) -> str:
        lines = ["name\tparams\tmult_adds"]
        lines += [f"{r.name}\t{r.params}\t{r.mult_adds}" for r in self.rows]
        lines.append(f"TOTAL\t{self.total_params}\t{self.total_mult_adds}")
        lines.append(f"# cnn_mult_adds\t{self.cnn_mult_adds}")
        lines.append(f"# transformer_mult_adds\t{self.transformer_mult_adds}")
        lines += [f"# {note}" for note in self.notes]
        return "\n".join(lines) + "\n"


def format_count(value: float, unit: str) -> str:
    """Three significant figures in K / M / G units, e.g. ``742K`` or ``38.9G``."""
    scaled = value / {"K": 1e3, "M": 1e6, "G": 1e9}[unit]
    if scaled == 0:
        return f"0{unit}"
    digits = len(str(int(abs(scaled)))) if abs(scaled) >= 1 else 1
    decimals = max(0, 3 - digits)
    return f"{scaled:.{decimals}f}{unit}"


def count_mult_adds(model: LBNetModel, hr_size: Tuple[int, int] = DEFAULT_HR_SIZE) -> ProfileReport:
    """Build the per-layer profile for an ``(height, width)`` HR output."""
    cfg = model.config
    hr_h, hr_w = hr_size
    s = cfg.scale
    if hr_h % s or hr_w % s:
        raise UsageError(f"HR size {hr_w}x{hr_h} is not divisible by scale {s}")
    positions = (hr_h // s) * (hr_w // s)
    report = ProfileReport(hr_size=(hr_h, hr_w))
    for spec in model.layers.values():
        if spec.site == "grid":
            per_call = spec.k * spec.k * (spec.cin // spec.groups) * spec.cout * positions
        elif spec.site == "pooled":
            per_call = (spec.cin // spec.groups) * spec.cout
        elif spec.site == "tokens":
            per_call = spec.cin * spec.cout * positions
        else:
            per_call = 0
        report.rows.append(ProfileRow(spec.name, spec.params, per_call * spec.calls, spec.side))
        if spec.name.endswith(".qkv"):
            tm = spec.name[: -len(".qkv")]
            attn = cfg.heads * positions * positions * 2 * cfg.head_dim
            report.rows.append(ProfileRow(f"{tm}.attention", 0, attn * spec.calls, "transformer"))
    return report
