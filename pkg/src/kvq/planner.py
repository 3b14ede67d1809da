"""KV-cache memory accounting: fp16 footprint, average bits per element, compression ratio.

Accounting conventions (independent of the runtime's in-memory dtypes):

* nuq affine: 16-bit scale + 16-bit offset per vector.
* int affine: 16-bit scale + a ``bits``-wide integer zero point.
* sparse outliers: 16-bit value + 16-bit index each, plus a 32-bit pointer
  per stored vector (omitted when there are no outliers).
* Keys are per-channel, so one affine and one pointer amortize over ``l``
  tokens. Values are per-token, amortized over the ``h * d`` elements a
  token contributes to one layer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

SCHEMES = ("fp16", "int", "nuq")
_SCHEME_RE = re.compile(r"^(fp16|int|nuq)(\d+)?(?:-(\d+(?:\.\d+)?)%)?$")


@dataclass(frozen=True)
class PlanConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    batch: int
    seq_len: int
    bits: int = 16
    outlier_fraction: float = 0.0
    scheme: str = "fp16"

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "head_dim", "batch", "seq_len", "bits"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier_fraction must be in [0, 0.5)")
        if self.scheme == "fp16" and (self.bits != 16 or self.outlier_fraction):
            raise ValueError("fp16 has no bit width or outliers to configure")

    @property
    def hidden(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def elements(self) -> int:
        """Cached scalars: 2 (K and V) * n * h * d * b * l."""
        return 2 * self.n_layers * self.hidden * self.batch * self.seq_len


@dataclass(frozen=True)
class PlanReport:
    scheme: str
    seq_len: int
    fp16_bytes: int
    quant_bytes: float
    avg_bits_per_element: float
    compression_ratio: float

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "seq_len": self.seq_len,
            "fp16_bytes": self.fp16_bytes,
            "quant_bytes": self.quant_bytes,
            "avg_bits_per_element": self.avg_bits_per_element,
            "compression_ratio": self.compression_ratio,
        }


def parse_scheme(name: str) -> tuple[str, int, float]:
    """``"nuq3-1%"`` -> ``("nuq", 3, 0.01)``; ``"fp16"`` -> ``("fp16", 16, 0.0)``."""
    m = _SCHEME_RE.match(name.strip())
    if not m:
        raise ValueError(f"cannot parse scheme {name!r}")
    kind, bits, pct = m.groups()
    if kind == "fp16":
        if bits or pct:
            raise ValueError(f"fp16 takes no suffix: {name!r}")
        return "fp16", 16, 0.0
    if bits is None:
        raise ValueError(f"{kind} scheme needs a bit width: {name!r}")
    return kind, int(bits), float(pct) / 100 if pct else 0.0


def scheme_config(base: PlanConfig, name: str) -> PlanConfig:
    kind, bits, f = parse_scheme(name)
    return replace(base, scheme=kind, bits=bits, outlier_fraction=f)


def fp16_kv_bytes(cfg: PlanConfig) -> int:
    # python ints do not overflow
    return cfg.elements * 2


def _affine_bits(cfg: PlanConfig) -> int:
    return 32 if cfg.scheme == "nuq" else 16 + cfg.bits


def _half_bits(cfg: PlanConfig, vector_len: int) -> float:
    bits = cfg.bits + _affine_bits(cfg) / vector_len
    if cfg.outlier_fraction > 0:
        bits += 32 * cfg.outlier_fraction + 32 / vector_len
    return bits


def key_bits(cfg: PlanConfig) -> float:
    return float(cfg.bits) if cfg.scheme == "fp16" else _half_bits(cfg, cfg.seq_len)


def value_bits(cfg: PlanConfig) -> float:
    return float(cfg.bits) if cfg.scheme == "fp16" else _half_bits(cfg, cfg.hidden)


def avg_bits(cfg: PlanConfig) -> float:
    return (key_bits(cfg) + value_bits(cfg)) / 2


def compression_ratio(cfg: PlanConfig) -> float:
    return 16 / avg_bits(cfg)


def plan(cfg: PlanConfig, label: str | None = None) -> PlanReport:
    fp16 = fp16_kv_bytes(cfg)
    bits = avg_bits(cfg)
    return PlanReport(
        scheme=label or (cfg.scheme if cfg.scheme == "fp16" else f"{cfg.scheme}{cfg.bits}"),
        seq_len=cfg.seq_len,
        fp16_bytes=fp16,
        quant_bytes=cfg.elements * bits / 8,
        avg_bits_per_element=bits,
        compression_ratio=16 / bits,
    )


def plan_grid(base: PlanConfig, schemes: list[str], seq_lens: list[int]) -> list[PlanReport]:
    return [plan(replace(scheme_config(base, s), seq_len=l), s) for s in schemes for l in seq_lens]


def _human_bytes(n: float) -> str:
    for unit in ("B", "KB", "MB", "GB", "TB"):
        if n < 1000 or unit == "TB":
            return f"{n:.2f} {unit}" if unit != "B" else f"{n:.0f} B"
        n /= 1000
    return f"{n:.2f} TB"


def render_table(reports: list[PlanReport]) -> str:
    """One row per scheme, one KV-size column per sequence length, then avg bits and ratio."""
    seq_lens = sorted({r.seq_len for r in reports})
    schemes = list(dict.fromkeys(r.scheme for r in reports))
    by_key = {(r.scheme, r.seq_len): r for r in reports}
    head = ["scheme"] + [f"l={l}" for l in seq_lens] + ["avg_bits", "ratio"]
    rows = []
    for s in schemes:
        cells = [by_key[s, l] for l in seq_lens if (s, l) in by_key]
        last = cells[-1]
        rows.append([s] + [_human_bytes(c.quant_bytes) for c in cells]
                    + [f"{last.avg_bits_per_element:.3f}", f"{last.compression_ratio:.3f}"])
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


MODEL_FIELDS = ("n_layers", "n_heads", "head_dim")


def model_config(d: dict, seq_len: int = 1, batch: int | None = None) -> PlanConfig:
    """Shape dict (``n_layers``, ``n_heads``, ``head_dim``, optional ``batch``) -> fp16 PlanConfig."""
    missing = [k for k in MODEL_FIELDS if k not in d]
    if missing:
        raise ValueError(f"model config is missing {', '.join(missing)}")
    return PlanConfig(
        n_layers=d["n_layers"],
        n_heads=d["n_heads"],
        head_dim=d["head_dim"],
        batch=batch if batch is not None else d.get("batch", 1),
        seq_len=seq_len,
    )
