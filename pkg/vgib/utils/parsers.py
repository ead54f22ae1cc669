import re
from typing import List, NamedTuple, Tuple

from vgib.exceptions import ConfigError


class MotifSpec(NamedTuple):
    kind: str
    size: int


# Shapes of the accepted textual forms.
_RANGE_PATTERN = re.compile(r'^\s*([0-9.]+)\s*:\s*([0-9.]+)\s*:\s*([0-9.]+)\s*$')
_CYCLE_PATTERN = re.compile(r'^cycle\s*:\s*(\d+)$')

_FIXED_MOTIFS = {
    'triangle': 3,
    'house': 5,
}


def _parse_float(token: str, flag: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise ConfigError(f"{flag}: {token!r} is not a number") from None


def parse_k_list(text: str) -> List[float]:
    """
    Parse a sparsity list for the fidelity sweep.
    Accepts "start:step:stop" (inclusive), "0.3,0.5" or a single value "1.0".
    Every value must lie in (0, 1].
    """
    text = text.strip()
    if not text:
        raise ConfigError("--k-list: empty value")

    match = _RANGE_PATTERN.match(text)
    if match:
        start, step, stop = (_parse_float(g, "--k-list") for g in match.groups())
        if step <= 0:
            raise ConfigError(f"--k-list: step must be positive, got {step!r}")
        if stop < start:
            raise ConfigError(f"--k-list: stop {stop!r} is below start {start!r}")
        count = int(round((stop - start) / step)) + 1
        values = [round(start + i * step, 10) for i in range(count)]
        if values[-1] > stop + 1e-9:
            values.pop()
    else:
        values = [round(_parse_float(tok.strip(), "--k-list"), 10) for tok in text.split(',') if tok.strip()]

    for k in values:
        if not 0.0 < k <= 1.0:
            raise ConfigError(f"--k-list: sparsity {k!r} outside (0, 1]")
    if not values:
        raise ConfigError("--k-list: no values")
    return values


def parse_motif(text: str) -> MotifSpec:
    """
    Parse a motif name: "triangle", "house" or "cycle:k" with k >= 3.
    """
    cleaned = text.strip().lower()
    if cleaned in _FIXED_MOTIFS:
        return MotifSpec(cleaned, _FIXED_MOTIFS[cleaned])

    match = _CYCLE_PATTERN.match(cleaned)
    if match:
        size = int(match.group(1))
        if size < 3:
            raise ConfigError(f"--motif: a cycle needs at least 3 nodes, got {size}")
        return MotifSpec('cycle', size)

    raise ConfigError(f"--motif: unknown motif {text!r} (expected triangle, house or cycle:k)")


def parse_fractions(text: str) -> Tuple[float, float, float]:
    """
    Parse "train,val,test" split fractions, e.g. "0.85,0.05,0.10".
    """
    parts = [tok.strip() for tok in text.split(',')]
    if len(parts) != 3:
        raise ConfigError(f"--split: expected three comma-separated fractions, got {text!r}")
    train, val, test = (_parse_float(p, "--split") for p in parts)
    return train, val, test
