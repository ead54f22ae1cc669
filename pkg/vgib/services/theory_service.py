"""Exact information-theoretic checks on small discrete joint distributions.

Tables are built as p(Y) p(Gn) p(G | Y, Gn) p(child | G), so Y and the
nuisance Gn are independent and the child sees Y and Gn only through G.
All quantities are in nats.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from vgib.exceptions import ConfigError, InvalidTableError
from vgib.utils.autodiff import Rng

logger = logging.getLogger(__name__)

TABLE_TOLERANCE = 1e-12
MARGIN_TOLERANCE = 1e-9
MAX_ALPHABET = 4

CHAIN_AXES = ("Y", "Gn", "G", "GN", "Gsub")


@dataclass(frozen=True)
class JointTable:
    names: Tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != len(self.names):
            raise InvalidTableError(f"table has {probs.ndim} axes for variables {self.names}")
        if len(set(self.names)) != len(self.names):
            raise InvalidTableError(f"duplicate variable names in {self.names}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise InvalidTableError("table has negative or non-finite entries")
        if abs(probs.sum() - 1.0) > TABLE_TOLERANCE:
            raise InvalidTableError(f"table sums to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", probs)

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidTableError(f"unknown variable {name!r}; table has {self.names}") from None

    def marginal(self, *names: str) -> np.ndarray:
        """Marginal over ``names``, axes in the order given."""
        keep = [self.axis(n) for n in names]
        dropped = tuple(i for i in range(len(self.names)) if i not in keep)
        reduced = self.probs.sum(axis=dropped)
        remaining = sorted(keep)
        return np.transpose(reduced, [remaining.index(i) for i in keep])

    @classmethod
    def from_conditionals(
        cls,
        p_y: np.ndarray,
        p_gn: np.ndarray,
        p_g_given: np.ndarray,
        p_child_given: np.ndarray,
        child: str = "Gsub",
    ) -> "JointTable":
        """p(y) p(gn) p(g | y, gn) p(child | g)."""
        _check_distribution(p_y, "p(Y)")
        _check_distribution(p_gn, "p(Gn)")
        _check_conditional(p_g_given, 2, "p(G | Y, Gn)")
        _check_conditional(p_child_given, 1, f"p({child} | G)")
        if p_g_given.shape[:2] != (len(p_y), len(p_gn)) or p_child_given.shape[0] != p_g_given.shape[2]:
            raise InvalidTableError("conditional table shapes do not chain")
        probs = np.einsum("y,n,ynk,kc->ynkc", p_y, p_gn, p_g_given, p_child_given)
        return cls(("Y", "Gn", "G", child), probs)


@dataclass(frozen=True)
class ChainTable:
    """Y, Gn, G, the noised GN given G, and Gsub = f(GN) for a deterministic map f."""

    table: JointTable
    coarse_graining: Tuple[int, ...]

    @classmethod
    def from_conditionals(
        cls,
        p_y: np.ndarray,
        p_gn: np.ndarray,
        p_g_given: np.ndarray,
        p_noised_given: np.ndarray,
        coarse_graining: Sequence[int],
        num_sub: Optional[int] = None,
    ) -> "ChainTable":
        _check_distribution(p_y, "p(Y)")
        _check_distribution(p_gn, "p(Gn)")
        _check_conditional(p_g_given, 2, "p(G | Y, Gn)")
        _check_conditional(p_noised_given, 1, "p(GN | G)")
        f = np.asarray(coarse_graining, dtype=np.int64)
        if f.shape != (p_noised_given.shape[1],):
            raise InvalidTableError(f"coarse-graining needs one entry per GN value, got {f.shape}")
        if f.size and f.min() < 0:
            raise InvalidTableError("coarse-graining maps to a negative index")
        size = int(f.max()) + 1 if num_sub is None else num_sub
        if f.max() >= size:
            raise InvalidTableError(f"coarse-graining value {int(f.max())} outside {size} Gsub values")
        deterministic = np.zeros((f.size, size))
        deterministic[np.arange(f.size), f] = 1.0
        probs = np.einsum("y,n,ynk,km,ms->ynkms", p_y, p_gn, p_g_given, p_noised_given, deterministic)
        return cls(JointTable(CHAIN_AXES, probs), tuple(int(v) for v in f))


def _check_distribution(p: np.ndarray, label: str) -> None:
    p = np.asarray(p)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > TABLE_TOLERANCE:
        raise InvalidTableError(f"{label} is not a probability vector")


def _check_conditional(p: np.ndarray, condition_axes: int, label: str) -> None:
    p = np.asarray(p)
    if p.ndim != condition_axes + 1 or np.any(p < 0):
        raise InvalidTableError(f"{label} has the wrong shape or negative entries")
    if np.max(np.abs(p.sum(axis=-1) - 1.0)) > TABLE_TOLERANCE:
        raise InvalidTableError(f"{label} rows do not sum to 1")


def _check_structure(table: JointTable, child: str) -> None:
    """Y independent of Gn, and the child depends on (Y, Gn) only through G."""
    p_y_gn = table.marginal("Y", "Gn")
    independent = np.outer(table.marginal("Y"), table.marginal("Gn"))
    if np.max(np.abs(p_y_gn - independent)) > TABLE_TOLERANCE:
        raise InvalidTableError("Y and Gn are not independent in this table")

    full = table.marginal("Y", "Gn", "G", child)
    p_g = table.marginal("G")
    lhs = full * p_g[None, None, :, None]
    rhs = table.marginal("Y", "Gn", "G")[..., None] * table.marginal("G", child)[None, None, :, :]
    if np.max(np.abs(lhs - rhs)) > TABLE_TOLERANCE:
        raise InvalidTableError(f"{child} depends on Y or Gn beyond G")


def to_bits(value_nats: float) -> float:
    return value_nats / math.log(2.0)


class TheoryService:
    """Mutual information and margin checks for the bottleneck inequalities."""

    @staticmethod
    def mutual_information(table: JointTable, a: str, b: str) -> float:
        """Σ p(x,y) log(p(x,y) / (p(x) p(y))) with 0 log 0 = 0."""
        joint = table.marginal(a, b)
        independent = np.outer(joint.sum(axis=1), joint.sum(axis=0))
        return float(special.rel_entr(joint, independent).sum())

    @staticmethod
    def verify_lemma1(table: JointTable, child: str = "Gsub") -> float:
        """[I(child, G) - I(child, Y)] - I(child, Gn); non-negative for valid tables."""
        _check_structure(table, child)
        mi = TheoryService.mutual_information
        return (mi(table, child, "G") - mi(table, child, "Y")) - mi(table, child, "Gn")

    @staticmethod
    def verify_theorem1(chain: ChainTable) -> Tuple[float, float]:
        """Margins of I(Gsub, Gn) <= I(GN, Gn) and I(GN, Gn) <= I(GN, G) - I(GN, Y)."""
        table = chain.table
        _check_structure(JointTable(("Y", "Gn", "G", "GN"), table.marginal("Y", "Gn", "G", "GN")), "GN")
        mi = TheoryService.mutual_information
        noised_nuisance = mi(table, "GN", "Gn")
        first = noised_nuisance - mi(table, "Gsub", "Gn")
        second = mi(table, "GN", "G") - mi(table, "GN", "Y") - noised_nuisance
        return first, second

    @staticmethod
    def random_joint(sizes: Sequence[int], rng: Rng, child: str = "Gsub") -> JointTable:
        """Table with alphabet sizes (Y, Gn, G, child), conditionals from uniform simplices."""
        _check_sizes(sizes, 4)
        ny, nn, ng, nc = sizes
        return JointTable.from_conditionals(
            _simplex(rng, (), ny),
            _simplex(rng, (), nn),
            _simplex(rng, (ny, nn), ng),
            _simplex(rng, (ng,), nc),
            child,
        )

    @staticmethod
    def random_chain(sizes: Sequence[int], rng: Rng) -> ChainTable:
        """Chain with alphabet sizes (Y, Gn, G, GN, Gsub) and a random map GN -> Gsub."""
        _check_sizes(sizes, 5)
        ny, nn, ng, nm, ns = sizes
        return ChainTable.from_conditionals(
            _simplex(rng, (), ny),
            _simplex(rng, (), nn),
            _simplex(rng, (ny, nn), ng),
            _simplex(rng, (ng,), nm),
            [int(v) for v in rng.integers(0, ns - 1, size=nm)],
            num_sub=ns,
        )

    @staticmethod
    def run_trials(trials: int, seed: int) -> List[Dict[str, float]]:
        """One row of margins per random joint table and random chain."""
        if trials < 1:
            raise ConfigError(f"--trials must be positive, got {trials}")
        rng = Rng(seed)
        rows = []
        for trial in range(trials):
            lemma_sizes = [int(s) for s in rng.integers(2, MAX_ALPHABET, size=4)]
            chain_sizes = [int(s) for s in rng.integers(2, MAX_ALPHABET, size=5)]
            lemma = TheoryService.verify_lemma1(TheoryService.random_joint(lemma_sizes, rng))
            first, second = TheoryService.verify_theorem1(TheoryService.random_chain(chain_sizes, rng))
            rows.append({
                "trial": trial,
                "lemma1_margin": lemma,
                "thm1_margin_a": first,
                "thm1_margin_b": second,
            })
        worst = min(min(r["lemma1_margin"], r["thm1_margin_a"], r["thm1_margin_b"]) for r in rows)
        logger.info(f"Checked {trials} random tables; smallest margin {worst:.3e}")
        return rows


def _simplex(rng: Rng, leading: Tuple[int, ...], size: int) -> np.ndarray:
    draws = rng.dirichlet(np.ones(size), size=int(np.prod(leading)) if leading else None)
    return np.asarray(draws).reshape(leading + (size,))


def _check_sizes(sizes: Sequence[int], count: int) -> None:
    if len(sizes) != count:
        raise ConfigError(f"expected {count} alphabet sizes, got {len(sizes)}")
    for s in sizes:
        if not 2 <= s <= MAX_ALPHABET:
            raise ConfigError(f"alphabet size {s} outside [2, {MAX_ALPHABET}]")
