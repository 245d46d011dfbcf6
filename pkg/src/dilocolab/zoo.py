"""Architecture bookkeeping: parameter counts, token budgets and step counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

CHINCHILLA_TOKENS_PER_PARAM = 20


@dataclass(frozen=True)
class ModelScale:
    name: str
    layers: int
    heads: int
    qkv_dim: int
    hidden_dim: int
    nominal_n: float
    vocab_size: int = 32768
    seq_len: int = 2048

    def __post_init__(self):
        for field in ("layers", "heads", "qkv_dim", "hidden_dim", "vocab_size", "seq_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{self.name}: {field} must be positive")
        if self.qkv_dim % self.heads:
            raise ValueError(f"{self.name}: qkv_dim {self.qkv_dim} not divisible by {self.heads} heads")
        if self.nominal_n <= 0:
            raise ValueError(f"{self.name}: nominal_n must be positive")


@dataclass(frozen=True)
class Budget:
    tokens_d: int
    overtrain_lambda: float = 1.0

    @classmethod
    def for_params(cls, n: float, overtrain_lambda: float = 1.0) -> "Budget":
        return cls(token_budget(n, overtrain_lambda), overtrain_lambda)


def estimate_params(scale: ModelScale) -> int:
    """Dense-transformer estimate ``12 * layers * d**2 + vocab * d``.

    Biases and norm gains are ignored and the input/output embeddings are
    tied, so the result is only expected to land within ~15% of the
    rounded nominal size.
    """
    d = scale.qkv_dim
    return 12 * scale.layers * d * d + scale.vocab_size * d


def token_budget(n: float, overtrain_lambda: float = 1.0) -> int:
    if n <= 0:
        raise ValueError("parameter count must be positive")
    if overtrain_lambda < 1:
        raise ValueError(f"overtraining multiplier must be >= 1, got {overtrain_lambda}")
    return round(CHINCHILLA_TOKENS_PER_PARAM * n * overtrain_lambda)


def steps_for(d: int, b: int) -> int:
    """Number of steps T with T*b >= d > (T-1)*b."""
    if b <= 0:
        raise ValueError("batch size must be positive")
    if d <= 0:
        raise ValueError("token count must be positive")
    return -(-int(d) // int(b))


def load_table3() -> list[ModelScale]:
    """Model scales from the bundled architecture table."""
    from dilocolab.datasets import read_table

    return [
        ModelScale(
            name=row["name"],
            layers=int(row["layers"]),
            heads=int(row["heads"]),
            qkv_dim=int(row["qkv_dim"]),
            hidden_dim=int(row["hidden_dim"]),
            nominal_n=float(row["nominal_n"]),
        )
        for row in read_table("model_sizes")
    ]


def budget_discrepancies(rel_tol: float = 0.1) -> list[tuple[str, float, int]]:
    """Rows whose printed token budget disagrees with ``20 * N``.

    Returns ``(name, printed, formula)`` triples.
    """
    from dilocolab.datasets import read_table

    flagged = []
    for row in read_table("model_sizes"):
        printed = float(row["token_budget"])
        formula = token_budget(float(row["nominal_n"]))
        if not math.isclose(printed, formula, rel_tol=rel_tol):
            flagged.append((row["name"], printed, formula))
    return flagged
