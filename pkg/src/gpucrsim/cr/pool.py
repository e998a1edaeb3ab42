from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Context:
    id: int


@dataclass
class ContextPool:
    """Pre-created execution contexts; an empty pool pays creation latency."""

    size: int = 2
    creation_ns: int = 2_000_000_000
    free: list[Context] = field(default_factory=list)
    acquired: set[int] = field(default_factory=set)
    _next: int = 0

    def __post_init__(self):
        for _ in range(self.size):
            self.free.append(self._make())

    def _make(self) -> Context:
        self._next += 1
        return Context(self._next)

    def acquire(self) -> tuple[Context, int]:
        """Returns the context and the latency charged for obtaining it."""
        if self.free:
            ctx, latency = self.free.pop(), 0
        else:
            ctx, latency = self._make(), self.creation_ns
        self.acquired.add(ctx.id)
        return ctx, latency

    def release(self, ctx: Context) -> None:
        self.acquired.discard(ctx.id)
        self.free.append(ctx)
