"""Party identities and topology."""

from __future__ import annotations

from dataclasses import dataclass

ROLES = ("client", "server", "semi_trusted", "dealer")


@dataclass(frozen=True, order=True)
class PartyId:
    role: str
    index: int = 0

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.index < 0:
            raise ValueError("party index must be >= 0")

    def __str__(self) -> str:
        return f"{self.role}{self.index}"


DEALER = PartyId("dealer", 0)


@dataclass(frozen=True)
class Topology:
    """n clients, m computing servers, collusion threshold t, dropout allowance s."""

    n: int
    m: int = 1
    t: int = 0
    s: int = 0
    semi_trusted: bool = False

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ValueError("need at least one client and one server")
        if self.t < 0 or self.s < 0:
            raise ValueError("t and s must be non-negative")

    @property
    def clients(self) -> list[PartyId]:
        return [PartyId("client", i) for i in range(self.n)]

    @property
    def servers(self) -> list[PartyId]:
        return [PartyId("server", j) for j in range(self.m)]

    @property
    def helper(self) -> PartyId | None:
        return PartyId("semi_trusted", 0) if self.semi_trusted else None
