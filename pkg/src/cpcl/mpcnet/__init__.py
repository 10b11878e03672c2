"""Simulated multi-party substrate."""

from .engine import (
    BeaverTriple,
    Dealer,
    DomainError,
    MPCEngine,
    Shared,
    TripleReuseError,
    bytes_per_element,
    concat,
    joint_uniform,
)
from .gadgets import DOMAINS, REFERENCE, TOLERANCE, poly_gadget, secure_abs, secure_clip_factor, turns_cos_sin
from .parties import DEALER, PartyId, Topology
from .sharing import MaskedVector, ShareVector, pair_seeds, pairwise_mask, reconstruct, reconstruct_raw, share, split_raw
from .trace import OFFLINE, PROTOCOL_PHASES, PhaseTrace, Tracer, cost_report, read_trace

__all__ = [
    "BeaverTriple", "DEALER", "DOMAINS", "Dealer", "DomainError", "MPCEngine", "MaskedVector",
    "OFFLINE", "PROTOCOL_PHASES", "PartyId", "PhaseTrace", "REFERENCE", "ShareVector", "Shared",
    "TOLERANCE", "Topology", "Tracer", "TripleReuseError", "bytes_per_element", "concat",
    "cost_report", "joint_uniform", "pair_seeds", "pairwise_mask", "poly_gadget", "read_trace",
    "reconstruct", "reconstruct_raw", "secure_abs", "secure_clip_factor", "share", "split_raw",
    "turns_cos_sin",
]
