"""Federated and outsourced DP training, run phase by phase over mpcnet.

A run walks the protocol phases (Setup, GradientCompute, Perturb, Protect,
Aggregate, Reveal, Update) in the order its paradigm prescribes and records
every message and operation in a :class:`~cpcl.mpcnet.trace.Tracer`.

* ``FL_client_perturb``: selected clients compute clipped updates, add their
  share of the noise, and protect them; servers only aggregate.
* ``FL_server_perturb``: clients protect clean updates; noise enters after
  aggregation, by the servers, a semi-trusted helper, or jointly on shares.
* ``OL``: data owners secret-share their records once and leave; the servers
  train on shares and reveal only the final model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import accountant as acc
from .learner import plain
from .learner.shares import clipped_gradient_sum, peek_model, reveal_model, sgd_update, share_model
from .mpcnet.engine import MPCEngine, Shared, joint_uniform
from .mpcnet.gadgets import g_log, g_sqrt, turns_cos_sin
from .mpcnet.parties import PartyId, Topology
from .mpcnet.sharing import pair_seeds, pairwise_mask
from .mpcnet.trace import OFFLINE, Tracer
from .ringnum import FixedCodec, decode_array, encode_array, to_signed_array, wrap_signed
from .sampler import NoiseSpec, UniformSource, sample

PARADIGMS = ("FL_client_perturb", "FL_server_perturb", "OL")
BACKENDS = ("additive_ss", "masking")
SAMPLINGS = ("none", "local_pnoise", "centralized_cnoise", "distributed_cnoise")
PERTURBATIONS = ("gradient", "output")
FL_UPDATES = ("gradient", "delta")
OUTPUTS = ("clients", "clients+servers", "clients+helper")

GAUSSIAN_FAMILY = ("Gaussian", "DiscGaussian", "Skellam", "Binomial")
DISCRETE = ("DiscGaussian", "Skellam", "Binomial")

# Scalar operations per noise draw, counting each uniform, transcendental and
# arithmetic step as one. Used only for the cost columns.
DRAW_COST = {
    "Gaussian": 4,
    "Laplace": 4,
    "DistLaplace": 16,
    "DiscGaussian": 12,
    "Skellam": 20,
    "Binomial": 8,
}

# One-layer reference iteration per paradigm, used by the golden traces.
PHASE_ORDER = {
    "FL_client_perturb": ("Setup", "GradientCompute", "Perturb", "Protect", "Aggregate", "Reveal", "Update"),
    "FL_server_perturb": ("Setup", "GradientCompute", "Protect", "Aggregate", "Perturb", "Reveal", "Update"),
    "OL": ("Setup", "Protect", "GradientCompute", "Perturb", "Update"),
}


class ProtocolError(RuntimeError):
    """A party was asked to act outside its role in the protocol."""


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def features(self) -> int:
        return self.x.shape[1]


def split_dataset(x: np.ndarray, y: np.ndarray, test_fraction: float = 0.2, seed: int = 0,
                  classes: int | None = None) -> Dataset:
    """Seeded shuffle then train/test split."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} feature rows but {len(y)} labels")
    order = UniformSource(seed, 7).generator().permutation(len(y))
    cut = len(y) - max(1, int(round(test_fraction * len(y))))
    tr, te = order[:cut], order[cut:]
    k = int(y.max()) + 1 if classes is None else classes
    return Dataset(x[tr], y[tr], x[te], y[te], k)


@dataclass(frozen=True)
class RunConfig:
    paradigm: str = "FL_server_perturb"
    n: int = 20
    m: int = 2
    t: int = 0
    s: int = 0
    dropouts: int = 0
    pool: int | None = None
    backend: str = "additive_ss"
    output: str = "clients"
    sampling: str = "centralized_cnoise"
    mechanism: str = "Gaussian"
    perturbation: str = "gradient"
    loop_budget: int | None = None
    discrete_scale: float = 256.0
    epsilon: float = 3.0
    delta: float = 1e-5
    noise_multiplier: float | None = None
    output_sensitivity: float = 1.0
    model: str = "logistic_regression"
    hidden: int = 100
    epochs: int = 5
    lr: float = 0.5
    clip: float = 1.0
    batch_size: int = 500
    fl_update: str = "gradient"
    local_iterations: int = 1
    clip_mode: str = "smooth"
    total_bits: int = 32
    frac_bits: int = 16
    seed: int = 0
    debug: bool = False

    def __post_init__(self) -> None:
        def choice(name, options):
            if getattr(self, name) not in options:
                raise ValueError(f"{name} must be one of {options}, got {getattr(self, name)!r}")

        choice("paradigm", PARADIGMS)
        choice("backend", BACKENDS)
        choice("sampling", SAMPLINGS)
        choice("perturbation", PERTURBATIONS)
        choice("fl_update", FL_UPDATES)
        choice("output", OUTPUTS)
        choice("model", plain.MODEL_KINDS)
        choice("clip_mode", ("smooth", "oracle"))
        if self.mechanism not in DRAW_COST:
            raise ValueError(f"mechanism must be one of {tuple(DRAW_COST)}, got {self.mechanism!r}")
        Topology(self.n, self.m, self.t, self.s)
        for name in ("epochs", "batch_size", "local_iterations", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "clip", "discrete_scale", "output_sensitivity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")
        acc.PrivacyBudget(self.epsilon, self.delta)
        if self.total_bits not in (32, 64) or not 0 <= self.frac_bits <= self.total_bits // 2:
            raise ValueError("ring must be 32 or 64 bits with frac_bits at most half of it")
        if self.dropouts > self.s:
            raise ValueError(f"{self.dropouts} dropouts exceed the dropout allowance s={self.s}")
        if self.loop_budget is not None and self.mechanism not in ("DiscGaussian", "Skellam"):
            raise ValueError("loop_budget applies to DiscGaussian and Skellam only")

        if self.output == "clients+helper":
            raise ValueError("obliviousness violation: the semi-trusted noise sampler must never be an output party")
        fl = self.paradigm != "OL"
        if self.backend == "masking":
            if not fl or self.m != 1:
                raise ValueError("the masking backend is for FL with a single server (m=1)")
            if self.sampling in ("centralized_cnoise", "distributed_cnoise"):
                raise ValueError(f"{self.sampling} needs the noise on shares; use backend additive_ss")
        elif self.m < 2:
            raise ValueError("additive_ss needs m >= 2 servers")
        if fl:
            if self.pool is not None and self.pool < self.n:
                raise ValueError(f"client pool {self.pool} is smaller than n={self.n}")
            if self.perturbation == "output":
                raise ValueError("output perturbation is only offered for OL")
        if self.paradigm == "FL_client_perturb" and self.sampling not in ("none", "local_pnoise"):
            raise ValueError("client-side perturbation uses local_pnoise (or none)")
        if self.sampling == "local_pnoise":
            parties = self.n if self.paradigm == "FL_client_perturb" else self.m
            used = self.s if self.paradigm == "FL_client_perturb" else 0
            if parties - self.t - used < 1:
                raise ValueError(f"no honest noise party left with {parties} parties, t={self.t}, s={used}")
        if self.sampling != "none":
            self._check_mechanism()

    def _check_mechanism(self) -> None:
        mech = self.mechanism
        if mech in DISCRETE and (self.paradigm == "OL" or self.sampling != "local_pnoise"):
            raise ValueError(f"{mech} noise is offered for FL local_pnoise only")
        if self.perturbation == "gradient" and mech not in GAUSSIAN_FAMILY:
            raise ValueError(f"gradient perturbation is accounted for Gaussian-type noise, not {mech}")
        if self.perturbation == "output" and mech not in ("Gaussian", "Laplace", "DistLaplace"):
            raise ValueError(f"output perturbation supports Gaussian, Laplace or DistLaplace, not {mech}")
        if mech == "DistLaplace" and self.sampling != "local_pnoise":
            raise ValueError("DistLaplace is partial noise; use it with local_pnoise")
        if mech == "Laplace" and self.sampling == "local_pnoise":
            raise ValueError("local Laplace shares do not sum to Laplace; use DistLaplace")

    @property
    def fl(self) -> bool:
        return self.paradigm != "OL"

    @property
    def discrete(self) -> bool:
        return self.sampling != "none" and self.mechanism in DISCRETE

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


CONFIG_FIELDS = tuple(f.name for f in fields(RunConfig))


# ---------------------------------------------------------------------------
# noise planning


@dataclass(frozen=True)
class NoisePlan:
    q: float
    steps_per_epoch: int
    steps: int
    multiplier: float
    sigma_dp: float
    laplace_scale: float = 0.0

    @property
    def var_dp(self) -> float:
        return self.sigma_dp ** 2


def noise_plan(cfg: RunConfig, n_train: int) -> NoisePlan:
    """Sampling rate, step count and the aggregate noise target for a run."""
    if cfg.fl:
        pool = cfg.pool or cfg.n
        q = cfg.n / pool
        per_epoch = math.ceil(pool / cfg.n)
    else:
        if cfg.batch_size > n_train:
            raise ValueError(f"batch size {cfg.batch_size} exceeds the {n_train} training records")
        q = cfg.batch_size / n_train
        per_epoch = math.ceil(n_train / cfg.batch_size)
    steps = per_epoch * cfg.epochs
    if cfg.sampling == "none":
        return NoisePlan(q, per_epoch, steps, 0.0, 0.0)
    if cfg.perturbation == "output":
        budget = acc.PrivacyBudget(cfg.epsilon, cfg.delta, cfg.output_sensitivity, cfg.output_sensitivity)
        if cfg.mechanism == "Gaussian":
            return NoisePlan(q, per_epoch, steps, 0.0, acc.gaussian_sigma(budget))
        return NoisePlan(q, per_epoch, steps, 0.0, 0.0, acc.laplace_lambda(budget))
    mult = cfg.noise_multiplier
    if mult is None:
        mult = acc.calibrate_sigma(q, steps, cfg.epsilon, cfg.delta)
    return NoisePlan(q, per_epoch, steps, mult, mult * cfg.clip)


def noise_parties(cfg: RunConfig) -> tuple[int, int, int]:
    """(parties that add local noise, colluders among them, dropouts among them)."""
    if cfg.paradigm == "FL_client_perturb":
        return cfg.n, cfg.t, cfg.s
    return cfg.m, cfg.t, 0


class NoiseInjector:
    """Draws the perturbation for one run; every party has its own stream."""

    def __init__(self, cfg: RunConfig, plan: NoisePlan, tracer: Tracer):
        self.cfg = cfg
        self.plan = plan
        self.tracer = tracer
        self._sources: dict[PartyId, UniformSource] = {}
        parties, t, s = noise_parties(cfg)
        self.local_variance = 0.0
        if cfg.sampling == "local_pnoise" and plan.var_dp > 0:
            self.local_variance = acc.collusion_adjusted_variance(plan.var_dp, parties, t, s)
        self.honest = parties - t - s
        self._joint_sources: list[UniformSource] | None = None

    def source(self, party: PartyId) -> UniformSource:
        src = self._sources.get(party)
        if src is None:
            base = {"client": 1000, "server": 100, "semi_trusted": 50}[party.role]
            src = self._sources[party] = UniformSource(self.cfg.seed, base + party.index)
        return src

    def active(self) -> bool:
        return self.cfg.sampling != "none" and (self.plan.sigma_dp > 0 or self.plan.laplace_scale > 0)

    def _local_spec(self) -> NoiseSpec:
        cfg, mech = self.cfg, self.cfg.mechanism
        if mech == "DistLaplace":
            return NoiseSpec("PNoise", mech, {"scale": self.plan.laplace_scale, "parties": self.honest})
        var = self.local_variance
        if mech in DISCRETE:
            var *= cfg.discrete_scale ** 2
        if mech == "Binomial":
            return NoiseSpec("PNoise", mech, {"trials": max(1, round(4 * var)), "p": 0.5})
        return NoiseSpec("PNoise", mech, {"variance": var}, cfg.loop_budget)

    def local(self, party: PartyId, size) -> np.ndarray:
        """One party's partial noise in plaintext (integer units for discrete noise)."""
        spec = self._local_spec()
        out = sample(spec, self.source(party), size=size)
        self.tracer.ops(party, plain=int(np.prod(size)) * DRAW_COST[spec.mechanism])
        return out

    def central(self, size) -> np.ndarray:
        """The full aggregate noise, drawn by the semi-trusted helper."""
        helper = PartyId("semi_trusted", 0)
        if self.cfg.mechanism == "Laplace":
            spec = NoiseSpec("CNoise", "Laplace", {"scale": self.plan.laplace_scale})
        else:
            spec = NoiseSpec("CNoise", "Gaussian", {"variance": self.plan.var_dp})
        out = sample(spec, self.source(helper), size=size)
        self.tracer.ops(helper, plain=int(np.prod(size)) * DRAW_COST[spec.mechanism])
        return out

    def joint(self, engine: MPCEngine, shape) -> Shared:
        """Noise sampled on shares, from jointly generated uniforms.

        Gaussian noise is Box-Muller: sigma sqrt(-2 ln u1) cos(2 pi u2).
        Laplace noise is the difference of two exponentials: lam (ln u2 - ln u1).
        """
        if self._joint_sources is None:
            self._joint_sources = [UniformSource(self.cfg.seed, 300 + j) for j in range(engine.m)]
        shape = tuple(shape)
        u = joint_uniform(engine, (2,) + shape, self._joint_sources)
        logs = g_log(engine, u)
        if self.cfg.mechanism == "Laplace":
            diff = engine.sub(logs[1], logs[0])
            return engine.mul_const(diff, self.plan.laplace_scale, const_frac=24)
        radius = g_sqrt(engine, engine.mul_int(engine.neg(logs[0]), 2))
        cos, _ = turns_cos_sin(engine, u[1])
        return engine.mul_const(engine.mul(radius, cos), self.plan.sigma_dp, const_frac=24)


# ---------------------------------------------------------------------------
# results


@dataclass
class EpochMetrics:
    epoch: int
    accuracy: float
    loss: float
    eps_spent: float
    delta_spent: float
    messages: int
    bytes: int
    wall_ops: int


@dataclass
class NoiseRecord:
    """Injected aggregate noise of one step and each local party's part of it."""

    total: np.ndarray
    parts: dict[PartyId, np.ndarray] = field(default_factory=dict)

    def residual(self, colluders) -> np.ndarray:
        """Noise left after subtracting what ``colluders`` know they added."""
        out = self.total.copy()
        for p in colluders:
            if p in self.parts:
                out = out - self.parts[p]
        return out


@dataclass
class RunResult:
    config: RunConfig
    plan: NoisePlan
    model: plain.Model
    metrics: list[EpochMetrics]
    tracer: Tracer
    ledger: acc.CompositionLedger
    noise: list[NoiseRecord] = field(default_factory=list)
    batches: list[np.ndarray] = field(default_factory=list)
    failures: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy


def _online_totals(tracer: Tracer) -> tuple[int, int, int]:
    msgs = byts = ops = 0
    for (phase, _), row in tracer.rows.items():
        if phase == OFFLINE:
            continue
        msgs += row.messages
        byts += row.bytes
        ops += row.ops
    return msgs, byts, ops


def _epoch_row(epoch: int, model: plain.Model, data: Dataset, tracer: Tracer,
               ledger: acc.CompositionLedger, cfg: RunConfig) -> EpochMetrics:
    if ledger.entries:
        eps, dlt = acc.compose(ledger, cfg.delta)
    else:
        eps, dlt = (math.inf, 0.0) if cfg.sampling == "none" else (0.0, 0.0)
    msgs, byts, ops = _online_totals(tracer)
    return EpochMetrics(epoch, plain.accuracy(model, data.x_test, data.y_test),
                        plain.loss(model, data.x_test, data.y_test), eps, dlt, msgs, byts, ops)


def _model_dims(cfg: RunConfig, data: Dataset) -> tuple[int, ...]:
    if cfg.model == "mlp_3layer":
        return (data.features, cfg.hidden, data.classes)
    return (data.features, data.classes)


def _ledger(cfg: RunConfig, plan: NoisePlan) -> tuple[acc.CompositionLedger, np.ndarray | None]:
    ledger = acc.CompositionLedger("RDP" if cfg.perturbation == "gradient" else "basic")
    curve = None
    if cfg.perturbation == "gradient" and plan.multiplier > 0:
        curve = acc.rdp_subsampled_gaussian(plan.q, plan.multiplier, ledger.orders)
    return ledger, curve


# ---------------------------------------------------------------------------
# federated learning


class _FLRing:
    """Encoding of client updates into the aggregation ring."""

    def __init__(self, cfg: RunConfig):
        self.discrete = cfg.discrete
        self.scale = cfg.discrete_scale if self.discrete else 1.0
        self.codec = FixedCodec(cfg.total_bits, 0 if self.discrete else cfg.frac_bits)

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.discrete:
            return wrap_signed(np.rint(np.asarray(x) * self.scale).astype(np.int64), self.codec)
        return encode_array(x, self.codec)

    def encode_int(self, k: np.ndarray) -> np.ndarray:
        return wrap_signed(np.asarray(k).astype(np.int64), self.codec)

    def decode(self, raw: np.ndarray) -> np.ndarray:
        if self.discrete:
            return to_signed_array(raw, self.codec).astype(np.float64) / self.scale
        return decode_array(raw, self.codec)


def _grad_cost(params: int, rows: int) -> int:
    # forward, backward, norm, scale and sum: about six passes over the parameters
    return 6 * params * rows


def _client_update(cfg: RunConfig, model: plain.Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if cfg.fl_update == "gradient":
        g = plain.per_example_gradients(model, x, y)
        return plain.clip_rows(g, cfg.clip).sum(axis=0)
    local = model.copy()
    for _ in range(cfg.local_iterations):
        g = plain.mean_gradient(local, x, y)
        local = local.copy(local.params - cfg.lr * g)
    return plain.clip_rows((local.params - model.params)[None, :], cfg.clip)[0]


def run_fl(cfg: RunConfig, data: Dataset, record: bool = False) -> RunResult:
    if not cfg.fl:
        raise ValueError("run_fl needs an FL paradigm")
    pool = cfg.pool or cfg.n
    per_client = len(data.y) // pool
    if per_client < 1:
        raise ValueError(f"{len(data.y)} training records cannot feed {pool} clients")
    tracer = Tracer()
    plan = noise_plan(cfg, len(data.y))
    noise = NoiseInjector(cfg, plan, tracer)
    ledger, curve = _ledger(cfg, plan)
    ring = _FLRing(cfg)
    select_src = UniformSource(cfg.seed, 1)
    model = plain.init_model(cfg.model, _model_dims(cfg, data), UniformSource(cfg.seed, 2))
    P = model.params.size
    eb = ring.codec.total_bits // 8
    masking = cfg.backend == "masking"
    engine = None if masking else MPCEngine(cfg.m, UniformSource(cfg.seed, 3), ring.codec, tracer, cfg.debug)
    noise_engine = None
    if cfg.sampling == "distributed_cnoise":
        noise_engine = MPCEngine(cfg.m, UniformSource(cfg.seed, 5), FixedCodec(64, cfg.frac_bits), tracer, cfg.debug)
    servers = [PartyId("server", j) for j in range(cfg.m)]
    mask_src = UniformSource(cfg.seed, 4)
    result = RunResult(cfg, plan, model, [], tracer, ledger)
    client_side = cfg.paradigm == "FL_client_perturb" and noise.active()
    server_side = cfg.paradigm == "FL_server_perturb" and noise.active()

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(plan.steps_per_epoch):
            gen = select_src.generator()
            chosen = np.arange(pool) if cfg.n == pool else np.sort(gen.choice(pool, cfg.n, replace=False))
            clients = [PartyId("client", int(c)) for c in chosen]

            with tracer.phase("Setup"):
                tracer.message(servers[0], P * 8, count=cfg.n)
                tracer.round(servers[0])
                if masking:
                    seeds = pair_seeds(cfg.n, mask_src)
                    for c in clients:
                        tracer.message(c, 32, count=cfg.n - 1)
                        tracer.round(c)

            with tracer.phase("GradientCompute"):
                updates = np.empty((cfg.n, P))
                for k, c in enumerate(chosen):
                    rows = slice(c * per_client, (c + 1) * per_client)
                    updates[k] = _client_update(cfg, model, data.x[rows], data.y[rows])
                    tracer.ops(clients[k], plain=_grad_cost(P, per_client) * (cfg.local_iterations if cfg.fl_update == "delta" else 1))

            raws = [ring.encode(u) for u in updates]
            parts: dict[PartyId, np.ndarray] = {}
            if client_side:
                with tracer.phase("Perturb"):
                    for k, c in enumerate(clients):
                        z = noise.local(c, (P,))
                        raws[k] = _add_int_or_fixed(ring, raws[k], z)
                        tracer.ops(c, ring=P)
                        if record:
                            parts[c] = z / ring.scale if ring.discrete else decode_array(ring.encode(z), ring.codec)

            with tracer.phase("Protect"):
                if masking:
                    peers = list(range(cfg.n))
                    blinded = []
                    for k, c in enumerate(clients):
                        mv = pairwise_mask(raws[k], k, peers, seeds, ring.codec, round_id=step)
                        tracer.ops(c, ring=P * (cfg.n - 1), plain=P * (cfg.n - 1))
                        tracer.message(c, P * eb)
                        tracer.round(c)
                        blinded.append(mv.values)
                else:
                    shared = [engine.input_raw(c, raws[k], ring.codec.frac_bits) for k, c in enumerate(clients)]

            with tracer.phase("Aggregate"):
                if masking:
                    total = blinded[0]
                    for b in blinded[1:]:
                        total = (total + b) & np.uint64(ring.codec.mask)
                    tracer.ops(servers[0], ring=P * (cfg.n - 1))
                else:
                    agg = shared[0]
                    for sh in shared[1:]:
                        agg = engine.add(agg, sh)

            if server_side:
                with tracer.phase("Perturb"):
                    if masking:
                        z = noise.local(servers[0], (P,))
                        total = _add_int_or_fixed(ring, total, z)
                        tracer.ops(servers[0], ring=P)
                        if record:
                            parts[servers[0]] = z / ring.scale if ring.discrete else decode_array(ring.encode(z), ring.codec)
                    else:
                        agg = _server_noise(cfg, noise, engine, noise_engine, ring, agg, P, parts if record else None)

            live = clients
            if cfg.dropouts:
                gone = set(gen.choice(cfg.n, cfg.dropouts, replace=False).tolist())
                live = [c for k, c in enumerate(clients) if k not in gone]
            receivers = live + (servers if cfg.output == "clients+servers" else [])

            with tracer.phase("Reveal"):
                if masking:
                    tracer.message(servers[0], P * eb, count=len(receivers))
                    tracer.round(servers[0])
                    revealed = ring.decode(total)
                else:
                    revealed = ring.decode(_reveal_raw(engine, agg, receivers))

            with tracer.phase("Update"):
                if cfg.fl_update == "gradient":
                    new = model.params - cfg.lr * revealed / (cfg.n * per_client)
                else:
                    new = model.params + revealed / cfg.n
                for c in live:
                    tracer.ops(c, plain=2 * P)
                model = model.copy(new)

            if curve is not None:
                ledger.add_rdp(curve)
            if record:
                result.noise.append(NoiseRecord(revealed - updates.sum(axis=0), parts))
            step += 1
        result.metrics.append(_epoch_row(epoch, model, data, tracer, ledger, cfg))
    result.model = model
    return result


def _add_int_or_fixed(ring: _FLRing, raw: np.ndarray, z: np.ndarray) -> np.ndarray:
    extra = ring.encode_int(z) if ring.discrete else ring.encode(z)
    return (raw + extra) & np.uint64(ring.codec.mask)


def _reveal_raw(engine: MPCEngine, x: Shared, to) -> np.ndarray:
    engine.reveal(x, to)
    return engine.peek_raw(x)


def _server_noise(cfg: RunConfig, noise: NoiseInjector, engine: MPCEngine, noise_engine: MPCEngine | None,
                  ring: _FLRing, agg: Shared, P: int, parts: dict | None) -> Shared:
    """Add server-side noise to an aggregate held as shares."""
    if cfg.sampling == "local_pnoise":
        for j, srv in enumerate(engine.servers):
            z = noise.local(srv, (P,))
            extra = ring.encode_int(z) if ring.discrete else ring.encode(z)
            agg = engine.add(agg, engine.from_server(j, extra, agg.frac))
            if parts is not None:
                parts[srv] = z / ring.scale if ring.discrete else decode_array(ring.encode(z), ring.codec)
        return agg
    if cfg.sampling == "centralized_cnoise":
        psi = noise.central((P,))
        return engine.add(agg, engine.input_raw(PartyId("semi_trusted", 0), ring.encode(psi), agg.frac))
    psi = noise.joint(noise_engine, (P,))
    reduced = Shared(psi.shares & np.uint64(ring.codec.mask), psi.frac)
    return engine.add(agg, reduced)


# ---------------------------------------------------------------------------
# outsourced learning


class OLSession:
    """Server-side state of an outsourced-learning run.

    Data owners may only provide input before training starts; asking for
    their participation afterwards raises :class:`ProtocolError`.
    """

    def __init__(self, cfg: RunConfig, data: Dataset):
        if cfg.fl:
            raise ValueError("OLSession needs paradigm OL")
        if cfg.n > len(data.y):
            raise ValueError(f"{cfg.n} data owners but only {len(data.y)} records")
        self.cfg = cfg
        self.data = data
        self.tracer = Tracer()
        self.plan = noise_plan(cfg, len(data.y))
        self.noise = NoiseInjector(cfg, self.plan, self.tracer)
        codec = FixedCodec(64, cfg.frac_bits)
        self.engine = MPCEngine(cfg.m, UniformSource(cfg.seed, 3), codec, self.tracer, cfg.debug)
        self.clients = [PartyId("client", i) for i in range(cfg.n)]
        self.owners = np.array_split(np.arange(len(data.y)), cfg.n)
        self.training = False
        self.x: Shared | None = None
        self.y: Shared | None = None

    def protect(self) -> None:
        if self.training:
            raise ProtocolError("data owners already handed off their data")
        eng = self.engine
        eye = np.eye(self.data.classes)
        with self.tracer.phase("Protect"):
            xs, ys = [], []
            for c, rows in zip(self.clients, self.owners):
                xs.append(eng.input(c, self.data.x[rows]))
                ys.append(eng.input(c, eye[self.data.y[rows]]))
        self.x = Shared(np.concatenate([v.shares for v in xs], axis=1), eng.f)
        self.y = Shared(np.concatenate([v.shares for v in ys], axis=1), eng.f)
        self.training = True

    def client_input(self, client: int, values) -> Shared:
        """A data owner contributes more input; only legal before training."""
        if self.training:
            raise ProtocolError(f"client{client} is offline: OL clients take no part after Protect")
        return self.engine.input(self.clients[client], values)


def run_ol(cfg: RunConfig, data: Dataset, record: bool = False) -> RunResult:
    sess = OLSession(cfg, data)
    eng, tracer, plan, noise = sess.engine, sess.tracer, sess.plan, sess.noise
    ledger, curve = _ledger(cfg, plan)
    model = plain.init_model(cfg.model, _model_dims(cfg, data), UniformSource(cfg.seed, 2))
    P = model.params.size
    N = len(data.y)
    leader = eng.servers[0]
    batch_src = UniformSource(cfg.seed, 1)

    with tracer.phase("Setup"):
        smodel = share_model(eng, model)
        tracer.ops(leader, plain=P)
    sess.protect()
    result = RunResult(cfg, plan, model, [], tracer, ledger)
    step_size = cfg.lr / (plan.q * N)
    gradient_noise = cfg.perturbation == "gradient" and noise.active()

    for epoch in range(1, cfg.epochs + 1):
        for _ in range(plan.steps_per_epoch):
            with tracer.phase("GradientCompute"):
                idx = np.flatnonzero(batch_src.uniform(N) < plan.q)
                tracer.ops(leader, plain=N)
                tracer.message(leader, 4 * len(idx), count=cfg.m - 1)
                tracer.round(leader)
                if record:
                    result.batches.append(idx)
                if len(idx):
                    grads = clipped_gradient_sum(eng, smodel, sess.x[idx], sess.y[idx], cfg.clip, cfg.clip_mode)
                else:
                    grads = [(eng.constant(np.zeros(w.shape)), eng.constant(np.zeros(b.shape)))
                             for w, b in smodel.layers]
            if gradient_noise:
                with tracer.phase("Perturb"):
                    flat_noise, parts = _ol_noise(cfg, noise, eng, P, record)
                    grads = _add_flat(eng, grads, flat_noise)
                    if record:
                        result.noise.append(NoiseRecord(eng.peek(flat_noise), parts))
            with tracer.phase("Update"):
                smodel = sgd_update(eng, smodel, grads, step_size)
            if curve is not None:
                ledger.add_rdp(curve)
        result.metrics.append(_epoch_row(epoch, peek_model(eng, smodel), data, tracer, ledger, cfg))

    if cfg.perturbation == "output" and noise.active():
        with tracer.phase("Perturb"):
            flat_noise, parts = _ol_noise(cfg, noise, eng, P, record)
            noisy = _add_flat(eng, smodel.layers, flat_noise)
            smodel = type(smodel)(smodel.kind, smodel.dims, noisy)
            if record:
                result.noise.append(NoiseRecord(eng.peek(flat_noise), parts))
        ledger.add(cfg.epsilon, cfg.delta if cfg.mechanism == "Gaussian" else 0.0)

    receivers = sess.clients + (eng.servers if cfg.output == "clients+servers" else [])
    with tracer.phase("Reveal"):
        final = reveal_model(eng, smodel, receivers)
    if cfg.perturbation == "output":
        result.metrics[-1] = _epoch_row(cfg.epochs, final, data, tracer, ledger, cfg)
    result.model = final
    return result


def _ol_noise(cfg: RunConfig, noise: NoiseInjector, eng: MPCEngine, P: int,
              record: bool) -> tuple[Shared, dict]:
    parts: dict[PartyId, np.ndarray] = {}
    if cfg.sampling == "local_pnoise":
        total = None
        for j, srv in enumerate(eng.servers):
            z = noise.local(srv, (P,))
            mine = eng.from_server(j, encode_array(z, eng.codec), eng.f)
            total = mine if total is None else eng.add(total, mine)
            if record:
                parts[srv] = decode_array(encode_array(z, eng.codec), eng.codec)
        return total, parts
    if cfg.sampling == "centralized_cnoise":
        return eng.input(PartyId("semi_trusted", 0), noise.central((P,))), parts
    return noise.joint(eng, (P,)), parts


def _add_flat(eng: MPCEngine, grads: list[tuple[Shared, Shared]], flat: Shared) -> list[tuple[Shared, Shared]]:
    out, pos = [], 0
    for gw, gb in grads:
        nw, nb = gw.size, gb.size
        w = flat[pos:pos + nw].reshape(*gw.shape)
        b = flat[pos + nw:pos + nw + nb]
        out.append((eng.add(gw, w), eng.add(gb, b)))
        pos += nw + nb
    return out


# ---------------------------------------------------------------------------


def run(cfg: RunConfig, data: Dataset, record: bool = False) -> RunResult:
    return run_ol(cfg, data, record) if cfg.paradigm == "OL" else run_fl(cfg, data, record)


@dataclass
class NoiseDraw:
    total: np.ndarray
    residual: np.ndarray
    target_variance: float
    tracer: Tracer


def injected_noise(cfg: RunConfig, dim: int, iterations: int, n_train: int = 10_000) -> NoiseDraw:
    """Sample the aggregate perturbation of ``iterations`` steps directly.

    Uses the same injection code as training, vectorised over steps. The
    residual is the noise left after removing the parts of the t colluders,
    taken to be the first t noise parties.
    """
    tracer = Tracer()
    plan = noise_plan(cfg, n_train)
    noise = NoiseInjector(cfg, plan, tracer)
    shape = (iterations, dim)
    with tracer.phase("Perturb"):
        if cfg.sampling == "local_pnoise":
            parties, t, _ = noise_parties(cfg)
            role = "client" if cfg.paradigm == "FL_client_perturb" else "server"
            scale = cfg.discrete_scale if cfg.discrete else 1.0
            draws = [noise.local(PartyId(role, i), shape) / scale for i in range(parties)]
            total = np.sum(draws, axis=0)
            residual = total - np.sum(draws[:t], axis=0) if t else total
            return NoiseDraw(total, residual, plan.var_dp, tracer)
        if cfg.sampling == "centralized_cnoise":
            total = noise.central(shape)
            return NoiseDraw(total, total, plan.var_dp, tracer)
        if cfg.sampling == "distributed_cnoise":
            eng = MPCEngine(cfg.m, UniformSource(cfg.seed, 5), FixedCodec(64, cfg.frac_bits), tracer)
            total = eng.peek(noise.joint(eng, shape))
            return NoiseDraw(total, total, plan.var_dp, tracer)
    raise ValueError("sampling 'none' injects no noise")


def run_plain(cfg: RunConfig, data: Dataset) -> RunResult:
    """Non-cryptographic DP-SGD on the OL schedule, for baselines.

    Batches and Gaussian noise come from the same streams an OL run with
    centralized noise uses, so the two runs differ only by fixed-point error.
    """
    if cfg.paradigm != "OL" or cfg.perturbation != "gradient":
        raise ValueError("the plaintext baseline follows the OL gradient-perturbation schedule")
    if cfg.sampling not in ("none", "centralized_cnoise"):
        raise ValueError("the plaintext baseline draws central noise only")
    tracer = Tracer()
    plan = noise_plan(cfg, len(data.y))
    noise = NoiseInjector(cfg, plan, tracer)
    ledger, curve = _ledger(cfg, plan)
    model = plain.init_model(cfg.model, _model_dims(cfg, data), UniformSource(cfg.seed, 2))
    N = len(data.y)
    batch_src = UniformSource(cfg.seed, 1)
    result = RunResult(cfg, plan, model, [], tracer, ledger)
    step_size = cfg.lr / (plan.q * N)
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(plan.steps_per_epoch):
            idx = np.flatnonzero(batch_src.uniform(N) < plan.q)
            g = np.zeros_like(model.params)
            if len(idx):
                g = plain.clip_rows(plain.per_example_gradients(model, data.x[idx], data.y[idx]), cfg.clip).sum(axis=0)
            if noise.active():
                g = g + noise.central(g.shape)
            model = model.copy(model.params - step_size * g)
            if curve is not None:
                ledger.add_rdp(curve)
        result.metrics.append(_epoch_row(epoch, model, data, tracer, ledger, cfg))
    result.model = model
    return result
