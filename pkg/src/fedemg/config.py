"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .closedloop import TRIAL_ALGORITHMS, INITIALIZATIONS, TrialConfig, UserModelParams
from .decoder import CostParams
from .errors import ConfigError
from .federation import FedConfig
from .seeding import derive_seed
from .signal import ReferenceSpec


def _f(default, help):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class ExperimentConfig:
    # run
    seed: int = _f(0, "master seed; every stage derives its own stream from it")
    out: str = _f("runs/default", "output directory")
    workers: int = _f(1, "worker processes (results do not depend on it)")
    # synthetic subjects
    n_subjects: int = _f(14, "open-loop synthetic subjects")
    n_updates: int = _f(18, "20 s updates recorded per subject")
    exclude_first: int = _f(2, "leading updates dropped from each session")
    channels: int = _f(64, "EMG channels")
    encoder_scale: float = _f(2.0, "scale of the shared base encoder")
    baseline_scale: float = _f(5.0, "scale of the shared resting tone")
    heterogeneity: float = _f(0.2, "per-subject multiplicative encoder spread")
    baseline_heterogeneity: float = _f(0.05, "per-subject multiplicative tone spread")
    rotation_deg: float = _f(5.0, "std of the per-subject intent-axis rotation, degrees")
    mask_fraction: float = _f(0.0, "fraction of channels silenced per subject")
    update_jitter: float = _f(0.3, "per-update multiplicative encoder jitter")
    noise_scale: float = _f(0.5, "additive envelope noise std")
    user_gain: float = _f(3.0, "intent = user_gain * (reference - cursor)")
    intent_limit: float = _f(1.5, "maximum intent norm (effort saturation)")
    recording_adapt_rate: float = _f(0.0, "user adaptation rate while recording open-loop sessions")
    user_mode: str = _f("replay", "session recording: replay | static-encoder")
    screen_limit: float = _f(1.0, "cursor is clipped to [-screen_limit, screen_limit]")
    # reference
    freq_x1: float = _f(0.10, "horizontal reference frequency 1, Hz")
    freq_x2: float = _f(0.25, "horizontal reference frequency 2, Hz")
    freq_y1: float = _f(0.15, "vertical reference frequency 1, Hz")
    freq_y2: float = _f(0.35, "vertical reference frequency 2, Hz")
    amplitude: float = _f(0.4, "reference amplitude per sinusoid, screen units")
    # cost
    lambda_e: float = _f(1e-6, "weight of the velocity-error term")
    lambda_w: float = _f(1e-4, "weight of the decoder-norm term")
    target: str = _f("gap", "regression target: gap | derivative")
    gap_gain: float = _f(1.0, "gap target = gap_gain * (reference - cursor)")
    # open-loop federation
    algorithms: str = _f("Local,FedAvg,PerFedAvg", "open-loop algorithms, comma separated")
    rounds: int = _f(500, "federated rounds")
    client_fraction: float = _f(0.35, "fraction of clients sampled per round")
    local_steps: int = _f(25, "local gradient steps per participation")
    sgd_step_size: float = _f(0.1, "FedAvg local step size")
    maml_inner_rate: float = _f(0.1, "Per-FedAvg adaptation step size")
    maml_outer_rate: float = _f(0.1, "Per-FedAvg meta step size")
    smoothbatch: float = _f(0.75, "SmoothBatch rate for Local updates")
    aggregation_weights: str = _f("uniform", "uniform | data_size")
    batches_per_update: int = _f(6, "contiguous mini-batches per update")
    participations_per_update: int = _f(1, "participations before a client moves to its next update")
    personalize_steps: int = _f(1, "Per-FedAvg personalization steps")
    folds: int = _f(7, "k for both intra- and cross-subject folds")
    intra_fl_exclusion: str = _f("all", "intra-subject FL training drops the held-out block of: all | own subject")
    scenarios: str = _f("IntraSubject,CrossSubject", "evaluation scenarios, comma separated")
    # closed loop
    cl_subjects: int = _f(16, "closed-loop synthetic users")
    cl_subject_offset: int = _f(1000, "closed-loop user ids start here (disjoint from open-loop ids)")
    cl_updates: int = _f(15, "updates per closed-loop trial")
    cl_rounds_per_update: int = _f(40, "sequential Per-FedAvg passes per update")
    cl_inner_rate: float = _f(0.03, "sequential Per-FedAvg adaptation step size")
    cl_outer_rate: float = _f(0.03, "sequential Per-FedAvg meta step size")
    merge_rate: float = _f(0.75, "global/local SmoothBatch rate after each sequential update")
    cl_adapt_rate: float = _f(0.05, "user adaptation rate in closed-loop trials (fraction of 1/L)")
    cl_conditions: str = _f(
        "Local:Random01,Local:OpenLoopGlobal,Local:PretrainedLocal,SequentialPerFedAvg:Random01,"
        "SequentialPerFedAvg:OpenLoopGlobal,Static:PretrainedLocal",
        "closed-loop algorithm:initialization pairs, comma separated")
    cl_global_source: str = _f("PerFedAvg", "open-loop algorithm whose final global seeds OpenLoopGlobal")
    # privacy
    snapshots: int = _f(6, "final decoder snapshots per subject used by the attack")
    attack_reg: float = _f(1e-2, "classifier L2 regularization")
    attack_epochs: int = _f(2000, "classifier subgradient epochs")

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.n_subjects < 1 or self.cl_subjects < 0 or self.snapshots < 1:
            raise ConfigError("subject and snapshot counts must be positive")
        for a in self.algorithm_list:
            if a not in ("Local", "FedAvg", "PerFedAvg"):
                raise ConfigError(f"unknown open-loop algorithm {a!r}")
        if self.intra_fl_exclusion not in ("all", "own"):
            raise ConfigError("intra_fl_exclusion must be 'all' or 'own'")
        for sc in self.scenario_list:
            if sc not in ("IntraSubject", "CrossSubject"):
                raise ConfigError(f"unknown scenario {sc!r}")
        for alg, init in self.condition_list:
            if alg not in TRIAL_ALGORITHMS or init not in INITIALIZATIONS:
                raise ConfigError(f"bad closed-loop condition {alg}:{init}")
            if alg == "Static" and init != "PretrainedLocal":
                raise ConfigError("Static trials need PretrainedLocal initialization")
        # build once so every sub-config validates its own fields
        self.user_params(), self.reference(), self.cost(), self.fed_config("FedAvg")

    @property
    def algorithm_list(self):
        return [a.strip() for a in self.algorithms.split(",") if a.strip()]

    @property
    def scenario_list(self):
        return [a.strip() for a in self.scenarios.split(",") if a.strip()]

    @property
    def condition_list(self):
        out = []
        for item in self.cl_conditions.split(","):
            item = item.strip()
            if not item:
                continue
            if ":" not in item:
                raise ConfigError(f"closed-loop condition {item!r} must be algorithm:initialization")
            alg, init = (s.strip() for s in item.split(":", 1))
            out.append((alg, init))
        return out

    @property
    def population_seed(self) -> int:
        return derive_seed(self.seed, "population")

    def user_params(self, adapt_rate=None) -> UserModelParams:
        return UserModelParams(
            population_seed=self.population_seed, channels=self.channels, encoder_scale=self.encoder_scale,
            baseline_scale=self.baseline_scale, heterogeneity=self.heterogeneity,
            baseline_heterogeneity=self.baseline_heterogeneity, rotation_deg=self.rotation_deg,
            mask_fraction=self.mask_fraction, update_jitter=self.update_jitter, noise_scale=self.noise_scale,
            gain=self.user_gain, intent_limit=self.intent_limit,
            adapt_rate=self.recording_adapt_rate if adapt_rate is None else adapt_rate,
            mode=self.user_mode, screen_limit=self.screen_limit, replay_smoothbatch=self.smoothbatch)

    def reference(self) -> ReferenceSpec:
        return ReferenceSpec((self.freq_x1, self.freq_x2), (self.freq_y1, self.freq_y2), self.amplitude)

    def cost(self) -> CostParams:
        return CostParams(self.lambda_e, self.lambda_w, self.target, self.gap_gain)

    def fed_config(self, algorithm: str, seed: int = 0) -> FedConfig:
        return FedConfig(
            algorithm=algorithm, rounds=self.rounds, client_fraction=self.client_fraction,
            local_steps=self.local_steps, sgd_step_size=self.sgd_step_size,
            maml_inner_rate=self.maml_inner_rate, maml_outer_rate=self.maml_outer_rate,
            smoothbatch=self.smoothbatch, merge_rate=self.merge_rate,
            aggregation_weights=self.aggregation_weights, seed=seed,
            batches_per_update=self.batches_per_update,
            participations_per_update=self.participations_per_update,
            personalize_steps=self.personalize_steps, keep_snapshots=self.snapshots)

    def trial_config(self, algorithm: str, initialization: str, stream: str = "trial") -> TrialConfig:
        return TrialConfig(
            n_updates=self.cl_updates, batches_per_update=self.batches_per_update,
            rounds_per_update=self.cl_rounds_per_update, algorithm=algorithm, initialization=initialization,
            smoothbatch=self.smoothbatch, merge_rate=self.merge_rate, cost=self.cost(),
            maml_inner_rate=self.cl_inner_rate, maml_outer_rate=self.cl_outer_rate,
            seed=derive_seed(self.seed, "closed-loop"), screen_limit=self.screen_limit,
            reference=self.reference(), stream=stream)


def config_help() -> str:
    lines = []
    for f in fields(ExperimentConfig):
        lines.append(f"  {f.name} = {f.default}  ({f.metadata['help']})")
    return "\n".join(lines)


def _coerce(name, typ, raw):
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            v = float(raw)
            if math.isnan(v):
                raise ValueError("nan")
            return v
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = _coerce(key, known[key].type, value)
    return out


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values = parse_config_text(p.read_text(), str(p))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    """Result-affecting keys only; ``out`` and ``workers`` are left out so echoes compare equal."""
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg) if f.name not in ("out", "workers"))


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
