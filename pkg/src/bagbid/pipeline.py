"""End-to-end experiment driver.

Stages, each a pure function of the experiment config and seed:

  gen-data     mixed-quality behavior episodes per campaign (offline set)
  gen-expert   hindsight expert episodes on the matched seeds
  train-disc   expert-vs-unlabeled discriminator (PU or plain CE)
  prep         score transitions, assign expert levels, redistribute
               rewards, recompute return-to-go labels
  train        fit one method (bc / dt / ebaret and its ablations)
  eval         roll trained policies over held-out test periods
  report       cross-method tables, suboptimality-ratio histogram

Outputs are JSONL datasets, JSON checkpoints, and CSV metrics under the
config's output directory.  All file writes are atomic; train and test
seed ranges are disjoint by construction and recorded in the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from bagbid import rewards as rw
from bagbid.discriminator import (
    DiscConfig,
    DiscriminatorModel,
    assign_levels,
    sigmoid,
    train_discriminator,
)
from bagbid.expert import generate_expert_trajectory, solve_multipliers
from bagbid.market import MarketConfig, OpportunityStream, run_episode, sinusoid_cvr_profile
from bagbid.trajectory import (
    CampaignConstraints,
    Trajectory,
    atomic_write_text,
    load_jsonl,
    save_jsonl,
)
from bagbid.transformer import (
    ARCH_BC,
    ARCH_DT,
    ARCH_FULL,
    ARCH_NO_LEVEL,
    AblationFlags,
    Arch,
    ConfigError,
    ModelConfig,
    TrainingBatch,
    TrajectoryTransformer,
    make_inference_policy,
    train_model,
)

TEST_SEED_BASE = 50_000
CAMPAIGN_SEED_STRIDE = 100_000


class PipelineError(RuntimeError):
    pass


@dataclass
class CampaignSpec:
    campaign_id: str
    budget: float
    ros_bound: float

    @property
    def constraints(self) -> CampaignConstraints:
        return CampaignConstraints(budget=self.budget, ros_bound=self.ros_bound)


@dataclass
class MarketSettings:
    steps_per_episode: int = 48
    opportunities_per_step: int = 100
    value_distribution_params: tuple = (1.3, 130.0)
    competitor_bid_params: tuple = (-4.1, 1.0)
    cvr_amplitude: float = 0.4
    cvr_noise: float = 0.05
    a_max: float = 10.0


@dataclass
class BehaviorSettings:
    """Mixed-quality logging policies for the offline dataset.

    The defaults put the mixture's mean bid scale well away from the
    hindsight-optimal scale: the random logger overbids, the fixed logger
    underbids, and the noisy-expert logger wanders around the optimum.
    """

    mix: tuple = (0.3, 0.3, 0.4)  # random, fixed, noisy-expert
    random_low: float = 1.0
    random_high: float = 6.0
    fixed_scale: float = 0.4
    noise_sigma: float = 0.45

    def __post_init__(self):
        if len(self.mix) != 3 or abs(sum(self.mix) - 1.0) > 1e-9 or min(self.mix) < 0:
            raise ConfigError(f"behavior mix must be 3 non-negative weights summing to 1, got {self.mix}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    market: MarketSettings = field(default_factory=MarketSettings)
    campaigns: list = field(default_factory=list)
    behavior: BehaviorSettings = field(default_factory=BehaviorSettings)
    train_episodes_per_campaign: int = 20
    test_periods: int = 7
    test_seeds_per_period: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    beta: float = 0.5
    dt_target_quantile: float = 0.9

    def __post_init__(self):
        if not self.campaigns:
            self.campaigns = default_campaigns()
        if self.market.steps_per_episode % self.model.bag_len != 0:
            raise ConfigError("steps_per_episode must be divisible by bag_len")
        if self.train_episodes_per_campaign >= TEST_SEED_BASE:
            raise ConfigError("too many training episodes for the seed layout")

    # -- paths --------------------------------------------------------------

    def path(self, *parts) -> str:
        return os.path.join(self.output_dir, *parts)

    @property
    def offline_path(self):
        return self.path("data", "offline.jsonl")

    @property
    def expert_path(self):
        return self.path("data", "expert.jsonl")

    @property
    def manifest_path(self):
        return self.path("data", "manifest.json")

    def disc_path(self, plain_ce: bool):
        return self.path("models", "disc_ce.json" if plain_ce else "disc_nnpu.json")

    def prepped_path(self, which: str, plain_ce: bool):
        suffix = "_ce" if plain_ce else ""
        return self.path("data", f"prepped_{which}{suffix}.jsonl")

    def ckpt_path(self, method: str):
        return self.path("models", f"ckpt_{method}.json")

    def train_log_path(self, method: str):
        return self.path("logs", f"train_{method}.csv")

    @property
    def metrics_path(self):
        return self.path("reports", "metrics.csv")

    @property
    def metrics_by_campaign_path(self):
        return self.path("reports", "metrics_by_campaign.csv")

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "market" in d:
            d["market"] = MarketSettings(**_tupled(d["market"]))
        if "behavior" in d:
            d["behavior"] = BehaviorSettings(**_tupled(d["behavior"]))
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "disc" in d:
            d["disc"] = DiscConfig(**d["disc"])
        if "campaigns" in d:
            d["campaigns"] = [CampaignSpec(**c) for c in d["campaigns"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_json_dict(), indent=2, default=list))


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def default_campaigns() -> list:
    budgets = [12.0, 16.0, 20.0, 24.0, 14.0, 22.0, 18.0, 26.0]
    return [
        CampaignSpec(campaign_id=f"c{i}", budget=b, ros_bound=6.0)
        for i, b in enumerate(budgets)
    ]


def default_config(output_dir="runs/default", seed=0) -> ExperimentConfig:
    return ExperimentConfig(seed=seed, output_dir=output_dir)


# ---------------------------------------------------------------------------
# seeds and per-campaign market configs
# ---------------------------------------------------------------------------


def train_seed(exp: ExperimentConfig, campaign_idx: int, episode_idx: int) -> int:
    return exp.seed + CAMPAIGN_SEED_STRIDE * campaign_idx + episode_idx


def test_seed(exp: ExperimentConfig, campaign_idx: int, period: int, k: int) -> int:
    return (
        exp.seed
        + CAMPAIGN_SEED_STRIDE * campaign_idx
        + TEST_SEED_BASE
        + 100 * period
        + k
    )


def train_seeds(exp: ExperimentConfig):
    return [
        train_seed(exp, ci, ei)
        for ci in range(len(exp.campaigns))
        for ei in range(exp.train_episodes_per_campaign)
    ]


def test_seeds(exp: ExperimentConfig):
    return [
        test_seed(exp, ci, p, k)
        for ci in range(len(exp.campaigns))
        for p in range(exp.test_periods)
        for k in range(exp.test_seeds_per_period)
    ]


def market_config_for(exp: ExperimentConfig, campaign_idx: int, seed: int) -> MarketConfig:
    m = exp.market
    profile = sinusoid_cvr_profile(
        steps=m.steps_per_episode,
        amplitude=m.cvr_amplitude,
        noise=m.cvr_noise,
        phase=2.0 * math.pi * campaign_idx / max(1, len(exp.campaigns)),
        seed=exp.seed + 31 * campaign_idx,
    )
    return MarketConfig(
        steps_per_episode=m.steps_per_episode,
        opportunities_per_step=m.opportunities_per_step,
        value_distribution_params=m.value_distribution_params,
        competitor_bid_params=m.competitor_bid_params,
        cvr_profile=profile,
        seed=seed,
        a_max=m.a_max,
    )


# ---------------------------------------------------------------------------
# behavior policies and dataset generation
# ---------------------------------------------------------------------------


def _behavior_policy(kind: str, rng, expert_scale: float, b: BehaviorSettings,
                     a_max: float):
    if kind == "random":
        def policy(states, actions, rewards):
            return min(float(rng.uniform(b.random_low, b.random_high)), a_max)
    elif kind == "fixed":
        def policy(states, actions, rewards):
            return min(b.fixed_scale, a_max)
    elif kind == "noisy_expert":
        def policy(states, actions, rewards):
            return min(float(expert_scale * rng.lognormal(0.0, b.noise_sigma)), a_max)
    else:
        raise ConfigError(f"unknown behavior policy {kind!r}")
    return policy


_BEHAVIOR_KINDS = ("random", "fixed", "noisy_expert")


def gen_offline_data(exp: ExperimentConfig) -> list:
    """Mixed-policy behavior episodes for every campaign and train seed."""
    out = []
    for ci, camp in enumerate(exp.campaigns):
        for ei in range(exp.train_episodes_per_campaign):
            seed = train_seed(exp, ci, ei)
            cfg = market_config_for(exp, ci, seed)
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((exp.seed, 11, ci, ei)))
            )
            kind = _BEHAVIOR_KINDS[rng.choice(3, p=exp.behavior.mix)]
            expert_scale = 0.0
            if kind == "noisy_expert":
                stream = OpportunityStream(cfg)
                sol = solve_multipliers(stream, camp.constraints, a_max=cfg.a_max)
                expert_scale = min(sol.scale, cfg.a_max)
            policy = _behavior_policy(kind, rng, expert_scale, exp.behavior, cfg.a_max)
            traj = run_episode(
                policy, cfg, camp.constraints,
                campaign_id=camp.campaign_id, source=kind,
            )
            out.append(traj)
    return out


def gen_expert_data(exp: ExperimentConfig) -> list:
    """Hindsight expert episodes on the same campaign/seed grid."""
    out = []
    for ci, camp in enumerate(exp.campaigns):
        for ei in range(exp.train_episodes_per_campaign):
            seed = train_seed(exp, ci, ei)
            cfg = market_config_for(exp, ci, seed)
            out.append(
                generate_expert_trajectory(cfg, camp.constraints, campaign_id=camp.campaign_id)
            )
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(exp: ExperimentConfig):
    files = {}
    counts = {}
    for name, path in (("offline", exp.offline_path), ("expert", exp.expert_path)):
        if os.path.exists(path):
            files[name] = _sha256(path)
            with open(path) as f:
                counts[name] = sum(1 for line in f if line.strip())
    manifest = {
        "seed": exp.seed,
        "counts": counts,
        "sha256": files,
        "train_seeds": train_seeds(exp),
        "test_seeds": test_seeds(exp),
    }
    atomic_write_text(exp.manifest_path, json.dumps(manifest, indent=2))
    return manifest


def cmd_gen_data(exp: ExperimentConfig) -> list:
    trajs = gen_offline_data(exp)
    save_jsonl(trajs, exp.offline_path)
    write_manifest(exp)
    return trajs


def cmd_gen_expert(exp: ExperimentConfig) -> list:
    trajs = gen_expert_data(exp)
    save_jsonl(trajs, exp.expert_path)
    write_manifest(exp)
    return trajs


# ---------------------------------------------------------------------------
# discriminator training and dataset prep
# ---------------------------------------------------------------------------


def transitions_matrix(trajs) -> np.ndarray:
    """(N*T, 9) matrix of concatenated state vectors and actions."""
    xs = [np.concatenate([t.states, t.actions[:, None]], axis=1) for t in trajs]
    return np.concatenate(xs, axis=0)


def cmd_train_disc(exp: ExperimentConfig, plain_ce: bool = False) -> DiscriminatorModel:
    offline = load_jsonl(exp.offline_path)
    expert = load_jsonl(exp.expert_path)
    cfg = DiscConfig(**{**asdict(exp.disc), "plain_ce": plain_ce})
    model, curve = train_discriminator(
        transitions_matrix(expert), transitions_matrix(offline), cfg
    )
    model.save(exp.disc_path(plain_ce))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "loss"])
    w.writerows((i, f"{v:.8f}") for i, v in enumerate(curve))
    atomic_write_text(exp.path("logs", f"disc_{'ce' if plain_ce else 'nnpu'}.csv"),
                      buf.getvalue())
    return model


def prep_trajectories(offline, expert, disc: DiscriminatorModel, k_levels: int,
                      bag_len: int, beta: float):
    """Score, level-assign, redistribute, and relabel both datasets in place.

    Levels pool every offline transition for the quantile split; expert
    transitions are pinned to the top level.
    """
    all_trajs = offline + expert
    sig = [sigmoid(disc.score_batch(np.concatenate([t.states, t.actions[:, None]], axis=1)))
           for t in all_trajs]
    flags = np.concatenate(
        [np.full(t.num_steps, t.source == "expert", dtype=bool) for t in all_trajs]
    )
    levels = assign_levels(np.concatenate(sig), k_levels, flags)
    pos = 0
    for t, s in zip(all_trajs, sig):
        n = t.num_steps
        t.sigma_scores = s
        t.expert_levels = levels[pos:pos + n].astype(np.float64)
        rhat = rw.redistribute_trajectory(t.rewards, s, bag_len=bag_len, beta=beta)
        t.rewards_redistributed = rhat
        t.rtg = rw.recompute_rtg(rhat)
        pos += n
    return offline, expert


def cmd_prep(exp: ExperimentConfig, plain_ce: bool = False):
    disc = DiscriminatorModel.load(exp.disc_path(plain_ce))
    offline = load_jsonl(exp.offline_path)
    expert = load_jsonl(exp.expert_path)
    offline, expert = prep_trajectories(
        offline, expert, disc, exp.model.k_levels, exp.model.bag_len, exp.beta
    )
    save_jsonl(offline, exp.prepped_path("offline", plain_ce))
    save_jsonl(expert, exp.prepped_path("expert", plain_ce))
    return offline, expert


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodSpec:
    name: str
    arch: Arch
    flags: AblationFlags
    use_expert_data: bool
    disc_plain_ce: bool | None  # None: no discriminator involved
    redistributed_labels: bool
    seed_offset: int


METHODS = {
    "ebaret": MethodSpec("ebaret", ARCH_FULL, AblationFlags(), True, False, True, 0),
    "ebaret-nopu": MethodSpec(
        "ebaret-nopu", ARCH_FULL, AblationFlags(no_pu=True), True, True, True, 1
    ),
    "ebaret-noea": MethodSpec(
        "ebaret-noea", ARCH_NO_LEVEL, AblationFlags(no_expert_token=True), True,
        False, True, 2
    ),
    "ebaret-nobr": MethodSpec(
        "ebaret-nobr", ARCH_FULL, AblationFlags(no_bag_reward=True), True, False,
        False, 3
    ),
    "ebaret-noe": MethodSpec(
        "ebaret-noe", ARCH_DT, AblationFlags(no_expert=True), False, None, False, 4
    ),
    "dt": MethodSpec("dt", ARCH_DT, AblationFlags(no_expert=True), False, None, False, 5),
    "bc": MethodSpec("bc", ARCH_BC, AblationFlags(no_expert=True), False, None, False, 6),
}

_METHOD_ALIASES = {
    "ebaret¬e": "ebaret-noe",
    "ebaret¬_e": "ebaret-noe",
}


def normalize_method(name: str) -> str:
    """Accept CLI spellings like 'ebaret-noE' or 'ebaret¬E'."""
    key = name.strip().lower().replace("¬", "-no")
    if key in METHODS:
        return key
    raise ConfigError(f"unknown method {name!r}; choose from {sorted(METHODS)}")


def raw_rtg(traj: Trajectory) -> np.ndarray:
    return rw.recompute_rtg(traj.rewards)


def build_training_batch(trajs, model_cfg: ModelConfig, spec: MethodSpec) -> TrainingBatch:
    n = len(trajs)
    t_steps = trajs[0].num_steps
    states = np.stack([t.states for t in trajs])
    actions = np.stack([t.actions for t in trajs])
    if spec.redistributed_labels:
        missing = [t for t in trajs if t.rtg is None]
        if missing:
            raise PipelineError("trajectories lack redistributed labels; run prep")
        rtgs = np.stack([t.rtg for t in trajs])
    else:
        rtgs = np.stack([raw_rtg(t) for t in trajs])
    if spec.arch.use_level_embedding:
        missing = [t for t in trajs if t.expert_levels is None]
        if missing:
            raise PipelineError("trajectories lack expert levels; run prep")
        levels = np.stack([t.expert_levels for t in trajs]).astype(np.int64)
    else:
        levels = np.zeros((n, t_steps), dtype=np.int64)
    return TrainingBatch(states, actions, rtgs / model_cfg.rtg_scale, levels)


def _load_method_data(exp: ExperimentConfig, spec: MethodSpec):
    if spec.disc_plain_ce is None:
        offline = load_jsonl(exp.offline_path)
        expert = load_jsonl(exp.expert_path) if spec.use_expert_data else []
    else:
        offline = load_jsonl(exp.prepped_path("offline", spec.disc_plain_ce))
        expert = (
            load_jsonl(exp.prepped_path("expert", spec.disc_plain_ce))
            if spec.use_expert_data
            else []
        )
    return offline, expert


def cmd_train(exp: ExperimentConfig, method: str) -> TrajectoryTransformer:
    spec = METHODS[normalize_method(method)]
    offline, expert = _load_method_data(exp, spec)
    trajs = offline + expert

    if spec.use_expert_data:
        mean_off = float(np.mean([t.total_reward for t in offline]))
        mean_exp = float(np.mean([t.total_reward for t in expert]))
        if mean_exp <= mean_off:
            raise PipelineError(
                f"expert data is not better than offline data "
                f"({mean_exp:.3f} <= {mean_off:.3f}); dataset generation is off"
            )

    model_cfg = ModelConfig(**{**asdict(exp.model), "seed": exp.model.seed + 1000 * spec.seed_offset})
    data = build_training_batch(trajs, model_cfg, spec)
    rows: list = []
    model = train_model(data, model_cfg, spec.arch, log_rows=rows)

    manual_target = float(
        np.quantile([t.total_reward for t in trajs], exp.dt_target_quantile)
    )
    model.save(
        exp.ckpt_path(spec.name),
        extra_meta={
            "method": spec.name,
            "manual_target": manual_target,
            "n_train_trajectories": len(trajs),
        },
    )
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["step", "rtg_loss", "action_loss"])
    w.writerows((s, f"{r:.8f}", f"{a:.8f}") for s, r, a in rows)
    atomic_write_text(exp.train_log_path(spec.name), buf.getvalue())
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    method: str
    period: int
    seed: int
    campaign_id: str
    conversions_expected: float
    conversions_realized: float
    spend: float
    ratio: float  # achieved / hindsight-optimal expected conversions


@dataclass
class EvalReport:
    method: str
    rows: list

    def per_period(self):
        """period -> mean over seeds of campaign-summed expected conversions."""
        by_period: dict[int, dict[int, float]] = {}
        for r in self.rows:
            by_period.setdefault(r.period, {}).setdefault(r.seed, 0.0)
            by_period[r.period][r.seed] += r.conversions_expected
        return {
            p: float(np.mean(list(seeds.values()))) for p, seeds in sorted(by_period.items())
        }

    def grand_mean(self) -> float:
        return float(np.mean(list(self.per_period().values())))

    def per_campaign_mean(self):
        by_c: dict[str, list] = {}
        for r in self.rows:
            by_c.setdefault(r.campaign_id, []).append(r.conversions_expected)
        return {c: float(np.mean(v)) for c, v in sorted(by_c.items())}

    def summary(self) -> dict:
        period_means = self.per_period()
        values = list(period_means.values())
        return {
            "method": self.method,
            "grand_mean": self.grand_mean(),
            "per_period_mean": period_means,
            "per_campaign_mean": self.per_campaign_mean(),
            "stderr": float(np.std(values, ddof=1) / math.sqrt(len(values)))
            if len(values) > 1
            else 0.0,
        }


def _hindsight_value(exp: ExperimentConfig, ci: int, seed: int, cache: dict) -> float:
    key = (ci, seed)
    if key not in cache:
        cfg = market_config_for(exp, ci, seed)
        stream = OpportunityStream(cfg)
        sol = solve_multipliers(stream, exp.campaigns[ci].constraints, a_max=cfg.a_max)
        cache[key] = sol.summary.total_value
    return cache[key]


def cmd_eval(exp: ExperimentConfig, method: str, rstar_cache: dict | None = None) -> EvalReport:
    spec = METHODS[normalize_method(method)]
    model = TrajectoryTransformer.load(exp.ckpt_path(spec.name))
    manual_target = model.loaded_meta.get("manual_target")
    cache = rstar_cache if rstar_cache is not None else {}
    rows = []
    for ci, camp in enumerate(exp.campaigns):
        for period in range(exp.test_periods):
            for k in range(exp.test_seeds_per_period):
                seed = test_seed(exp, ci, period, k)
                cfg = market_config_for(exp, ci, seed)
                policy = make_inference_policy(model, manual_target=manual_target)
                traj = run_episode(policy, cfg, camp.constraints,
                                   campaign_id=camp.campaign_id, source=spec.name)
                rstar = _hindsight_value(exp, ci, seed, cache)
                rows.append(
                    EvalRow(
                        method=spec.name,
                        period=period,
                        seed=seed,
                        campaign_id=camp.campaign_id,
                        conversions_expected=traj.total_value,
                        conversions_realized=traj.total_reward,
                        spend=traj.total_spend,
                        ratio=traj.total_value / rstar if rstar > 0 else 0.0,
                    )
                )
    report = EvalReport(method=spec.name, rows=rows)
    _append_metrics(exp, report)
    return report


def _append_metrics(exp: ExperimentConfig, report: EvalReport):
    """Merge this method's rows into the shared metrics CSVs."""
    agg_path = exp.metrics_path
    by_campaign_path = exp.metrics_by_campaign_path

    existing = []
    if os.path.exists(by_campaign_path):
        with open(by_campaign_path) as f:
            existing = [r for r in csv.DictReader(f) if r["method"] != report.method]
    rows = existing + [
        {
            "method": r.method,
            "period": r.period,
            "seed": r.seed,
            "campaign": r.campaign_id,
            "conversions": f"{r.conversions_expected:.6f}",
            "conversions_realized": f"{r.conversions_realized:.0f}",
            "spend": f"{r.spend:.6f}",
            "ratio": f"{r.ratio:.6f}",
        }
        for r in report.rows
    ]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(by_campaign_path, buf.getvalue())

    # aggregated across campaigns: period,seed,method,conversions,spend
    agg: dict[tuple, list] = {}
    for r in rows:
        key = (int(r["period"]), int(r["seed"]), r["method"])
        agg.setdefault(key, [0.0, 0.0])
        agg[key][0] += float(r["conversions"])
        agg[key][1] += float(r["spend"])
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["period", "seed", "method", "conversions", "spend"])
    for (period, seed, m), (conv, spend) in sorted(agg.items()):
        w.writerow([period, seed, m, f"{conv:.6f}", f"{spend:.6f}"])
    atomic_write_text(agg_path, buf.getvalue())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def cmd_ratio_report(exp: ExperimentConfig, bins: int = 20) -> dict:
    """Suboptimality of the offline corpus: achieved / hindsight-optimal
    expected conversions per episode, with a histogram over [0, 1]."""
    offline = load_jsonl(exp.offline_path)
    cache: dict = {}
    idx = {c.campaign_id: i for i, c in enumerate(exp.campaigns)}
    ratios = []
    for t in offline:
        rstar = _hindsight_value(exp, idx[t.campaign_id], t.seed, cache)
        ratios.append(t.total_value / rstar if rstar > 0 else 0.0)
    ratios = np.asarray(ratios)

    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(ratios, 0.0, 1.0), bins=edges)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["bin_low", "bin_high", "count"])
    for i in range(bins):
        w.writerow([f"{edges[i]:.4f}", f"{edges[i + 1]:.4f}", int(counts[i])])
    atomic_write_text(exp.path("reports", "ratio_hist.csv"), buf.getvalue())

    summary = {
        "n": int(ratios.size),
        "median": float(np.median(ratios)),
        "mean": float(ratios.mean()),
        "max": float(ratios.max()),
        "min": float(ratios.min()),
        "frac_below_0.9": float((ratios < 0.9).mean()),
    }
    atomic_write_text(exp.path("reports", "ratio_summary.json"), json.dumps(summary, indent=2))
    return summary


def cmd_report(exp: ExperimentConfig) -> dict:
    """Cross-method summary from the accumulated metrics CSV."""
    if not os.path.exists(exp.metrics_path):
        raise PipelineError("no metrics yet; run eval first")
    per = {}
    with open(exp.metrics_path) as f:
        for r in csv.DictReader(f):
            per.setdefault(r["method"], {}).setdefault(int(r["period"]), []).append(
                float(r["conversions"])
            )
    out = {}
    for method, periods in per.items():
        means = {p: float(np.mean(v)) for p, v in sorted(periods.items())}
        out[method] = {
            "grand_mean": float(np.mean(list(means.values()))),
            "per_period_mean": means,
        }
    atomic_write_text(exp.path("reports", "report.json"), json.dumps(out, indent=2))
    return out


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def ensure_datasets(exp: ExperimentConfig):
    if not os.path.exists(exp.offline_path):
        cmd_gen_data(exp)
    if not os.path.exists(exp.expert_path):
        cmd_gen_expert(exp)


def ensure_prepped(exp: ExperimentConfig, plain_ce: bool):
    if not os.path.exists(exp.disc_path(plain_ce)):
        cmd_train_disc(exp, plain_ce=plain_ce)
    if not os.path.exists(exp.prepped_path("offline", plain_ce)):
        cmd_prep(exp, plain_ce=plain_ce)


def run_pipeline(exp: ExperimentConfig, method: str,
                 rstar_cache: dict | None = None) -> tuple[str, EvalReport]:
    """Data (if missing) -> prep (if needed) -> train -> eval for a method."""
    name = normalize_method(method)
    spec = METHODS[name]
    ensure_datasets(exp)
    if spec.disc_plain_ce is not None:
        ensure_prepped(exp, spec.disc_plain_ce)
    if not os.path.exists(exp.ckpt_path(name)):
        cmd_train(exp, name)
    report = cmd_eval(exp, name, rstar_cache=rstar_cache)
    return exp.ckpt_path(name), report
