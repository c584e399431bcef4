"""Desk-scale GRPO on a template-choice policy.

The policy picks one answer template per prompt class from a softmax over
logits. Rollouts are scored by the full reward engine (stub judge, stub
status checker); advantages are group-normalised; the update is gradient
ascent on the clipped importance-ratio surrogate. There is deliberately no
reference-policy term anywhere: ``surrogate`` and ``surrogate_grad`` only
ever see the current logits, the behaviour logits and the advantages.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .reward import (
    DEFAULT_WEIGHTS,
    RewardClients,
    RewardContext,
    RewardVector,
    StaticStatusChecker,
    compute_reward,
    extract_urls,
)
from .stubs import RuleJudge

log = logging.getLogger(__name__)


class GroupTooSmall(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class RolloutError(RuntimeError):
    pass


def group_advantages(rewards: Sequence[float], eps: float = 1e-8) -> list[float]:
    """(r - mean) / max(population std, eps); an all-equal group gives zeros."""
    if len(rewards) < 2:
        raise GroupTooSmall(f"group needs at least 2 rewards, got {len(rewards)}")
    r = np.asarray(rewards, dtype=float)
    std = r.std()
    if std <= eps:
        return [0.0] * len(r)
    return list((r - r.mean()) / max(std, eps))


# --- policy ------------------------------------------------------------------


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyPolicy:
    classes: list[str]
    n_templates: int
    logits: np.ndarray = None  # (n_classes, n_templates)
    temperature: float = 1.0

    def __post_init__(self):
        if self.logits is None:
            self.logits = np.zeros((len(self.classes), self.n_templates))
        self.logits = np.asarray(self.logits, dtype=float)
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    def class_index(self, cls: str) -> int:
        return self.classes.index(cls)

    def probs(self, logits: Optional[np.ndarray] = None) -> np.ndarray:
        return softmax((self.logits if logits is None else logits) / self.temperature)

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(list(self.classes), self.n_templates, self.logits.copy(), self.temperature)


# --- environment -------------------------------------------------------------


@dataclass
class Prompt:
    id: str
    query: str
    cls: str
    evidence: list[str]
    gold: str


@dataclass
class Environment:
    prompts: list[Prompt]
    templates: list[str]
    prefix_pool: list[str] = field(default_factory=list)
    judge_rules: dict = field(default_factory=dict)
    http_status: dict = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return sorted({p.cls for p in self.prompts})

    def render(self, prompt: Prompt, template_index: int) -> str:
        evidence_urls = [u for text in prompt.evidence for u in extract_urls(text)]
        slug = prompt.id.replace("_", "-")
        values = {
            "gold": prompt.gold,
            "query": prompt.query,
            "evidence_url": evidence_urls[0] if evidence_urls else "",
            "fake_url": f"https://adsphere.example/help/{slug}-guide",
            "fake_url2": f"https://promo.example.net/{slug}/offer",
        }
        return self.templates[template_index].format_map(values)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Environment":
        golds = data.get("gold", [])
        prompts = []
        for i, p in enumerate(data["prompts"]):
            gold = p.get("gold", golds[i] if i < len(golds) else "")
            prompts.append(Prompt(str(p.get("id", f"p{i}")), p["query"], str(p.get("class", "default")), list(p.get("evidence", [])), gold))
        return cls(
            prompts,
            list(data["templates"]),
            list(data.get("prefix_pool", [])),
            dict(data.get("judge_rules", {})),
            dict(data.get("http_status", {})),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Environment":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "prompts": [{"id": p.id, "query": p.query, "class": p.cls, "evidence": p.evidence} for p in self.prompts],
            "gold": [p.gold for p in self.prompts],
            "templates": self.templates,
            "prefix_pool": self.prefix_pool,
            "judge_rules": self.judge_rules,
            "http_status": self.http_status,
        }


def default_environment() -> Environment:
    """Sixteen advertising-support prompts in two classes, five templates.

    Template 0 is the only one that earns every reward component: it restates
    the gold answer and links the evidence URL. The rest fabricate links,
    slip into informal tone, make unsafe promises or drop the answer.
    """
    billing = [
        ("How long does a refund take after a campaign is cancelled?", "Refunds for cancelled campaigns post within 5 business days."),
        ("When is the monthly invoice issued?", "Invoices are issued on the first business day of each month."),
        ("Can I pay for ads with a prepaid card?", "Prepaid cards are accepted when they support recurring charges."),
        ("What happens when my balance runs out?", "Ads pause automatically when the prepaid balance reaches zero."),
        ("How do I change the billing currency?", "The billing currency is fixed once the account is created."),
        ("Where do I download tax receipts?", "Tax receipts are downloadable from the billing history page."),
        ("Is there a minimum top-up amount?", "The minimum top-up amount is 50 credits."),
        ("Why was I charged twice?", "Duplicate charges are authorisation holds that drop within 3 days."),
    ]
    policy = [
        ("Can I advertise dietary supplements?", "Supplement ads need a health claim review before launch."),
        ("Are before-and-after images allowed?", "Before-and-after images are not allowed in weight-loss ads."),
        ("How long does ad review take?", "Most ads are reviewed within 24 hours."),
        ("Can I target users under 18?", "Ads cannot target users under 18 for restricted categories."),
        ("What counts as misleading pricing?", "Prices in ads must match the landing page price."),
        ("Do I need a licence for financial ads?", "Financial service ads require a registered licence number."),
        ("Can ads mention competitors by name?", "Competitor names are allowed only in factual comparisons."),
        ("How do I appeal a rejected ad?", "Rejected ads can be appealed once from the ad review panel."),
    ]
    prompts = []
    for cls, rows in (("billing", billing), ("policy", policy)):
        for i, (q, gold) in enumerate(rows):
            pid = f"{cls}_{i}"
            url = f"https://support.adsphere.example/{cls}/article-{i}"
            evidence = [f"{gold} Reference article: {url}"]
            prompts.append(Prompt(pid, q, cls, evidence, gold))
    templates = [
        "{gold} See {evidence_url} for details.",
        "{gold} Full guide at {fake_url}",
        "lol {gold} more at {fake_url}",
        "{gold} Results are guaranteed, see {fake_url} and {fake_url2}",
        "Please contact support for help with this question.",
    ]
    return Environment(prompts, templates, ["https://adsphere.example/"], {}, {})


# --- rollouts ----------------------------------------------------------------


@dataclass
class RolloutGroup:
    prompt_id: str
    cls: str
    template_ids: list[int]
    responses: list[str]
    rewards: list[float]
    advantages: list[float]
    components: list[RewardVector]
    behaviour_probs: list[float]


RewardFn = Callable[[Prompt, str], RewardVector]


def make_reward_fn(env: Environment, weights=DEFAULT_WEIGHTS) -> RewardFn:
    """Reward engine with a rule judge and an offline status table; memoised."""
    clients = RewardClients(
        judge=RuleJudge.from_rules(env.judge_rules),
        checker=StaticStatusChecker(env.http_status, default=None),
        prefix_pool=env.prefix_pool,
    )
    cache: dict[tuple[str, str], RewardVector] = {}

    def reward(prompt: Prompt, response: str) -> RewardVector:
        key = (prompt.id, response)
        if key not in cache:
            report = compute_reward(response, prompt.evidence, prompt.gold, RewardContext(prompt.query), clients, weights)
            cache[key] = report.vector
        return cache[key]

    return reward


def collect_rollouts(
    policy: ToyPolicy,
    env: Environment,
    prompts: Sequence[Prompt],
    group_size: int,
    reward_fn: RewardFn,
    rng: np.random.Generator,
    eps: float = 1e-8,
) -> list[RolloutGroup]:
    probs = policy.probs()
    groups = []
    for prompt in prompts:
        c = policy.class_index(prompt.cls)
        picks = rng.choice(policy.n_templates, size=group_size, p=probs[c])
        responses = [env.render(prompt, int(j)) for j in picks]
        try:
            vectors = [reward_fn(prompt, r) for r in responses]
        except Exception as exc:
            raise RolloutError(f"reward failed for prompt {prompt.id}: {exc}") from exc
        rewards = [v.total for v in vectors]
        groups.append(
            RolloutGroup(
                prompt.id,
                prompt.cls,
                [int(j) for j in picks],
                responses,
                rewards,
                group_advantages(rewards, eps),
                vectors,
                [float(probs[c, j]) for j in picks],
            )
        )
    return groups


# --- clipped surrogate ---------------------------------------------------------


@dataclass(frozen=True)
class Samples:
    """Flattened rollouts: class row, chosen template, behaviour prob, advantage."""

    rows: np.ndarray
    actions: np.ndarray
    old_probs: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_groups(cls, policy: ToyPolicy, groups: Sequence[RolloutGroup]) -> "Samples":
        rows, actions, old, adv = [], [], [], []
        for g in groups:
            c = policy.class_index(g.cls)
            for j, p, a in zip(g.template_ids, g.behaviour_probs, g.advantages):
                rows.append(c)
                actions.append(j)
                old.append(p)
                adv.append(a)
        return cls(np.array(rows, dtype=int), np.array(actions, dtype=int), np.array(old), np.array(adv))


def surrogate(logits: np.ndarray, samples: Samples, clip: float, temperature: float = 1.0) -> float:
    """mean over samples of min(ratio * A, clip(ratio, 1-e, 1+e) * A)."""
    probs = softmax(logits / temperature)
    ratio = probs[samples.rows, samples.actions] / samples.old_probs
    a = samples.advantages
    return float(np.mean(np.minimum(ratio * a, np.clip(ratio, 1 - clip, 1 + clip) * a)))


def surrogate_grad(logits: np.ndarray, samples: Samples, clip: float, temperature: float = 1.0) -> np.ndarray:
    probs = softmax(logits / temperature)
    p_act = probs[samples.rows, samples.actions]
    ratio = p_act / samples.old_probs
    a = samples.advantages
    # the unclipped branch carries the gradient unless clipping made the term smaller
    active = ratio * a <= np.clip(ratio, 1 - clip, 1 + clip) * a
    coef = np.where(active, a * ratio, 0.0) / temperature
    grad = np.zeros_like(logits)
    for c, j, w in zip(samples.rows, samples.actions, coef):
        if w == 0.0:
            continue
        grad[c] -= w * probs[c]
        grad[c, j] += w
    return grad / max(len(samples.advantages), 1)


# --- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 120
    batch_prompts: int = 16
    group_size: int = 8
    clip_ratio: float = 0.2
    learning_rate: float = 2.0
    seed: int = 0
    temperature: float = 1.0
    max_response_tokens: int = 2048
    update_epochs: int = 1
    adv_eps: float = 1e-8

    def __post_init__(self):
        if self.steps < 0 or self.batch_prompts < 1 or self.group_size < 2 or self.update_epochs < 1:
            raise ValueError("steps >= 0, batch_prompts >= 1, group_size >= 2 and update_epochs >= 1 are required")
        if self.temperature <= 0 or self.clip_ratio <= 0 or self.learning_rate < 0:
            raise ValueError("temperature and clip_ratio must be positive, learning_rate non-negative")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "TrainConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class StepStats:
    step: int
    mean_reward: float
    r_f: float
    r_s: float
    r_a: float
    r_h: float
    expected_reward: float
    objective: float
    grad_norm: float
    clip_fraction: float


def update_policy(policy: ToyPolicy, groups: Sequence[RolloutGroup], config: TrainConfig) -> tuple[ToyPolicy, dict]:
    """Gradient ascent on the clipped surrogate, ``update_epochs`` steps on one batch."""
    samples = Samples.from_groups(policy, groups)
    new = policy.copy()
    grad_norm = 0.0
    for _ in range(config.update_epochs):
        grad = surrogate_grad(new.logits, samples, config.clip_ratio, new.temperature)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient; logits={new.logits.tolist()}, advantages={samples.advantages.tolist()}")
        grad_norm = float(np.linalg.norm(grad))
        new.logits = new.logits + config.learning_rate * grad
    probs = new.probs()
    ratio = probs[samples.rows, samples.actions] / samples.old_probs
    clipped = np.abs(ratio - 1) > config.clip_ratio
    stats = {
        "objective": surrogate(new.logits, samples, config.clip_ratio, new.temperature),
        "grad_norm": grad_norm,
        "clip_fraction": float(clipped.mean()) if len(ratio) else 0.0,
    }
    return new, stats


def expected_reward(policy: ToyPolicy, env: Environment, reward_fn: RewardFn) -> float:
    probs = policy.probs()
    total = 0.0
    for prompt in env.prompts:
        c = policy.class_index(prompt.cls)
        total += sum(probs[c, j] * reward_fn(prompt, env.render(prompt, j)).total for j in range(policy.n_templates))
    return total / len(env.prompts)


@dataclass
class TrainResult:
    curve: list[StepStats]
    policy: ToyPolicy
    best_template: dict[str, int]

    def final_probs(self) -> dict[str, list[float]]:
        probs = self.policy.probs()
        return {c: probs[i].tolist() for i, c in enumerate(self.policy.classes)}

    def report(self) -> dict:
        probs = self.policy.probs()
        return {
            "steps": len(self.curve),
            "final_probs": self.final_probs(),
            "best_template": self.best_template,
            "mass_on_best": {c: float(probs[i, self.best_template[c]]) for i, c in enumerate(self.policy.classes)},
            "first": asdict(self.curve[0]) if self.curve else None,
            "last": asdict(self.curve[-1]) if self.curve else None,
        }


def best_templates(env: Environment, reward_fn: RewardFn) -> dict[str, int]:
    """Per class, the template with the highest mean reward over that class's prompts."""
    best = {}
    for cls in env.classes:
        members = [p for p in env.prompts if p.cls == cls]
        means = [np.mean([reward_fn(p, env.render(p, j)).total for p in members]) for j in range(len(env.templates))]
        best[cls] = int(np.argmax(means))
    return best


def train_toy(config: TrainConfig, env: Optional[Environment] = None, reward_fn: Optional[RewardFn] = None) -> TrainResult:
    env = env or default_environment()
    reward_fn = reward_fn or make_reward_fn(env)
    rng = np.random.default_rng(config.seed)
    policy = ToyPolicy(env.classes, len(env.templates), temperature=config.temperature)
    curve = []
    for step in range(config.steps):
        idx = rng.choice(len(env.prompts), size=config.batch_prompts, replace=len(env.prompts) < config.batch_prompts)
        batch = [env.prompts[i] for i in idx]
        exp_r = expected_reward(policy, env, reward_fn)
        groups = collect_rollouts(policy, env, batch, config.group_size, reward_fn, rng, config.adv_eps)
        comps = [v for g in groups for v in g.components]
        policy, stats = update_policy(policy, groups, config)
        curve.append(
            StepStats(
                step=step,
                mean_reward=float(np.mean([v.total for v in comps])),
                r_f=float(np.mean([v.r_f for v in comps])),
                r_s=float(np.mean([v.r_s for v in comps])),
                r_a=float(np.mean([v.r_a for v in comps])),
                r_h=float(np.mean([v.r_h for v in comps])),
                expected_reward=exp_r,
                **stats,
            )
        )
        log.debug("step %d mean reward %.3f", step, curve[-1].mean_reward)
    return TrainResult(curve, policy, best_templates(env, reward_fn))


CSV_FIELDS = ["step", "mean_reward", "r_f", "r_s", "r_a", "r_h"]


def write_training_log(curve: Sequence[StepStats], path: Union[str, Path], extended: bool = False) -> None:
    fields = list(StepStats.__dataclass_fields__) if extended else CSV_FIELDS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for s in curve:
            writer.writerow(asdict(s))
