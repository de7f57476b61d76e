"""Monte-Carlo tree search with UCT on the true environment or a learned model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import ActionContext, ModelConfig, dynamics_forward, reward_forward
from .envs import (
    N_ACTIONS, OBJECT_COLORS, REST_ACTION, EnvConfig, SimState, random_rollout,
    sample_initial_state, step_controlled,
)
from .fusion import filter_step, hungarian, initialize_beliefs, synthetic_detector
from .nnkit import EvalOps, ParamStore

POLICIES = ("random", "mcts-true", "mcts-model")


@dataclass(frozen=True)
class PlannerConfig:
    c: float = 1.0
    depth: int = 20
    budget: int = 200
    discount: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1 or self.depth < 1 or self.c < 0:
            raise ValueError("need budget >= 1, depth >= 1, c >= 0")

    @classmethod
    def for_model(cls, **kw) -> "PlannerConfig":
        base = dict(budget=50, discount=0.95)
        base.update(kw)
        return cls(**base)


class MctsNode:
    __slots__ = ("state", "action", "reward", "visits", "value_sum", "children")

    def __init__(self, state, action: int | None = None, reward: float = 0.0):
        self.state = state
        self.action = action
        self.reward = reward        # (discounted) reward of the transition into this node
        self.visits = 0
        self.value_sum = 0.0
        self.children: dict[int, MctsNode] = {}

    @property
    def q(self) -> float:
        return self.value_sum / self.visits if self.visits else 0.0

    @property
    def expanded(self) -> bool:
        return len(self.children) == N_ACTIONS


def uct_score(child: MctsNode | None, parent_visits: int, c: float) -> float:
    if parent_visits < 1:
        raise ValueError("parent must have been visited")
    if child is None or child.visits == 0:
        return math.inf
    return child.q + c * math.sqrt(math.log(parent_visits) / child.visits)


def select_child(node: MctsNode, c: float, rng: np.random.Generator) -> MctsNode:
    """Highest UCT score among the existing children; exact ties broken uniformly."""
    best, best_score = [], -math.inf
    for a in sorted(node.children):
        s = uct_score(node.children[a], node.visits, c)
        if s > best_score:
            best, best_score = [a], s
        elif s == best_score:
            best.append(a)
    pick = best[0] if len(best) == 1 else best[int(rng.integers(len(best)))]
    return node.children[pick]


def final_action(root: MctsNode, rng: np.random.Generator) -> int:
    """Most visited root action; ties broken uniformly at random."""
    if not root.children:
        return int(rng.integers(N_ACTIONS))
    most = max(ch.visits for ch in root.children.values())
    best = sorted(a for a, ch in root.children.items() if ch.visits == most)
    return best[0] if len(best) == 1 else best[int(rng.integers(len(best)))]


def check_tree(node: MctsNode) -> bool:
    """Every expanded node has visits == 1 + sum of child visits."""
    if not node.children:
        return node.visits >= 1
    if node.visits != 1 + sum(ch.visits for ch in node.children.values()):
        return False
    return all(check_tree(ch) for ch in node.children.values())


# --------------------------------------------------------------------------
# true environment


def plan_action_true(state: SimState, env: EnvConfig, cfg: PlannerConfig, rng: np.random.Generator,
                     return_tree: bool = False):
    """UCT search with one new child per expansion and a random rollout from it.

    The root counts as the first expanded node, so ``budget`` nodes exist when
    the search ends.
    """
    root = MctsNode(state)
    root.visits = 1
    for _ in range(cfg.budget - 1):
        node, path, ret, depth = root, [root], 0.0, 0
        while node.expanded:
            node = select_child(node, cfg.c, rng)
            path.append(node)
            depth += 1
            ret += node.reward
        untried = [a for a in range(N_ACTIONS) if a not in node.children]
        a = untried[int(rng.integers(len(untried)))]
        s, r = step_controlled(node.state, a, env)
        r *= cfg.discount ** depth
        child = MctsNode(s, a, r)
        node.children[a] = child
        actions = rng.integers(0, N_ACTIONS, size=cfg.depth)
        rollout = _discounted_rollout(s, actions, env, cfg.discount, depth + 1)
        ret += r + rollout
        child.visits = 1
        child.value_sum = ret
        for n in path:
            n.visits += 1
            n.value_sum += ret
    action = final_action(root, rng)
    return (action, root) if return_tree else action


def _discounted_rollout(state: SimState, actions: np.ndarray, env: EnvConfig, discount: float, offset: int) -> float:
    if discount == 1.0:
        return random_rollout(state, actions, env)
    total, s = 0.0, state
    for k, a in enumerate(actions):
        s, r = step_controlled(s, int(a), env)
        total += r * discount ** (offset + k)
    return total


# --------------------------------------------------------------------------
# learned model


@dataclass
class LearnedModel:
    params: ParamStore
    cfg: ModelConfig
    appearance: np.ndarray | None = None
    constant_reward: float | None = None   # overrides the reward head (diagnostics)

    def __post_init__(self):
        if self.appearance is None:
            self.appearance = OBJECT_COLORS[: self.cfg.n_objects]
        self._ops = EvalOps(self.params)

    def step(self, z: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched transition: (B, O, l), (B,) -> next means (B, O, l), collision probability (B,)."""
        tr = dynamics_forward(z, self.params, self.cfg, ActionContext(actions, self.appearance), self._ops)
        if self.constant_reward is not None:
            prob = np.full(z.shape[0], self.constant_reward)
        else:
            prob = reward_forward(tr.joint, self.params, self.cfg, self._ops)
        if not (np.all(np.isfinite(tr.mean)) and np.all(np.isfinite(prob))):
            raise FloatingPointError("non-finite model output during planning")
        return tr.mean, prob


def plan_action_model_batch(states: list[np.ndarray], model: LearnedModel, cfg: PlannerConfig,
                            rngs: list[np.random.Generator], return_trees: bool = False):
    """Run one search per entry of ``states`` in lockstep, batching all network calls.

    Expanding a node creates all nine children in one batched call and rolls
    out from each of them with random actions; the nine returns count as nine
    visits on every ancestor.  Rewards are minus the predicted collision
    probability, discounted per step from the root.
    """
    roots = [MctsNode(np.asarray(z, dtype=np.float64)) for z in states]
    for r in roots:
        r.visits = 1
    actions9 = np.arange(N_ACTIONS)
    for it in range(cfg.budget):
        leaves, paths, rets, depths = [], [], [], []
        for k, root in enumerate(roots):
            node, path, ret, depth = root, [root], 0.0, 0
            while node.children:
                node = select_child(node, cfg.c, rngs[k])
                path.append(node)
                ret += node.reward
                depth += 1
            leaves.append(node)
            paths.append(path)
            rets.append(ret)
            depths.append(depth)
        z = np.concatenate([np.repeat(leaf.state[None], N_ACTIONS, axis=0) for leaf in leaves])
        acts = np.tile(actions9, len(leaves))
        z, prob = model.step(z, acts)
        child_states = z
        gamma = np.repeat(np.array([cfg.discount ** d for d in depths]), N_ACTIONS)
        child_reward = -prob * gamma
        returns = child_reward.copy()
        rollout_actions = np.stack([rngs[k].integers(0, N_ACTIONS, size=(cfg.depth, N_ACTIONS))
                                    for k in range(len(leaves))], axis=1).reshape(cfg.depth, -1)
        for step in range(cfg.depth):
            z, prob = model.step(z, rollout_actions[step])
            gamma = gamma * cfg.discount
            returns += -prob * gamma
        for k, leaf in enumerate(leaves):
            sl = slice(k * N_ACTIONS, (k + 1) * N_ACTIONS)
            g = returns[sl] + rets[k]
            for a in range(N_ACTIONS):
                child = MctsNode(child_states[sl][a], a, float(child_reward[sl][a]))
                child.visits = 1
                child.value_sum = float(g[a])
                leaf.children[a] = child
            total = float(g.sum())
            for n in paths[k]:
                n.visits += N_ACTIONS
                n.value_sum += total
    actions = [final_action(root, rngs[k]) for k, root in enumerate(roots)]
    return (actions, roots) if return_trees else actions


def plan_action_model(z: np.ndarray, model: LearnedModel, cfg: PlannerConfig, rng: np.random.Generator,
                      return_tree: bool = False):
    out = plan_action_model_batch([z], model, cfg, [rng], return_trees=return_tree)
    if return_tree:
        return out[0][0], out[1][0]
    return out[0]


# --------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeResult:
    total_reward: float
    states: list[SimState] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)


def episode_rngs(seed: int, episode: int) -> tuple[np.random.Generator, ...]:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(episode),))
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def initial_episode_state(env: EnvConfig, rng: np.random.Generator) -> tuple[SimState, SimState]:
    """(previous frame, first frame): one rest step gives the filter two frames before acting."""
    before = sample_initial_state(env, rng)
    first, _ = step_controlled(before, REST_ACTION, env)
    return before, first


class _ModelTracker:
    """Filter state of one episode for the model-based policy."""

    def __init__(self, model: LearnedModel, before: SimState, first: SimState, noise: float,
                 rng: np.random.Generator):
        self.model, self.noise, self.rng = model, noise, rng
        colors = model.appearance
        d0 = synthetic_detector(before, noise, rng, colors)
        d1 = synthetic_detector(first, noise, rng, colors)
        belief = initialize_beliefs(d0, d1, model.cfg.latent_dim)
        # canonical slot order: slot k holds the object whose appearance is palette colour k
        cost = np.linalg.norm(colors[:, None, :] - belief.appearance[None, :, :], axis=-1)
        self.belief = belief.reorder(hungarian(cost))

    def z(self) -> np.ndarray:
        return self.belief.dynamics_mean()

    def observe(self, state: SimState, action: int) -> None:
        det = synthetic_detector(state, self.noise, self.rng, self.model.appearance)
        ctx = ActionContext(np.array([action]), self.belief.appearance)
        self.belief = filter_step(self.belief, det, self.model.params, self.model.cfg, ctx)


def run_episodes(policy: str, env: EnvConfig, episodes: int, steps: int = 100, seed: int = 0,
                 planner: PlannerConfig | None = None, model: LearnedModel | None = None,
                 detector_noise: float = 0.005, keep_trace: bool = False,
                 first_episode: int = 0) -> list[EpisodeResult]:
    """Play ``episodes`` independent episodes; model-based episodes advance in lockstep.

    Episode ``e`` draws from the RNG streams of index ``first_episode + e``.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if policy == "mcts-model" and model is None:
        raise ValueError("mcts-model needs a learned model")
    if planner is None:
        planner = PlannerConfig.for_model() if policy == "mcts-model" else PlannerConfig()
    streams = [episode_rngs(seed, first_episode + e) for e in range(episodes)]
    states, results, trackers = [], [], []
    for e, (env_rng, plan_rng, det_rng) in enumerate(streams):
        before, first = initial_episode_state(env, env_rng)
        states.append(first)
        results.append(EpisodeResult(0.0, [first] if keep_trace else []))
        if policy == "mcts-model":
            trackers.append(_ModelTracker(model, before, first, detector_noise, det_rng))
    for t in range(steps):
        if policy == "random":
            actions = [int(s[1].integers(N_ACTIONS)) for s in streams]
        elif policy == "mcts-true":
            actions = [plan_action_true(states[e], env, planner, streams[e][1]) for e in range(episodes)]
        else:
            actions = plan_action_model_batch([tr.z() for tr in trackers], model, planner,
                                              [s[1] for s in streams])
        for e in range(episodes):
            states[e], r = step_controlled(states[e], actions[e], env)
            res = results[e]
            res.total_reward += r
            if keep_trace:
                res.states.append(states[e])
            res.actions.append(actions[e])
            res.rewards.append(r)
            if policy == "mcts-model":
                trackers[e].observe(states[e], actions[e])
    return results


def run_episode(policy: str, env: EnvConfig, steps: int = 100, seed: int = 0, episode: int = 0,
                planner: PlannerConfig | None = None, model: LearnedModel | None = None,
                detector_noise: float = 0.005) -> EpisodeResult:
    """Single episode with a full (state, action, reward) trace."""
    return run_episodes(policy, env, 1, steps, seed, planner, model, detector_noise, keep_trace=True,
                        first_episode=episode)[0]


def write_trace(path: str | Path, results: list[EpisodeResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = results[0].states[0].n_objects if results and results[0].states else 0
        cols = [f"{k}{o}_{ax}" for o in range(n) for k in ("p", "v") for ax in "xy"]
        w.writerow(["episode", "t"] + cols + ["action", "reward"])
        for e, res in enumerate(results):
            for t, (a, r) in enumerate(zip(res.actions, res.rewards)):
                row = []
                if res.states:
                    s = res.states[t]
                    for o in range(n):
                        row += [repr(float(x)) for x in (*s.positions[o], *s.velocities[o])]
                w.writerow([e, t] + row + [a, r])


def summarize(results: list[EpisodeResult]) -> tuple[float, float]:
    """Mean total reward and its standard error."""
    totals = np.array([r.total_reward for r in results])
    se = totals.std(ddof=1) / math.sqrt(len(totals)) if len(totals) > 1 else 0.0
    return float(totals.mean()), float(se)


__all__ = [
    "PlannerConfig", "MctsNode", "LearnedModel", "EpisodeResult", "POLICIES", "uct_score",
    "select_child", "final_action", "check_tree", "plan_action_true", "plan_action_model",
    "plan_action_model_batch", "run_episode", "run_episodes", "write_trace", "summarize",
]
