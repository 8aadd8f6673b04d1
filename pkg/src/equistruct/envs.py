"""CartPole (C2 reflection) and a toroidal predator-prey grid world (C4 rotation).

Both environments expose ``reset() -> obs`` and ``step(action) -> (obs,
reward, done)`` plus pure transition functions used by the symmetry
checks. Group element ``g`` acts on CartPole by negating the state when
``g == 1`` and on the grid world by ``g`` clockwise quarter turns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .group import rotate_clockwise

__all__ = [
    "CartPoleState",
    "CartPolePhysics",
    "CartPole",
    "cartpole_step",
    "GridWorldState",
    "GridWorld",
    "gridworld_transition",
    "gridworld_step",
    "observe",
    "apply_env_transform",
    "transform_observation",
    "transform_action",
    "render_text",
    "VecEnv",
    "make_env",
    "ENV_IDS",
    "GROUP_ORDER",
    "NUM_ACTIONS",
    "TerminalStateError",
]

ENV_IDS = ("cartpole", "gridworld")
GROUP_ORDER = {"cartpole": 2, "gridworld": 4}
NUM_ACTIONS = {"cartpole": 2, "gridworld": 5}


class TerminalStateError(RuntimeError):
    """Stepping an episode that has already ended."""


# --------------------------------------------------------------------------
# CartPole

@dataclass(frozen=True)
class CartPolePhysics:
    gravity: float = 9.8
    mass_cart: float = 1.0
    mass_pole: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    tau: float = 0.02
    x_limit: float = 2.4
    theta_limit: float = 12 * 2 * math.pi / 360
    max_steps: int = 500


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    steps: int = 0

    def vector(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    def terminal(self, physics: CartPolePhysics = CartPolePhysics()) -> bool:
        return (abs(self.x) > physics.x_limit or abs(self.theta) > physics.theta_limit
                or self.steps >= physics.max_steps)


def cartpole_step(state: CartPoleState, action: int,
                  physics: CartPolePhysics = CartPolePhysics()) -> tuple[CartPoleState, float, bool]:
    """Explicit Euler step of the cart-pole ODE; action 0 pushes left, 1 right."""
    if state.terminal(physics):
        raise TerminalStateError("cart-pole episode already ended")
    p = physics
    force = p.force if action == 1 else -p.force
    total_mass = p.mass_cart + p.mass_pole
    pole_ml = p.mass_pole * p.half_length
    cos_t, sin_t = math.cos(state.theta), math.sin(state.theta)
    temp = (force + pole_ml * state.theta_dot ** 2 * sin_t) / total_mass
    theta_acc = (p.gravity * sin_t - cos_t * temp) / (
        p.half_length * (4.0 / 3.0 - p.mass_pole * cos_t ** 2 / total_mass))
    x_acc = temp - pole_ml * theta_acc * cos_t / total_mass
    nxt = CartPoleState(
        x=state.x + p.tau * state.x_dot,
        x_dot=state.x_dot + p.tau * x_acc,
        theta=state.theta + p.tau * state.theta_dot,
        theta_dot=state.theta_dot + p.tau * theta_acc,
        steps=state.steps + 1,
    )
    return nxt, 1.0, nxt.terminal(p)


class CartPole:
    env_id = "cartpole"
    num_actions = 2

    def __init__(self, seed: int = 0, physics: CartPolePhysics = CartPolePhysics(), frame: int = 0):
        self.rng = np.random.default_rng(seed)
        self.physics = physics
        self.frame = frame  # reset states are reflected when frame == 1
        self.state: CartPoleState | None = None

    def reset(self) -> np.ndarray:
        x, xd, th, thd = self.rng.uniform(-0.05, 0.05, size=4)
        self.state = apply_env_transform("cartpole", self.frame, CartPoleState(x, xd, th, thd))
        return observe(self.state)

    def step(self, action: int):
        self.state, reward, done = cartpole_step(self.state, int(action), self.physics)
        return observe(self.state), reward, done


# --------------------------------------------------------------------------
# Grid world

GRID = 7
CELL = 3
# (d_row, d_col) for noop, up, right, down, left
MOVES = ((0, 0), (-1, 0), (0, 1), (1, 0), (0, -1))
PREY_MOVE_PROB = 0.15
CATCH_REWARD = 1.0
STEP_REWARD = -0.1
MAX_STEPS = 100


@dataclass(frozen=True)
class GridWorldState:
    agent: tuple[int, int]
    prey: tuple[int, int]
    steps: int = 0
    caught: bool = False

    def terminal(self) -> bool:
        return self.caught or self.steps >= MAX_STEPS


def _move(pos: tuple[int, int], direction: int) -> tuple[int, int]:
    dr, dc = MOVES[direction]
    return ((pos[0] + dr) % GRID, (pos[1] + dc) % GRID)


def gridworld_transition(state: GridWorldState, action: int, prey_moves: bool,
                         prey_direction: int) -> tuple[GridWorldState, float, bool]:
    """Deterministic transition given the prey's noise.

    ``prey_direction`` indexes (up, right, down, left). The catch is checked
    after both agent and prey have moved, so a prey stepping onto the agent
    also counts.
    """
    if state.terminal():
        raise TerminalStateError("grid-world episode already ended")
    agent = _move(state.agent, int(action))
    prey = _move(state.prey, 1 + int(prey_direction)) if prey_moves else state.prey
    caught = agent == prey
    nxt = GridWorldState(agent, prey, state.steps + 1, caught)
    return nxt, CATCH_REWARD if caught else STEP_REWARD, nxt.terminal()


def gridworld_step(state: GridWorldState, action: int, rng: np.random.Generator,
                   frame: int = 0) -> tuple[GridWorldState, float, bool]:
    """One step with the prey noise drawn from ``rng``.

    The compass direction is drawn in an abstract frame and turned by
    ``frame`` quarter turns, which couples a rotated copy of the world to the
    original when both share a seed.
    """
    prey_moves = rng.random() < PREY_MOVE_PROB
    direction = (int(rng.integers(4)) + frame) % 4
    return gridworld_transition(state, action, prey_moves, direction)


def _render(offset: tuple[int, int]) -> np.ndarray:
    img = np.zeros((GRID * CELL, GRID * CELL))
    c = GRID // 2
    for r, col in ((c, c), (c + offset[0], c + offset[1])):
        img[r * CELL:(r + 1) * CELL, col * CELL:(col + 1) * CELL] = 1.0
    return img


def _relative(state: GridWorldState) -> tuple[int, int]:
    half = GRID // 2
    return tuple(((p - a + half) % GRID) - half for p, a in zip(state.prey, state.agent))


class GridWorld:
    env_id = "gridworld"
    num_actions = 5

    def __init__(self, seed: int = 0, frame: int = 0):
        self.rng = np.random.default_rng(seed)
        self.frame = frame
        self.state: GridWorldState | None = None

    def reset(self) -> np.ndarray:
        cells = self.rng.choice(GRID * GRID, size=2, replace=False)
        agent, prey = (divmod(int(c), GRID) for c in cells)
        self.state = apply_env_transform("gridworld", self.frame, GridWorldState(agent, prey))
        return observe(self.state)

    def step(self, action: int):
        self.state, reward, done = gridworld_step(self.state, int(action), self.rng, self.frame)
        return observe(self.state), reward, done


# --------------------------------------------------------------------------
# Shared helpers

def observe(state) -> np.ndarray:
    """CartPole: (x, x_dot, theta, theta_dot). Grid world: 21x21 agent-centred image."""
    if isinstance(state, CartPoleState):
        return state.vector()
    if isinstance(state, GridWorldState):
        return _render(_relative(state))
    raise TypeError(f"unknown state type {type(state).__name__}")


def transform_action(env_id: str, g: int, action: int) -> int:
    if env_id == "cartpole":
        return int(action) ^ (g % 2)
    if env_id == "gridworld":
        return 0 if action == 0 else 1 + (int(action) - 1 + g) % 4
    raise ValueError(f"unknown environment {env_id!r}")


def transform_observation(env_id: str, g: int, obs: np.ndarray) -> np.ndarray:
    """L_g on observations (batched or single): negation or clockwise rotation."""
    if env_id == "cartpole":
        return -obs if g % 2 else obs.copy()
    if env_id == "gridworld":
        return np.ascontiguousarray(rotate_clockwise(g % 4, obs))
    raise ValueError(f"unknown environment {env_id!r}")


def _rotate_cell(pos: tuple[int, int], g: int) -> tuple[int, int]:
    r, c = pos
    for _ in range(g % 4):
        r, c = c, GRID - 1 - r  # clockwise about the centre cell
    return (r, c)


def apply_env_transform(env_id: str, g: int, state_or_obs, action: int | None = None):
    """Transform a state (or observation) and optionally an action by element ``g``.

    Returns the transformed state alone when ``action`` is None, otherwise
    the ``(state, action)`` pair.
    """
    if isinstance(state_or_obs, CartPoleState):
        s = state_or_obs
        out = replace(s, x=-s.x, x_dot=-s.x_dot, theta=-s.theta, theta_dot=-s.theta_dot) if g % 2 else s
    elif isinstance(state_or_obs, GridWorldState):
        s = state_or_obs
        out = replace(s, agent=_rotate_cell(s.agent, g), prey=_rotate_cell(s.prey, g))
    else:
        out = transform_observation(env_id, g, np.asarray(state_or_obs, dtype=float))
    if action is None:
        return out
    return out, transform_action(env_id, g, action)


def render_text(state: GridWorldState) -> str:
    """ASCII frame of the torus: A agent, P prey, X both."""
    rows = []
    for r in range(GRID):
        row = []
        for c in range(GRID):
            here = ((r, c) == state.agent, (r, c) == state.prey)
            row.append({(True, True): "X", (True, False): "A", (False, True): "P"}.get(here, "."))
        rows.append(" ".join(row))
    return "\n".join(rows)


def make_env(env_id: str, seed: int = 0, frame: int = 0):
    if env_id == "cartpole":
        return CartPole(seed=seed, frame=frame)
    if env_id == "gridworld":
        return GridWorld(seed=seed, frame=frame)
    raise ValueError(f"unknown environment {env_id!r}; expected one of {ENV_IDS}")


class VecEnv:
    """``n`` independent environments; instance ``i`` is seeded ``base_seed + i``.

    Finished episodes reset automatically; ``step`` then returns the first
    observation of the new episode and reports the finished return in
    ``completed``.
    """

    def __init__(self, env_id: str, n: int, base_seed: int = 0):
        self.env_id = env_id
        self.envs = [make_env(env_id, base_seed + i) for i in range(n)]
        self.num_actions = NUM_ACTIONS[env_id]
        self._returns = np.zeros(n)
        self.completed: list[float] = []

    def __len__(self) -> int:
        return len(self.envs)

    def reset(self) -> np.ndarray:
        self._returns[:] = 0.0
        return np.stack([e.reset() for e in self.envs])

    def step(self, actions):
        obs, rewards, dones = [], np.zeros(len(self.envs)), np.zeros(len(self.envs), dtype=bool)
        self.completed = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            o, r, d = env.step(a)
            rewards[i], dones[i] = r, d
            self._returns[i] += r
            if d:
                self.completed.append(float(self._returns[i]))
                self._returns[i] = 0.0
                o = env.reset()
            obs.append(o)
        return np.stack(obs), rewards, dones
