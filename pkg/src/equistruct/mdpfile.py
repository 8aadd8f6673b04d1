"""Plain-text MDP files.

Example (two mirrored states)::

    states 2
    actions 2
    gamma 0.9
    R
    1 0
    0 1
    T 0
    0.9 0.1
    0.3 0.7
    T 1
    0.7 0.3
    0.1 0.9
    group cyclic 2
    element 1
    states 1 0
    actions 0 1 0
    actions 1 1 0

``R`` is a dense states x actions block. ``T <s>`` is an actions x states
block of next-state probabilities for state ``s``. The optional ``group``
section is either ``group cyclic <n>`` or ``group table <n>`` followed by
``n`` rows of the composition table; each ``element <g>`` block gives the
state permutation and, per state, the action permutation (omitted entries
act as the identity). ``#`` starts a comment.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .group import FiniteGroup, make_cyclic_group
from .mdp import MDPGroupAction, TabularMDP

__all__ = ["MDPFileError", "parse_mdp", "read_mdp", "format_mdp", "write_mdp"]


class MDPFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _tokens(text: str):
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def parse_mdp(text: str) -> tuple[TabularMDP, MDPGroupAction | None]:
    lines = list(_tokens(text))
    pos = 0
    header: dict[str, str] = {}
    R = None
    T_rows: dict[int, np.ndarray] = {}
    group = None
    elements: dict[int, dict] = {}

    def take_rows(count: int, width: int, start_no: int) -> np.ndarray:
        nonlocal pos
        rows = []
        for _ in range(count):
            if pos >= len(lines):
                raise MDPFileError("unexpected end of file inside a block", start_no)
            no, toks = lines[pos]
            if len(toks) != width:
                raise MDPFileError(f"expected {width} numbers, got {len(toks)}", no)
            try:
                rows.append([float(t) for t in toks])
            except ValueError as err:
                raise MDPFileError(str(err), no) from None
            pos += 1
        return np.array(rows)

    def need(key: str, no: int) -> int:
        if key not in header:
            raise MDPFileError(f"'{key}' must be declared before this block", no)
        return int(header[key])

    current: dict | None = None
    while pos < len(lines):
        no, toks = lines[pos]
        key = toks[0]
        pos += 1
        try:
            if key in ("states", "actions") and current is None:
                header[key] = toks[1]
            elif key == "gamma":
                header["gamma"] = toks[1]
            elif key == "R":
                R = take_rows(need("states", no), need("actions", no), no)
            elif key == "T":
                s = int(toks[1])
                T_rows[s] = take_rows(need("actions", no), need("states", no), no)
            elif key == "group":
                kind, n = toks[1], int(toks[2])
                if kind == "cyclic":
                    group = make_cyclic_group(n)
                elif kind == "table":
                    group = FiniteGroup(take_rows(n, n, no).astype(int))
                else:
                    raise MDPFileError(f"unknown group kind {kind!r}", no)
            elif key == "element":
                if group is None:
                    raise MDPFileError("'element' before 'group'", no)
                current = elements.setdefault(int(toks[1]), {"states": None, "actions": {}})
            elif key == "states" and current is not None:
                current["states"] = [int(t) for t in toks[1:]]
            elif key == "actions" and current is not None:
                current["actions"][int(toks[1])] = [int(t) for t in toks[2:]]
            else:
                raise MDPFileError(f"unexpected keyword {key!r}", no)
        except (IndexError, ValueError) as err:
            if isinstance(err, MDPFileError):
                raise
            raise MDPFileError(f"malformed '{key}' line: {err}", no) from None

    for key in ("states", "actions", "gamma"):
        if key not in header:
            raise MDPFileError(f"missing '{key}' declaration")
    S, A = int(header["states"]), int(header["actions"])
    if R is None:
        raise MDPFileError("missing R block")
    missing = sorted(set(range(S)) - set(T_rows))
    if missing:
        raise MDPFileError(f"missing T blocks for states {missing}")
    T = np.stack([T_rows[s] for s in range(S)])
    mdp = TabularMDP(R, T, float(header["gamma"]))

    if group is None:
        return mdp, None
    sm = np.tile(np.arange(S), (group.order, 1))
    am = np.tile(np.arange(A), (group.order, S, 1))
    for g, spec in elements.items():
        if not 0 <= g < group.order:
            raise MDPFileError(f"element {g} outside group of order {group.order}")
        if spec["states"] is not None:
            sm[g] = spec["states"]
        for s, perm in spec["actions"].items():
            am[g, s] = perm
    return mdp, MDPGroupAction(group, sm, am)


def read_mdp(path: str | Path) -> tuple[TabularMDP, MDPGroupAction | None]:
    return parse_mdp(Path(path).read_text())


def format_mdp(mdp: TabularMDP, action: MDPGroupAction | None = None) -> str:
    def row(values) -> str:
        return " ".join(repr(float(v)) for v in values)

    out = [f"states {mdp.n_states}", f"actions {mdp.n_actions}", f"gamma {mdp.gamma!r}", "R"]
    out += [row(r) for r in mdp.R]
    for s in range(mdp.n_states):
        out.append(f"T {s}")
        out += [row(r) for r in mdp.T[s]]
    if action is not None:
        out.append(f"group table {action.group.order}")
        out += [" ".join(map(str, r)) for r in action.group.compose]
        for g in range(action.group.order):
            if g == action.group.identity:
                continue
            out.append(f"element {g}")
            out.append("states " + " ".join(map(str, action.state_map[g])))
            for s in range(action.n_states):
                out.append(f"actions {s} " + " ".join(map(str, action.action_map[g, s])))
    return "\n".join(out) + "\n"


def write_mdp(path: str | Path, mdp: TabularMDP, action: MDPGroupAction | None = None) -> None:
    Path(path).write_text(format_mdp(mdp, action))
