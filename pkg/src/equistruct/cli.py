"""``equistruct`` command line: basis inspection, property checks, tabular reduction, training."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("equistruct")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("EQUISTRUCT_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"EQUISTRUCT_SEED must be an integer, got {raw!r}") from None


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    tool_version: str = __version__
    outputs: dict = field(default_factory=dict)
    argv: list = field(default_factory=list)
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# basis

def _parse_shape(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise UsageError(f"shape must look like OUTxIN, e.g. 3x3 (got {text!r})") from None


def _load_pair_file(path: str):
    """JSON: ``{"compose": [[...]], "rep_in": [matrices], "rep_out": [matrices], "bias": bool}``."""
    from .group import FiniteGroup, RepresentationPair, matrix_representation
    from .symmetrizer import WeightShape

    spec = json.loads(Path(path).read_text())
    try:
        group = FiniteGroup(spec["compose"])
        rin = matrix_representation(group, spec["rep_in"], name="in")
        rout = matrix_representation(group, spec["rep_out"], name="out")
    except KeyError as err:
        raise UsageError(f"pair file {path} lacks key {err}") from None
    return RepresentationPair(rin, rout, name=Path(path).stem), WeightShape(rout.dim, rin.dim, bias=bool(spec.get("bias", True)))


def _resolve_pair(args):
    from .group import RepresentationPair, make_cyclic_group, regular_representation, trivial_representation
    from .nn import _layer_pair
    from .symmetrizer import WeightShape

    if args.pair_file:
        return _load_pair_file(args.pair_file)
    if args.env:
        if not args.layer:
            raise UsageError("--env needs --layer")
        try:
            return _layer_pair(args.env, args.layer)
        except ValueError as err:
            raise UsageError(str(err)) from None
    if args.group:
        g = args.group.lower()
        if g == "trivial":
            if not args.shape:
                raise UsageError("--group trivial needs --shape OUTxIN")
            d_out, d_in = _parse_shape(args.shape)
            grp = make_cyclic_group(1)
            pair = RepresentationPair(trivial_representation(grp, d_in), trivial_representation(grp, d_out), name="trivial")
            return pair, WeightShape(d_out, d_in, bias=args.bias)
        if g.startswith("c") and g[1:].isdigit():
            grp = make_cyclic_group(int(g[1:]))
            reg = regular_representation(grp)
            return RepresentationPair(reg, reg, name=g), WeightShape(reg.dim, reg.dim, bias=args.bias)
        raise UsageError(f"unknown group {args.group!r}; use 'trivial' or cN (regular to regular)")
    raise UsageError("name a pair with --env/--layer, --group, or --pair-file")


def format_basis(basis) -> str:
    """Each basis element as text grids; spatial filters are printed per (out, in) block."""
    lines = []
    shape = basis.shape
    for i, v in enumerate(basis.vectors):
        lines.append(f"V[{i}]")
        if shape.spatial:
            filt = basis.as_filters()[i]
            for o in range(shape.d_out):
                for c in range(shape.d_in):
                    lines.append(f"  out {o} in {c}")
                    lines += ["    " + " ".join(f"{x:+.3f}" for x in row) for row in filt[o, c]]
            if shape.bias:
                lines.append("  bias " + " ".join(f"{x:+.3f}" for x in v[:, -1]))
        else:
            lines += ["  " + " ".join(f"{x:+.3f}" for x in row) for row in v]
    return "\n".join(lines)


def cmd_basis(args) -> int:
    from .symmetrizer import build_basis, equivariance_residual, orthonormality_residual

    pair, shape = _resolve_pair(args)
    basis = build_basis(pair, shape, variant=args.variant, seed=args.seed)
    eq_res = max((equivariance_residual(v, basis.pair) for v in basis.vectors), default=0.0)
    print(f"pair            {pair.name or '-'}")
    print(f"group order     {pair.group.order}")
    print(f"weight shape    {shape.d_out} x {shape.d_in_augmented}"
          + (f" (spatial {shape.spatial[0]}x{shape.spatial[1]})" if shape.spatial else "")
          + (" incl. bias" if shape.bias else ""))
    print(f"dim(W_total)    {shape.size}")
    print(f"variant         {args.variant}")
    print(f"rank            {basis.rank}")
    print(f"equivariance    {eq_res:.3e}")
    print(f"orthonormality  {orthonormality_residual(basis.vectors):.3e}")
    print(f"fingerprint     {basis.fingerprint()}")
    if args.dump is not None:
        text = format_basis(basis)
        if args.dump == "-":
            print(text)
        else:
            Path(args.dump).write_text(text + "\n")
            print(f"basis written to {args.dump}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify

def cmd_verify(args) -> int:
    from .verify import format_results, run_suite

    suite = "symmetrizer" if args.suite == "basis" else args.suite
    results, elapsed = run_suite(suite)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} properties passed in {elapsed:.1f}s")
    for r in failed:
        print(f"FAILED: [{r.suite}] {r.name} (residual {r.residual:.3e} > {r.tol:.1e})", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_FAIL


# --------------------------------------------------------------------------
# reduce

def cmd_reduce(args) -> int:
    from .mdp import (MDPSymmetryError, ReductionError, build_homomorphism,
                      check_optimal_value_equivalence, reduce_mdp)
    from .mdpfile import MDPFileError, read_mdp, write_mdp

    try:
        mdp, action = read_mdp(args.file)
    except (OSError, MDPFileError) as err:
        print(f"error: cannot read {args.file}: {err}", file=sys.stderr)
        return EXIT_USAGE
    if action is None:
        print(f"error: {args.file} has no group section; nothing to reduce", file=sys.stderr)
        return EXIT_USAGE
    try:
        hom = build_homomorphism(mdp, action, tol=args.tol)
        reduced = reduce_mdp(mdp, hom, tol=args.tol)
    except MDPSymmetryError as err:
        s, a, g = err.report.witness
        print(f"error: the group is not a symmetry of this MDP: {err}", file=sys.stderr)
        print(f"witness: state {s}, action {a}, element {g}", file=sys.stderr)
        return EXIT_FAIL
    except ReductionError as err:
        print(f"error: {err}; witness {err.witness}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.output) if args.output else Path(args.file).with_suffix(".reduced.mdp")
    write_mdp(out, reduced)
    report = check_optimal_value_equivalence(mdp, hom)
    print(f"states          {mdp.n_states} -> {report.n_abstract_states}")
    print(f"actions         {mdp.n_actions} -> {report.n_abstract_actions}")
    print(f"sigma           {' '.join(map(str, hom.sigma))}")
    print(f"reduction gap   {report.reduction_gap:.3e}")
    print(f"value gap       {report.value_gap:.3e}")
    print(f"q gap           {report.q_gap:.3e}")
    print(f"lifted policy   {report.lifted_policy_gap:.3e}")
    print(f"reduced MDP written to {out}")
    return EXIT_OK if report.ok else EXIT_FAIL


# --------------------------------------------------------------------------
# train

TRAIN_FLAG_KEYS = ("env", "variant", "augment", "lr", "total_steps", "eval_interval",
                   "eval_episodes", "n_envs", "horizon", "clip_eps")


FLOAT_KEYS = {"lr", "gamma", "entropy_coef", "value_coef", "clip_eps", "max_grad_norm", "width_divisor"}


def _coerce(key: str, raw: str, default):
    if raw.lower() in ("none", "null", ""):
        return None
    if key in FLOAT_KEYS:
        return float(raw)
    if isinstance(default, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` comments; unknown keys are a usage error."""
    from .rl import TrainConfig

    valid = {f: getattr(TrainConfig(), f) for f in TrainConfig.keys()}
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in valid:
            raise UsageError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(valid))}")
        try:
            out[key] = _coerce(key, value, valid[key])
        except ValueError:
            raise UsageError(f"config line {no}: bad value {value!r} for {key}") from None
    return out


def build_train_config(args) -> dict:
    values: dict = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as err:
            raise UsageError(f"cannot read config file: {err}") from None
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        values.update(parse_config_text(item))
    for key in TRAIN_FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if "seed" not in values:
        values["seed"] = args.seed if args.seed is not None else default_seed()
    return values


def cmd_train(args) -> int:
    from .rl import LR_GRIDS, TrainConfig, best_lr, train

    values = build_train_config(args)
    try:
        base = TrainConfig(**values)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid training configuration: {err}") from None
    seeds = [base.seed + i for i in range(args.seeds)]
    lrs = list(LR_GRIDS[base.env]) if args.sweep_lr else [base.lr]
    out = Path(args.out)
    manifest_path = Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json")
    if out.exists() and not args.append:
        out.unlink()
    manifest = RunManifest(
        command="train", config=base.to_dict(), seed=base.seed,
        outputs={"csv": str(out), "manifest": str(manifest_path)}, argv=sys.argv[1:],
    )
    manifest.config.update(seeds=seeds, learning_rates=lrs, arch=base.arch)
    manifest.write(manifest_path)

    results: dict[float, list] = {}
    for lr in lrs:
        for seed in seeds:
            cfg = replace(base, lr=lr, seed=seed)
            start = time.perf_counter()
            curve = train(cfg, out, check_equivariance=args.check_equivariance,
                          log=lambda r: log.info("lr=%g seed=%d steps=%d median=%.1f",
                                                 r["lr"], r["seed"], r["env_steps"], r["return_p50"]))
            results.setdefault(lr, []).append(curve)
            last = curve[-1]
            extra = (f"  equivariance {max(r['equivariance_residual'] for r in curve):.1e}"
                     if args.check_equivariance else "")
            print(f"variant={cfg.variant} lr={lr:g} seed={seed} steps={last['env_steps']} "
                  f"final median return {last['return_p50']:.1f} "
                  f"({time.perf_counter() - start:.1f}s){extra}")
    if len(lrs) > 1:
        best = best_lr(results)
        for lr in lrs:
            med = float(np.median([c[-1]["return_p50"] for c in results[lr]]))
            print(f"lr {lr:<8g} final median {med:8.2f}{'  <- best' if lr == best else ''}")
    print(f"curves written to {out}; manifest {manifest_path}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .rl import AUGMENT_MODES, VARIANT_CHOICES
    from .symmetrizer import VARIANTS

    p = argparse.ArgumentParser(prog="equistruct", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("basis", help="build and inspect a weight basis")
    b.add_argument("--env", choices=("cartpole", "gridworld"))
    b.add_argument("--layer", help="cartpole: first|hidden|policy|value; gridworld: conv1|conv2|hidden|policy|value")
    b.add_argument("--group", help="'trivial' (needs --shape) or cN for a regular-to-regular pair")
    b.add_argument("--shape", help="OUTxIN for --group trivial")
    b.add_argument("--bias", action="store_true", help="append the bias column for --group pairs")
    b.add_argument("--pair-file", help="JSON file with compose, rep_in, rep_out (and optional bias)")
    b.add_argument("--variant", choices=VARIANTS, default="equivariant")
    b.add_argument("--seed", type=int, default=0, help="sampling seed for the basis construction")
    b.add_argument("--dump", nargs="?", const="-", default=None, metavar="FILE",
                   help="print every basis element (or write them to FILE)")
    b.set_defaults(func=cmd_basis)

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("suite", choices=("symmetrizer", "basis", "layers", "network", "mdp", "envs", "all"))
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("reduce", help="reduce a tabular MDP by its symmetry group")
    r.add_argument("file")
    r.add_argument("-o", "--output", help="reduced MDP path (default: <file>.reduced.mdp)")
    r.add_argument("--tol", type=float, default=1e-10)
    r.set_defaults(func=cmd_reduce)

    t = sub.add_parser("train", help="train actor-critic agents and write learning curves")
    t.add_argument("--config", help="file of 'key = value' lines")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--env", choices=("cartpole", "gridworld"))
    t.add_argument("--variant", choices=VARIANT_CHOICES)
    t.add_argument("--augment", choices=AUGMENT_MODES)
    t.add_argument("--lr", type=float)
    t.add_argument("--total-steps", type=int)
    t.add_argument("--eval-interval", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--n-envs", type=int)
    t.add_argument("--horizon", type=int)
    t.add_argument("--clip-eps", type=float)
    t.add_argument("--seed", type=int, help="first seed (default: $EQUISTRUCT_SEED or 0)")
    t.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    t.add_argument("--sweep-lr", action="store_true", help="train over the environment's learning-rate grid")
    t.add_argument("--check-equivariance", action="store_true",
                   help="record the network equivariance residual at every evaluation")
    t.add_argument("--out", default="curves.csv")
    t.add_argument("--append", action="store_true", help="append to an existing CSV")
    t.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    t.set_defaults(func=cmd_train)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
