"""Command-line entry point: ``run``, ``compare`` and ``check``.

Config files are flat TOML tables whose keys are ExperimentConfig fields.
``--set key=value`` overrides are applied last; values are parsed as TOML
literals and fall back to plain strings.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import statistics
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

from . import __version__
from .errors import ConfigError, FedOrgpError
from .federation import ExperimentConfig, canonical_strategy, run_experiment

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

# short names accepted in config files and overrides
ALIASES = {"rho": "join_ratio", "M": "clients", "T": "rounds", "eta": "lr", "B": "batch_size",
           "K": "feature_dim", "E": "local_epochs"}


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(raw: dict) -> dict:
    known = set(ExperimentConfig.field_names())
    out = {}
    unknown = []
    for key, value in raw.items():
        name = ALIASES.get(key, key)
        if name not in known:
            unknown.append(key)
            continue
        out[name] = value
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if "model_groups" in out:
        out["model_groups"] = tuple(tuple(g) for g in out["model_groups"])
    return out


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        nested = [k for k, v in raw.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be a flat table; nested sections: {', '.join(nested)}")
    values = _coerce(raw)
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not key=value")
        values.update(_coerce({key.strip(): _parse_value(text.strip())}))
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class RunManifest:
    config: dict
    seed: int
    out_dir: str
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "seed": self.seed, "out_dir": self.out_dir,
                           "version": self.version}, indent=2, sort_keys=True) + "\n"

    @property
    def hash(self) -> str:
        # the output directory does not affect results, so it is left out
        body = json.dumps({"config": self.config, "seed": self.seed, "version": self.version},
                          sort_keys=True)
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["config"], d["seed"], d["out_dir"], d.get("version", __version__))

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(**_coerce(self.config))


def _write_outputs(cfg: ExperimentConfig, out: Path, fmt: str, dump_n: int) -> tuple[RunManifest, object]:
    """Run into a scratch directory next to ``out`` and move files over only
    once everything succeeded."""
    from .diagnostics import dump_embeddings, write_report

    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.to_dict(), cfg.seed, str(out))
    scratch = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
    try:
        report = run_experiment(cfg)
        (scratch / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
        write_report(report, scratch / f"report.{fmt}", fmt, manifest.hash)
        if dump_n:
            for state in report.world.clients:
                dump_embeddings(state, dump_n, scratch / f"embeddings_client{state.client_id}.csv",
                                report.world.published)
        out.mkdir(parents=True, exist_ok=True)
        for stale in out.glob("embeddings_client*.csv"):
            stale.unlink()
        for f in sorted(scratch.iterdir()):
            f.replace(out / f.name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return manifest, report


def cmd_run(args) -> int:
    if args.manifest:
        cfg = RunManifest.load(args.manifest).experiment_config()
    else:
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = parse_config(args.config, overrides)
    manifest, report = _write_outputs(cfg, Path(args.out), args.format, args.dump_embeddings)
    print(f"best accuracy {report.best_accuracy:.4f} at round {report.best_round}; "
          f"wrote {args.out} (manifest {manifest.hash})")
    return EXIT_OK


def comparison_table(results: dict[str, list[float]]) -> str:
    lines = [f"{'strategy':<18} {'seeds':>5}  best accuracy (mean +- stdev)"]
    for name, accs in results.items():
        sd = statistics.stdev(accs) if len(accs) > 1 else 0.0
        lines.append(f"{name:<18} {len(accs):>5}  {100 * statistics.fmean(accs):.2f} +- {100 * sd:.2f}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if len(strategies) < 2:
        raise ConfigError("strategies: compare needs at least two strategies")
    labels = [canonical_strategy(s) for s in strategies]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    base = parse_config(args.config, list(args.set or []))
    rows = {}
    for i, (raw, name) in enumerate(zip(strategies, labels)):
        key = name if name not in rows else f"{name}#{i}"
        # same seed -> same data, partition and initial models for every strategy
        rows[key] = [run_experiment(replace(base, strategy=name, seed=s), keep_world=False).best_accuracy
                     for s in seeds]
    table = comparison_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(base.to_dict(), base.seed, str(out))
        (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
        (out / "comparison.txt").write_text(f"# manifest {manifest.hash}\n{table}\n", encoding="utf-8")
    return EXIT_OK


def run_checks() -> list[tuple[str, bool, str]]:
    """Quick self-checks on fixtures with known answers."""
    import numpy as np

    from . import kernels
    from .client import batch_objective
    from .diagnostics import theorem2_lr_bound
    from .numeric import MlpSpec, finite_difference_check, init_model
    from .prototypes import GlobalPrototypeBank, OrLossConfig, or_loss_and_grads

    rng = np.random.default_rng(0)
    results = []

    eta, _ = theorem2_lr_bound(1.0, 0.5, 1.0, 1.0, 1, 1.0)
    results.append(("lr bound hand example", eta == 0.5, f"eta_max={eta!r}"))

    model = init_model(MlpSpec((6, 8, 5), 3), rng)
    x, y = rng.standard_normal((7, 6)), rng.integers(0, 3, 7)
    pub = {c: v / np.linalg.norm(v) for c, v in enumerate(rng.standard_normal((3, 5)))}
    _, _, _, g, _ = batch_objective(model, x, y, pub, 2.0)
    err = finite_difference_check(lambda: batch_objective(model, x, y, pub, 2.0, False)[0], model, g)
    results.append(("client gradient", err <= 1e-4, f"max rel err {err:.2e}"))

    bank = GlobalPrototypeBank.initialize(3, 5, rng)
    batch = [(int(c), rng.standard_normal(5)) for c in rng.integers(0, 3, 6)]
    cfg = OrLossConfig()
    _, grads, _, _ = or_loss_and_grads(batch, bank, cfg)
    err = finite_difference_check(lambda: or_loss_and_grads(batch, bank, cfg)[0], bank.params, grads)
    results.append(("server gradient", err <= 1e-4, f"max rel err {err:.2e}"))

    P = np.eye(4)
    loss, s, d, _ = kernels.or_loss_grad(P * 3.0, np.arange(4), P, 1.0, 10.0)
    results.append(("orthonormal optimum", abs(loss) <= 1e-12 and s == 1.0 and d == 0.0,
                    f"loss={loss:.1e} s={s} d={d}"))
    return results


def cmd_check(args) -> int:
    results = run_checks()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat TOML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    parser = argparse.ArgumentParser(prog="fedorgp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run one experiment")
    run.add_argument("--out", metavar="DIR", default="runs/latest")
    run.add_argument("--seed", type=int, metavar="N")
    run.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    run.add_argument("--dump-embeddings", type=int, default=0, metavar="N",
                     help="write up to N test embeddings per class for every client")
    run.add_argument("--manifest", metavar="PATH", help="re-create a run from its manifest.json")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", parents=[common], help="compare server strategies over seeds")
    cmp.add_argument("--strategies", default="orgp,weighted_average")
    cmp.add_argument("--seeds", default="0,1,2")
    cmp.add_argument("--out", metavar="DIR")
    cmp.set_defaults(func=cmd_compare)

    chk = sub.add_parser("check", help="run gradient and bound self-checks")
    chk.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "dump_embeddings", 0) < 0:
        print("error: --dump-embeddings must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedOrgpError, OSError, ArithmeticError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
