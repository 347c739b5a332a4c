"""Command-line entry point.

Subcommands map onto the pipeline phases and exchange plain files in one
output directory, so any phase can be rerun on its own::

    cpr synth     --config run.ini --out runs/a
    cpr collect   --out runs/a          # beta_prior.tsv, pairs.jsonl
    cpr train     --out runs/a          # params.txt, train_log.csv
    cpr retrieve  --out runs/a --split calibration
    cpr retrieve  --out runs/a --split test
    cpr calibrate --out runs/a          # calibration.csv, thresholds.json
    cpr evaluate  --out runs/a          # predictions.jsonl, report.*
    cpr e2e       --config run.ini --out runs/a

Exit codes: 0 success, 2 missing file, 3 configuration error, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path as FsPath

from .conformal import (
    CalibrationError,
    calibrate,
    load_calibration_table,
    nonconformity,
    save_calibration_table,
    save_thresholds,
)
from .embed import FileEmbedder, HashEmbedder
from .evaluation import DEFAULT_ALPHAS, config_hash, emit_report, run_alpha_grid
from .hints import StaticHints, generate_hints, write_hint_cache
from .kg import ConfigError, read_graph, read_queries, write_queries
from .pipeline import make_hint_provider, three_way_split
from .puct import BetaPrior, PairCaps, RolloutConfig, load_pair_sets, run_collection, save_pair_sets
from .rcvnet import (
    ParamFileError,
    PathScorer,
    TrainConfig,
    build_pair_data,
    load_params,
    save_params,
    train,
    write_train_log,
)
from .synth import SynthConfig, generate, verify, write_dataset
from .treeg import TreeGConfig, load_pools, retrieve_all, save_pools

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("cpr")

DEFAULT_FILES = {
    "graph": "graph.tsv",
    "train": "train.jsonl",
    "calibration": "calibration.jsonl",
    "test": "test.jsonl",
    "prior": "beta_prior.tsv",
    "pairs": "pairs.jsonl",
    "params": "params.txt",
}


@dataclass
class RunConfig:
    seed: int = 0
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    workers: int = 1
    out: str = "cpr-run"
    files: dict = field(default_factory=dict)
    hints: str = "lexical"
    treeg: TreeGConfig = field(default_factory=TreeGConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    caps: PairCaps = field(default_factory=PairCaps)
    width: int = 256
    embed_dim: int = 64
    embed_seed: int = 0
    embed_file: str = ""
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_cal: int = 0
    n_test: int = 0
    cal_fraction: float = 0.1
    pos_cap_note: str = ""

    def path(self, key: str) -> FsPath:
        return FsPath(self.files.get(key) or FsPath(self.out) / DEFAULT_FILES[key])

    def out_path(self, name: str) -> FsPath:
        return FsPath(self.out) / name


def _coerce(target_type, raw: str):
    if target_type is bool:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {target_type.__name__}") from None


def _fill(obj, section: configparser.SectionProxy, skip=()):
    types = {f.name: type(getattr(obj, f.name)) for f in fields(obj)}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in section [{section.name}]")
        setattr(obj, key, _coerce(types[key], raw))
    if hasattr(obj, "__post_init__"):
        obj.__post_init__()


def parse_alphas(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(a) for a in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad alpha list {text!r}") from None
    if not vals or any(not 0 < a < 1 for a in vals):
        raise ConfigError("every alpha must lie in (0, 1)")
    return vals


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    p = FsPath(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    cp = configparser.ConfigParser()
    try:
        cp.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    for name in cp.sections():
        sec = cp[name]
        if name == "run":
            for key, raw in sec.items():
                if key == "alphas":
                    cfg.alphas = parse_alphas(raw)
                elif key in ("seed", "workers", "n_cal", "n_test", "width"):
                    setattr(cfg, key, _coerce(int, raw))
                elif key == "cal_fraction":
                    cfg.cal_fraction = _coerce(float, raw)
                elif key in ("out", "hints"):
                    setattr(cfg, key, raw.strip())
                else:
                    raise ConfigError(f"unknown key {key!r} in section [run]")
        elif name == "files":
            for key, raw in sec.items():
                if key not in DEFAULT_FILES:
                    raise ConfigError(f"unknown file key {key!r}")
                cfg.files[key] = raw.strip()
        elif name == "embed":
            for key, raw in sec.items():
                if key == "dim":
                    cfg.embed_dim = _coerce(int, raw)
                elif key == "seed":
                    cfg.embed_seed = _coerce(int, raw)
                elif key == "file":
                    cfg.embed_file = raw.strip()
                else:
                    raise ConfigError(f"unknown key {key!r} in section [embed]")
        elif name == "treeg":
            _fill(cfg.treeg, sec)
        elif name == "rollout":
            _fill(cfg.rollout, sec)
        elif name == "train":
            _fill(cfg.train, sec)
        elif name == "pairs":
            _fill(cfg.caps, sec)
        elif name == "synth":
            _fill(cfg.synth, sec)
        else:
            raise ConfigError(f"unknown config section [{name}]")
    return cfg


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.alpha:
        cfg.alphas = parse_alphas(",".join(args.alpha))
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = args.out
    t = cfg.treeg
    if args.branch_out is not None:
        t.branch_out = args.branch_out
    if args.active_set is not None:
        t.active_set = args.active_set
    if args.max_hop is not None:
        t.max_hop = args.max_hop
        cfg.rollout.max_hop = args.max_hop
    if args.hint_weight is not None:
        t.hint_weight = args.hint_weight
    t.__post_init__()
    cfg.rollout.__post_init__()
    cfg.train.seed = cfg.seed
    return cfg


# -- phases ------------------------------------------------------------------


def _require(path: FsPath) -> FsPath:
    if not path.exists():
        raise FileNotFoundError(f"required file not found: {path}")
    return path


def _provider(cfg: RunConfig):
    base = HashEmbedder(cfg.embed_dim, cfg.embed_seed)
    if cfg.embed_file:
        return FileEmbedder(_require(FsPath(cfg.embed_file)), fallback=base)
    return base


def _graph(cfg):
    return read_graph(_require(cfg.path("graph")))


def _queries(cfg, g, key):
    return read_queries(g, _require(cfg.path(key)))


def cmd_synth(cfg: RunConfig):
    sc = cfg.synth
    sc.seed = cfg.seed
    ds = generate(sc)
    out = FsPath(cfg.out)
    write_dataset(ds, out)
    n = len(ds.queries)
    n_test = cfg.n_test or max(1, n // 4)
    n_cal = cfg.n_cal or max(1, round(cfg.cal_fraction * (n - n_test)))
    split = three_way_split(ds.queries, n_cal, n_test, cfg.seed)
    g = ds.graph
    write_queries(g, split.train, out / "train.jsonl")
    write_queries(g, split.calibration, out / "calibration.jsonl")
    write_queries(g, split.test, out / "test.jsonl")
    rep = verify(ds)
    (out / "verify.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    if not rep.passed:
        raise RuntimeError(f"generated dataset failed verification: {rep}")
    log.info("synth: %d triples, %d queries -> %s", len(g), n, out)


def cmd_collect(cfg: RunConfig):
    g = _graph(cfg)
    train_q = _queries(cfg, g, "train")
    if not train_q:
        log.warning("empty training set; writing an all-(1,1) prior and no pairs")
    res = run_collection(g, train_q, _provider(cfg), cfg.rollout, cfg.seed, cfg.caps, cfg.workers)
    FsPath(cfg.out).mkdir(parents=True, exist_ok=True)
    res.prior.save(cfg.out_path(DEFAULT_FILES["prior"]), g)
    save_pair_sets(cfg.out_path(DEFAULT_FILES["pairs"]), g, res.pair_sets)
    skipped = sum(ps.skipped for ps in res.pair_sets)
    summary = {"queries": len(train_q), "skipped": skipped, "rollouts": res.n_rollouts,
               "successes": res.n_success, "positive_cap": cfg.caps.positives,
               "neg_per_pos": cfg.caps.neg_per_pos}
    cfg.out_path("collect.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig):
    g = _graph(cfg)
    train_q = _queries(cfg, g, "train")
    prior = BetaPrior.load(_require(cfg.path("prior")), g)
    pairs = load_pair_sets(_require(cfg.path("pairs")), g)
    provider = _provider(cfg)
    data = build_pair_data(PathScorer(g, provider, prior), {q.id: q.question for q in train_q}, pairs)
    tcfg = TrainConfig(cfg.train.learning_rate, cfg.train.batch_size, cfg.train.epochs, cfg.seed)
    params, tlog = train(data, provider.dim, cfg.width, tcfg)
    FsPath(cfg.out).mkdir(parents=True, exist_ok=True)
    save_params(params, cfg.out_path(DEFAULT_FILES["params"]))
    write_train_log(cfg.out_path("train_log.csv"), tlog)


def _scorer(cfg, g):
    provider = _provider(cfg)
    prior_path, params_path = cfg.path("prior"), cfg.path("params")
    prior = BetaPrior.load(_require(prior_path), g)
    params = load_params(_require(params_path), expect_d=provider.dim)
    return PathScorer(g, provider, prior, params)


def _hints_for(cfg, g, queries, split_name):
    kind = cfg.hints
    if kind.startswith("cache:"):
        hp = StaticHints.from_file(_require(FsPath(kind[6:])), {q.id: q.question for q in queries})
    else:
        hp = make_hint_provider(kind, g)
    table = {q.id: generate_hints(hp, q.question, cfg.treeg.max_hop) for q in queries}
    write_hint_cache(cfg.out_path(f"hints_{split_name}.jsonl"),
                     [(qid, [[h] for h in sorted(table[qid])]) for qid in sorted(table)])
    return lambda q: table[q.id]


def cmd_retrieve(cfg: RunConfig, split_name: str):
    g = _graph(cfg)
    queries = _queries(cfg, g, split_name)
    scorer = _scorer(cfg, g)
    FsPath(cfg.out).mkdir(parents=True, exist_ok=True)
    hints_for = _hints_for(cfg, g, queries, split_name)
    pools = retrieve_all(g, queries, scorer, hints_for, cfg.treeg, cfg.workers)
    save_pools(cfg.out_path(f"pools_{split_name}.jsonl"), g, pools)


def _pools(cfg, g, split_name):
    return load_pools(_require(cfg.out_path(f"pools_{split_name}.jsonl")), g)


def cmd_calibrate(cfg: RunConfig):
    g = _graph(cfg)
    queries = _queries(cfg, g, "calibration")
    if not queries:
        raise CalibrationError(f"calibration set {cfg.path('calibration')} is empty")
    pools = _pools(cfg, g, "calibration")
    missing = [q.id for q in queries if q.id not in pools]
    if missing:
        raise CalibrationError(f"no retrieval pool for calibration queries {missing[:5]}")
    scores = [nonconformity(pools[q.id], q.answers, q.id) for q in sorted(queries, key=lambda q: q.id)]
    save_calibration_table(cfg.out_path("calibration.csv"), scores)
    save_thresholds(cfg.out_path("thresholds.json"), [calibrate(scores, a) for a in cfg.alphas])


def cmd_evaluate(cfg: RunConfig):
    g = _graph(cfg)
    queries = _queries(cfg, g, "test")
    pools = _pools(cfg, g, "test")
    scores = load_calibration_table(_require(cfg.out_path("calibration.csv")))
    if not scores:
        raise CalibrationError("calibration table is empty")
    answers = {q.id: q.answers for q in queries}
    pools = {qid: pools[qid] for qid in answers}
    grid = run_alpha_grid(scores, pools, answers, cfg.alphas)
    with open(cfg.out_path("predictions.jsonl"), "w", encoding="utf-8") as fh:
        for alpha in cfg.alphas:
            for res in grid.predictions[alpha]:
                rec = {
                    "alpha": alpha,
                    "query_id": res.query_id,
                    "paths": [sp.path.to_labels(g) for sp in res.paths],
                    "scores": [sp.v_prime for sp in res.paths],
                    "answers": [g.entities.label(e) for e in res.answers],
                    "covered": res.covered,
                }
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    manifest = {"seed": cfg.seed, "config_hash": config_hash(_cfg_dict(cfg)), "n_cal": len(scores),
                "alphas": list(cfg.alphas), "positive_cap": cfg.caps.positives}
    emit_report(grid.rows, cfg.out, manifest)
    print((FsPath(cfg.out) / "report.txt").read_text(), end="")


def _cfg_dict(cfg):
    d = asdict(cfg)
    d.pop("out", None)
    d.pop("workers", None)
    return d


def cmd_e2e(cfg: RunConfig):
    if "graph" not in cfg.files:
        cmd_synth(cfg)
    cmd_collect(cfg)
    cmd_train(cfg)
    cmd_retrieve(cfg, "calibration")
    cmd_retrieve(cfg, "test")
    cmd_calibrate(cfg)
    cmd_evaluate(cfg)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--alpha", action="append", help="risk level(s); repeat or comma-separate")
    common.add_argument("--branch-out", type=int)
    common.add_argument("--active-set", type=int)
    common.add_argument("--max-hop", type=int)
    common.add_argument("--hint-weight", type=float)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cpr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "generate a synthetic benchmark and its splits"),
        ("collect", "PUCT exploration: relation prior and training pairs"),
        ("train", "train the value network on collected pairs"),
        ("retrieve", "retrieve scored path pools for a query split"),
        ("calibrate", "score calibration queries and compute thresholds"),
        ("evaluate", "predict on test pools and write the metrics report"),
        ("e2e", "run every phase in order"),
    ]:
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "retrieve":
            sp.add_argument("--split", choices=("calibration", "test"), required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "retrieve":
            cmd_retrieve(cfg, args.split)
        else:
            {"synth": cmd_synth, "collect": cmd_collect, "train": cmd_train, "calibrate": cmd_calibrate,
             "evaluate": cmd_evaluate, "e2e": cmd_e2e}[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"cpr: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, CalibrationError, ParamFileError) as exc:
        print(f"cpr: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"cpr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
