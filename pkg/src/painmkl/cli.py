"""Command-line pipeline: ``painmkl {synth,features,cluster,train,evaluate,report}``.

Settings come from an INI file (``--config``) with the sections and keys of
:data:`DEFAULTS`; any key can be overridden with ``--set section.key=value``.
Lists are comma separated. ``none`` disables optional steps.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, __version__
from .bspline import LambdaPolicy
from .cluster import TaskAssignment, adjusted_rand_index, assign_tasks, build_similarity
from .evaluation import ExperimentConfig, format_table, make_folds, run_experiment, train_fold
from .features import FEATURE_SETS, featurize, session_descriptors, write_feature_csv
from .figures import bar_svg, heatmap_svg
from .ingest import atomic_write_text, extract_windows, load_session, preprocess_session
from .kernels import GAMMA_POLICIES
from .mtmkl import REGULARIZERS, STEP_RULES
from .synth import default_profiles, generate_cohort, with_noise, write_cohort

logger = logging.getLogger("painmkl")

DEFAULTS = {
    "data": {"sessions_dir": "sessions", "output_dir": "out"},
    "synth": {"seed": "0", "n_sessions": "38", "n_profiles": "3", "noise_sd": "0.5", "amplitude": "1.0"},
    "preprocess": {"lowpass_cutoff_hz": "0.5", "lowpass_order": "3", "detrend_degree": "3"},
    "windows": {"window_len_s": "20", "n_baseline": "6", "seed": "0"},
    "features": {"feature_set": "spline", "lambda": "gcv"},
    "cluster": {
        "T": "3", "gamma": "0.1", "seed": "0", "n_restarts": "10",
        "descriptor_filter": "positive", "normalization": "l1", "holdout_fold": "none",
    },
    "experiment": {
        "feature_sets": "spline", "T_values": "1,2,3", "kernels": "rbf", "regularizers": "l1",
        "C_grid": "1e-4,1e-3,1e-2,1e-1,1,10,100,1000", "nu_grid": "1e-4,1e-3,1e-2,1e-1,1,10,100,1000",
        "outer_folds": "10", "inner_folds": "5", "seed": "0", "gamma_policy": "median",
        "cv_mode": "window", "step_size": "0.01", "step_rule": "scaled", "max_iter": "200", "tol": "1e-4",
    },
    "figures": {"region_size": "8"},
}


class ConfigError(ValueError):
    pass


def _list(text, cast=str):
    return tuple(cast(v.strip()) for v in text.split(",") if v.strip())


def _optional(text, cast):
    return None if text.strip().lower() == "none" else cast(text)


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated settings plus the canonical text they were parsed from."""

    raw: dict

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    @property
    def sessions_dir(self) -> Path:
        return Path(self.get("data", "sessions_dir"))

    @property
    def output_dir(self) -> Path:
        return Path(self.get("data", "output_dir"))

    @property
    def digest(self) -> str:
        """Hash of every analysis setting; data locations are excluded."""
        body = {s: v for s, v in self.raw.items() if s != "data"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def header(self) -> str:
        return f"painmkl {__version__} format {FORMAT_VERSION} config {self.digest}"

    def lowpass(self):
        cutoff = _optional(self.get("preprocess", "lowpass_cutoff_hz"), float)
        return None if cutoff is None else (cutoff, int(self.get("preprocess", "lowpass_order")))

    def detrend_degree(self):
        return _optional(self.get("preprocess", "detrend_degree"), int)

    def lambda_policy(self) -> LambdaPolicy:
        text = self.get("features", "lambda").strip().lower()
        return LambdaPolicy(fixed=None if text == "gcv" else float(text))

    def experiment(self) -> ExperimentConfig:
        e = self.raw["experiment"]
        c = self.raw["cluster"]
        return ExperimentConfig(
            feature_sets=_list(e["feature_sets"]),
            T_values=_list(e["T_values"], int),
            kernels=_list(e["kernels"]),
            regularizers=_list(e["regularizers"]),
            C_grid=_list(e["C_grid"], float),
            nu_grid=_list(e["nu_grid"], float),
            outer_folds=int(e["outer_folds"]),
            inner_folds=int(e["inner_folds"]),
            seed=int(e["seed"]),
            gamma_policy=e["gamma_policy"],
            cluster_gamma=float(c["gamma"]),
            n_restarts=int(c["n_restarts"]),
            descriptor_filter=c["descriptor_filter"],
            descriptor_normalization=c["normalization"],
            cv_mode=e["cv_mode"],
            step_size=float(e["step_size"]),
            step_rule=e["step_rule"],
            max_iter=int(e["max_iter"]),
            tol=float(e["tol"]),
            lambda_fixed=self.lambda_policy().fixed,
        )


def load_config(path=None, overrides=()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    parser.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        parser.read(path)
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not (sep and dot):
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in DEFAULTS or option not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting {key.strip()!r}")
        parser[section][option] = value.strip()
    for section in parser.sections():
        unknown = set(parser[section]) - set(DEFAULTS.get(section, {}))
        if section not in DEFAULTS or unknown:
            raise ConfigError(f"unknown setting(s) in [{section}]: {sorted(unknown) or 'section'}")
    cfg = RunConfig({s: dict(parser[s]) for s in DEFAULTS})
    _validate_values(cfg)
    return cfg


def _validate_values(cfg: RunConfig):
    try:
        if int(cfg.get("synth", "n_profiles")) < 1:
            raise ConfigError("synth.n_profiles must be at least 1")
        if int(cfg.get("synth", "n_profiles")) > len(default_profiles()):
            raise ConfigError(f"synth.n_profiles must be at most {len(default_profiles())}")
        if int(cfg.get("synth", "n_sessions")) < int(cfg.get("synth", "n_profiles")):
            raise ConfigError("synth.n_sessions must be at least synth.n_profiles")
        if float(cfg.get("windows", "window_len_s")) <= 0:
            raise ConfigError("windows.window_len_s must be positive")
        if cfg.get("features", "feature_set") not in FEATURE_SETS:
            raise ConfigError(f"features.feature_set must be one of {FEATURE_SETS}")
        if int(cfg.get("cluster", "T")) < 1:
            raise ConfigError("cluster.T must be at least 1")
        cfg.lowpass(), cfg.detrend_degree(), cfg.lambda_policy()
        int(cfg.get("figures", "region_size"))
        exp = cfg.experiment()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid setting: {exc}") from None
    if not exp.T_values or min(exp.T_values) < 1:
        raise ConfigError("experiment.T_values must be a nonempty list of integers >= 1")
    for name, allowed in (("feature_sets", FEATURE_SETS), ("kernels", ("linear", "rbf")),
                          ("regularizers", REGULARIZERS)):
        values = getattr(exp, name)
        if not values or any(v not in allowed for v in values):
            raise ConfigError(f"experiment.{name} entries must be among {allowed}")
    if not exp.C_grid or not exp.nu_grid or min(exp.C_grid) <= 0 or min(exp.nu_grid) < 0:
        raise ConfigError("experiment grids must be nonempty, C > 0 and nu >= 0")
    if exp.step_rule not in STEP_RULES:
        raise ConfigError(f"experiment.step_rule must be one of {STEP_RULES}")
    if exp.gamma_policy not in GAMMA_POLICIES:
        try:
            if float(exp.gamma_policy) <= 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"experiment.gamma_policy must be positive or one of {GAMMA_POLICIES}") from None
    if exp.descriptor_filter not in ("positive", "all"):
        raise ConfigError("cluster.descriptor_filter must be 'positive' or 'all'")
    if exp.descriptor_normalization not in ("l1", "sum", "none"):
        raise ConfigError("cluster.normalization must be 'l1', 'sum' or 'none'")
    if exp.cv_mode not in ("window", "session"):
        raise ConfigError("experiment.cv_mode must be 'window' or 'session'")
    if exp.outer_folds < 2 or exp.inner_folds < 2:
        raise ConfigError("fold counts must be at least 2")


def _require_sessions(cfg: RunConfig) -> list[Path]:
    d = cfg.sessions_dir
    if not d.is_dir():
        raise ConfigError(f"sessions directory {d} does not exist")
    files = sorted(p for p in d.glob("*.csv") if not p.name.endswith("_events.csv") and p.name != "ground_truth.csv")
    if not files:
        raise ConfigError(f"no session files in {d}")
    return files


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    return out


def load_windows(cfg: RunConfig, files: list[Path]) -> list:
    windows = []
    for path in files:
        session = load_session(path)
        session.validate()
        session = preprocess_session(session, cfg.lowpass(), cfg.detrend_degree())
        windows += extract_windows(
            session, float(cfg.get("windows", "window_len_s")), int(cfg.get("windows", "n_baseline")),
            int(cfg.get("windows", "seed")),
        )
    return windows


def _with_header(cfg: RunConfig, text: str) -> str:
    return f"# {cfg.header}\n{text}"


def cmd_synth(cfg: RunConfig, jobs: int = 1) -> int:
    out = cfg.sessions_dir
    n_prof = int(cfg.get("synth", "n_profiles"))
    profiles = with_noise(default_profiles(amplitude=float(cfg.get("synth", "amplitude"))),
                          noise_sd=float(cfg.get("synth", "noise_sd")))[:n_prof]
    cohort = generate_cohort(profiles, seed=int(cfg.get("synth", "seed")),
                             n_sessions=int(cfg.get("synth", "n_sessions")))
    try:
        write_cohort(cohort, out, cfg.header)
    except OSError as exc:
        raise ConfigError(f"cannot write to {out}: {exc}") from None
    print(f"wrote {len(cohort.sessions)} sessions from {n_prof} profiles to {out}")
    return 0


def cmd_features(cfg: RunConfig, jobs: int = 1) -> int:
    files = _require_sessions(cfg)
    out = _prepare_output(cfg)
    fs = cfg.get("features", "feature_set")
    windows = load_windows(cfg, files)
    table = featurize(windows, fs, lambda_policy=cfg.lambda_policy())
    path = write_feature_csv(table, out / f"features_{fs}.csv", cfg.header)
    print(f"{len(files)} sessions, {len(table)} windows, D = {table.flat.shape[1]} "
          f"({table.n_channels} channels x {table.X.shape[2]}) -> {path}")
    return 0


def _read_truth(directory: Path) -> dict | None:
    path = directory / "ground_truth.csv"
    if not path.exists():
        return None
    rows = [line.split(",") for line in path.read_text().splitlines() if line and not line.startswith("#")]
    return {r[0]: r[1] for r in rows[1:]}


def cmd_cluster(cfg: RunConfig, jobs: int = 1) -> int:
    files = _require_sessions(cfg)
    out = _prepare_output(cfg)
    exp = cfg.experiment()
    table = featurize(load_windows(cfg, files), cfg.get("features", "feature_set"),
                      lambda_policy=cfg.lambda_policy())
    holdout = _optional(cfg.get("cluster", "holdout_fold"), int)
    if holdout is not None:
        folds = make_folds(table.y, table.session_ids, exp.outer_folds, exp.seed)
        table = table.subset(np.setdiff1d(np.arange(len(table)), folds[holdout]))
    T = int(cfg.get("cluster", "T"))
    desc = session_descriptors(table, exp.descriptor_filter, exp.descriptor_normalization)
    if T == 1:
        graph = build_similarity(desc, exp.cluster_gamma)
        assignment = TaskAssignment(1, {d.session_id: 0 for d in desc})
        order, W = np.arange(len(desc)), graph.W
    else:
        res = assign_tasks(desc, T, exp.cluster_gamma, int(cfg.get("cluster", "seed")), exp.n_restarts)
        assignment, order, W, graph = res.assignment, res.order, res.permuted_W, res.graph
    ids = list(graph.session_ids)
    lines = ["session_id,task"] + [f"{s},{assignment.task_of(s)}" for s in ids]
    atomic_write_text(out / "assignment.csv", _with_header(cfg, "\n".join(lines) + "\n"))
    labels = [ids[i] for i in order]
    atomic_write_text(out / "similarity.svg", heatmap_svg(W, labels, labels, "session similarity (cluster order)",
                                                          cfg.header, 0.0, 1.0))
    sizes = [len(assignment.sessions_in(r)) for r in range(T)]
    print(f"{len(ids)} sessions -> {T} tasks, sizes {sizes}")
    truth = _read_truth(cfg.sessions_dir)
    if truth and all(s in truth for s in ids):
        ari = adjusted_rand_index([truth[s] for s in ids], assignment.tasks_for(ids))
        status = "perfect recovery" if ari == 1.0 else "partial recovery"
        logger.info("ground truth ARI = %.4f (%s)", ari, status)
        print(f"ground truth ARI = {ari:.4f} ({status})")
    return 0


def _region_means(eta_mean: np.ndarray, size: int):
    M = len(eta_mean)
    labels, values = [], []
    for start in range(0, M, size):
        stop = min(start + size, M)
        labels.append(f"ch{start + 1}-{stop}")
        values.append(float(eta_mean[start:stop].mean()))
    return labels, values


def _write_eta_figures(cfg: RunConfig, out: Path, stem: str, eta: np.ndarray, title: str):
    eta = np.atleast_2d(eta)
    M = eta.shape[1]
    atomic_write_text(out / f"eta_{stem}.svg",
                      heatmap_svg(eta, [f"task {r}" for r in range(len(eta))], [f"ch{m + 1}" for m in range(M)],
                                  title, cfg.header, 0.0))
    labels, values = _region_means(eta.mean(axis=0), int(cfg.get("figures", "region_size")))
    atomic_write_text(out / f"eta_regions_{stem}.svg", bar_svg(values, labels, f"mean eta by region: {title}",
                                                               cfg.header))
    summary = "\n".join(f"{lab},{v!r}" for lab, v in zip(labels, values))
    atomic_write_text(out / f"eta_regions_{stem}.csv", _with_header(cfg, "region,mean_eta\n" + summary + "\n"))


def _stem(name: str) -> str:
    return name.replace("/", "_").replace("=", "")


def cmd_train(cfg: RunConfig, jobs: int = 1) -> int:
    files = _require_sessions(cfg)
    out = _prepare_output(cfg)
    exp = cfg.experiment()
    windows = load_windows(cfg, files)
    tables = {fs: featurize(windows, fs, lambda_policy=cfg.lambda_policy()) for fs in exp.feature_sets}
    for variant in exp.variants():
        table = tables[variant.feature_set]
        fm = train_fold(table, np.arange(len(table)), variant, exp)
        d = fm.model.to_dict()
        d["config_hash"] = cfg.digest
        stem = _stem(variant.name)
        atomic_write_text(out / f"model_{stem}.json", json.dumps(d, indent=1, sort_keys=True) + "\n")
        _write_eta_figures(cfg, out, stem, fm.model.eta, variant.name)
        print(f"{variant.name}: C = {fm.C:g}, nu = {fm.nu:g}, {fm.model.n_iter} iterations, "
              f"converged = {fm.model.converged}")
    return 0


def _write_report_outputs(cfg: RunConfig, out: Path, report: dict):
    atomic_write_text(out / "report.txt", format_table(report))
    for v in report["variants"]:
        if not v["folds"]:
            continue
        eta = np.mean([np.asarray(f["eta"]) for f in v["folds"]], axis=0)
        _write_eta_figures(cfg, out, _stem(v["name"]), eta, v["name"] + " (fold mean)")


def cmd_evaluate(cfg: RunConfig, jobs: int = 1) -> int:
    files = _require_sessions(cfg)
    out = _prepare_output(cfg)
    exp = cfg.experiment()
    windows = load_windows(cfg, files)

    def progress(variant, fold, m):
        logger.info("%s fold %d accuracy %.3f", variant.name, fold, m.accuracy)

    report = run_experiment(windows, exp, progress=progress, jobs=jobs)
    report.config_hash = cfg.digest
    d = report.to_dict()
    atomic_write_text(out / "report.json", json.dumps(d, indent=1, sort_keys=True) + "\n")
    _write_report_outputs(cfg, out, d)
    print(format_table(d), end="")
    failed = [f"{v['name']} fold {x['fold']}" for v in d["variants"] for x in v["failures"]]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_report(cfg: RunConfig, jobs: int = 1) -> int:
    out = cfg.output_dir
    path = out / "report.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'evaluate' first")
    report = json.loads(path.read_text())
    _write_report_outputs(cfg, out, report)
    print(format_table(report), end="")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic cohort into data.sessions_dir"),
    "features": (cmd_features, "window the sessions and write a feature CSV"),
    "cluster": (cmd_cluster, "cluster sessions into tasks; write assignment and similarity heatmap"),
    "train": (cmd_train, "fit one model per variant on all windows; write models and eta figures"),
    "evaluate": (cmd_evaluate, "run the cross-validation experiment and write the report"),
    "report": (cmd_report, "re-render report.txt and figures from report.json"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="painmkl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"painmkl {__version__} (file format {FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one setting (repeatable)")
        p.add_argument("--data", help="shorthand for --set data.sessions_dir=...")
        p.add_argument("--out", help="shorthand for --set data.output_dir=...")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for outer folds")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.data:
        overrides.append(f"data.sessions_dir={args.data}")
    if args.out:
        overrides.append(f"data.output_dir={args.out}")
    try:
        cfg = load_config(args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return COMMANDS[args.command][0](cfg, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
