"""Command-line entry point: ``restt <command> [flags]``.

Every command accepts ``--config FILE`` (``key=value`` lines, ``#`` comments,
keys named like the long flags) and writes a ``manifest.txt`` with the
effective settings, which can be passed back through ``--config``.

Exit status: 0 success, 2 configuration error, 3 data error, 4 divergence
abort, 5 output path not writable.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import features, meanfield, oracle, train
from .model import InputShapeError, Topology, TopologyError, init_params, load_checkpoint, predict, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5
DATA_DIR_ENV = "RESTT_DATA_DIR"
MODELS = ("tt", "restt", "fc", "volterra")
DATASETS = ("mnist", "fashion-mnist", "synth", "csv")
MANIFEST = "manifest.txt"
SKIP_IN_MANIFEST = {"config", "func"}


class ConfigError(ValueError):
    pass


class OutputError(OSError):
    pass


# -- config files --------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_manifest(out_dir: Path, args: argparse.Namespace, extra: dict | None = None) -> Path:
    values = {k: v for k, v in sorted(vars(args).items()) if k not in SKIP_IN_MANIFEST and v is not None}
    lines = [f"command={args.command}"] + [f"{k}={v}" for k, v in values.items() if k != "command"]
    lines += [f"# {k}={v}" for k, v in (extra or {}).items()]
    path = out_dir / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _sigma(text):
    if str(text).strip().lower() == "auto":
        return "auto"
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("sigma_w2 must be positive or 'auto'")
    return value


def _optional_float(text):
    return None if str(text).lower() in ("", "none") else float(text)


def _optional_int(text):
    return None if str(text).lower() in ("", "none") else int(text)


# -- parser --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying defaults; explicit flags win")
    p.add_argument("--threads", type=_optional_int, default=None, help="cap on BLAS worker threads")


def _dataset_flags(p: argparse.ArgumentParser, required: bool) -> None:
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=DATASETS, default=None if not required else "mnist")
    g.add_argument("--data-dir", default=None,
                   help=f"root with mnist/ and fashion-mnist/ IDX files (default ${DATA_DIR_ENV} or ./data)")
    g.add_argument("--fraction", type=float, default=None, help="fraction of the training split to use (default 1)")
    g.add_argument("--data-seed", type=_optional_int, default=None,
                   help="seed for subsampling, splitting and synthetic data (default --seed)")
    g.add_argument("--d", type=_optional_int, default=None, help="synthetic feature dimension (default 10)")
    g.add_argument("--n-train", type=_optional_int, default=None, help="synthetic training size (default 10000)")
    g.add_argument("--n-test", type=_optional_int, default=None, help="synthetic test size (default 10000)")
    g.add_argument("--train-csv", default=None)
    g.add_argument("--test-csv", default=None, help="if absent the training CSV is split")
    g.add_argument("--target", default=None, help="CSV target column (default y)")
    g.add_argument("--delimiter", default=None)
    g.add_argument("--split-fraction", type=_optional_float, default=None,
                   help="training share when splitting a single CSV (default 0.7)")
    g.add_argument("--embedding", choices=("trig", "raw", "none"), default=None,
                   help="CSV features: min-max then trig (default), min-max only, or untouched")
    g.add_argument("--node-width", type=_optional_int, default=None,
                   help="columns per node with --embedding none (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restt", description="Tensor-train and residual tensor-train models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic multilinear regression dataset")
    _common(p)
    p.add_argument("--d", type=int, default=10)
    p.add_argument("--n-train", type=int, default=10_000)
    p.add_argument("--n-test", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=False, default="synth")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model and write run log, manifest and checkpoint")
    _common(p)
    p.add_argument("--model", choices=MODELS, default="restt")
    p.add_argument("--r", type=int, default=20, help="bond dimension")
    p.add_argument("--sigma-w2", type=_sigma, default="auto", help="initial weight variance scale, or 'auto'")
    _dataset_flags(p, required=True)
    p.add_argument("--lr", type=_optional_float, default=None,
                   help="learning rate (default 1e-3 for images, 1e-2 otherwise)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--loss", choices=("auto", "mse", "softmax_cross_entropy"), default="auto",
                   help="auto: cross-entropy for classes, mse for regression")
    p.add_argument("--seed", type=int, default=0, help="initialisation seed")
    p.add_argument("--shuffle-seed", type=_optional_int, default=None, help="epoch shuffling seed (default --seed)")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--out-dir", default="run")
    p.add_argument("--quiet", type=_bool, default=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe-meanfield", help="Monte Carlo check of the signal-propagation recursions")
    _common(p)
    p.add_argument("--model", choices=("tt", "restt"), default="tt")
    p.add_argument("--N", type=int, default=20)
    p.add_argument("--I", type=int, default=2)
    p.add_argument("--r", type=int, default=10)
    p.add_argument("--output-dim", type=_optional_int, default=None, help="default r")
    p.add_argument("--sigma-w2", type=_sigma, default="auto")
    p.add_argument("--inputs", choices=("trig", "gaussian"), default="trig")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="meanfield.csv")
    p.set_defaults(func=cmd_probe_meanfield)

    p = sub.add_parser("expand", help="list every interaction term of a small checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--out", default="-", help="output file, '-' for standard output")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=False)
    _dataset_flags(p, required=False)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--task", choices=("auto",) + train.TASKS, default="auto")
    p.add_argument("--seed", type=_optional_int, default=None)
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)
    parser.subcommands = dict(sub.choices)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config(args.config)
        command = values.pop("command", args.command)
        if command != args.command:
            raise ConfigError(f"config file is for command {command!r}, not {args.command!r}")
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {', '.join(unknown)}")
        values = {k: (None if v in ("", "None") else v) for k, v in values.items()}
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    for key in ("checkpoint",):
        if hasattr(args, key) and args.command in ("expand", "eval") and not getattr(args, key):
            raise ConfigError(f"--{key} is required")
    return args


# -- datasets ------------------------------------------------------------------------


def data_dir(arg) -> Path:
    return Path(arg or os.environ.get(DATA_DIR_ENV) or "data")


def _data_settings(args, stored: dict | None = None) -> dict:
    """Resolve dataset options: explicit flags, then values stored with a checkpoint, then defaults."""
    stored = stored or {}
    defaults = {"dataset": "mnist", "fraction": 1.0, "data_seed": None, "d": 10, "n_train": 10_000,
                "n_test": 10_000, "train_csv": None, "test_csv": None, "target": "y", "delimiter": ",",
                "split_fraction": 0.7, "embedding": "trig", "node_width": 1}
    out = {}
    for k, v in defaults.items():
        flag = getattr(args, k, None)
        out[k] = flag if flag is not None else stored.get(k, v)
    if out["data_seed"] is None:
        out["data_seed"] = getattr(args, "seed", None) or 0
    return out


def prepare_data(cfg: dict, data_root: Path, scaler_state: dict | None = None):
    """Load and embed a dataset. Returns ``(train, test, info)`` with node inputs ``(n, N, I)``.

    ``info`` records what is needed to reproduce the preprocessing, including a
    fitted min-max scaler for tables.
    """
    name = cfg["dataset"]
    info: dict = {}
    if name in ("mnist", "fashion-mnist"):
        folder = data_root / name
        tr = data_mod.load_idx_dir(folder, "train")
        te = data_mod.load_idx_dir(folder, "test")
        to_nodes = lambda d: data_mod.Dataset(features.image_features(d.x), d.y, d.split, d.meta)
        tr, te = to_nodes(tr), to_nodes(te)
    elif name == "synth":
        spec = data_mod.SynthSpec(d=int(cfg["d"]), n_train=int(cfg["n_train"]), n_test=int(cfg["n_test"]),
                                  seed=int(cfg["data_seed"]))
        tr, te, _ = data_mod.synth_generate(spec)
    elif name == "csv":
        if not cfg["train_csv"]:
            raise data_mod.DataError("--dataset csv needs --train-csv")
        tr = data_mod.load_csv(cfg["train_csv"], cfg["target"], cfg["delimiter"])
        if cfg["test_csv"]:
            te = data_mod.load_csv(cfg["test_csv"], cfg["target"], cfg["delimiter"])
        else:
            tr, te = data_mod.split(tr, float(cfg["split_fraction"]), int(cfg["data_seed"]))
        tr, te, info = _embed_tables(tr, te, cfg, scaler_state)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    if float(cfg["fraction"]) < 1.0:
        tr = data_mod.subsample_fraction(tr, float(cfg["fraction"]), int(cfg["data_seed"]))
    return tr, te, info


def _embed_tables(tr, te, cfg, scaler_state):
    mode = cfg["embedding"]
    if mode == "none":
        w = int(cfg["node_width"])
        if tr.x.shape[1] % w:
            raise data_mod.DataError(f"{tr.x.shape[1]} columns do not split into nodes of width {w}")
        shape = lambda d: data_mod.Dataset(d.x.reshape(len(d), -1, w), d.y, d.split, d.meta)
        return shape(tr), shape(te), {}
    scaler = features.MinMaxScaler()
    if scaler_state:
        scaler.low, scaler.high = np.array(scaler_state["low"]), np.array(scaler_state["high"])
    else:
        scaler.fit(tr.x)
    emb = lambda d: data_mod.Dataset(features.tabular_features(d.x, scaler, mode), d.y, d.split, d.meta)
    return emb(tr), emb(te), {"scaler": {"low": scaler.low.tolist(), "high": scaler.high.tolist()}}


def build_topology(model: str, input_dims, r: int, output_dim: int) -> Topology:
    if model == "tt":
        return Topology.plain_tt(input_dims, r, output_dim)
    if model == "restt":
        return Topology.restt(input_dims, r, output_dim)
    if model == "fc":
        return Topology.fully_connected(input_dims, output_dim)
    if model == "volterra":
        if output_dim != 1:
            raise ConfigError("the volterra model has a scalar output; use a regression dataset")
        return Topology.volterra(input_dims, r)
    raise ConfigError(f"unknown model {model!r}")


def node_second_moments(x) -> np.ndarray:
    """Measured ``E|x_n|^2`` per node for node inputs ``(n, N, I)``."""
    return meanfield.input_second_moments([x[:, n, :] for n in range(x.shape[1])])


def auto_sigma(topology: Topology, x) -> float:
    """Initial weight variance chosen from the training inputs, as ``--sigma-w2 auto`` does."""
    return meanfield.recommend_sigma(topology, node_second_moments(x), meanfield.model_kind(topology))


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"cannot write to {p}: {exc}") from None
    return p


# -- commands ------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = _out_dir(args.out_dir)
    spec = data_mod.SynthSpec(d=args.d, n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    tr, te, weights = data_mod.synth_generate(spec)
    data_mod.write_csv(tr, out / "train.csv")
    data_mod.write_csv(te, out / "test.csv")
    np.savez(out / "weights.npz", w1=weights.w1, w2=weights.w2, w3=weights.w3)
    data_mod.write_sidecar(out / "synth_meta.txt", {
        "d": spec.d, "n_train": spec.n_train, "n_test": spec.n_test, "weight_var": spec.weight_var,
        "input_var": spec.input_var, "seed": spec.seed, "target_column": "y", "node_width": spec.d,
    })
    write_manifest(out, args)
    print(f"wrote {len(tr)} training and {len(te)} test rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args.out_dir)
    cfg = _data_settings(args)
    tr, te, info = prepare_data(cfg, data_dir(args.data_dir))
    classification = tr.is_classification
    n_out = int(max(tr.y.max(), te.y.max())) + 1 if classification else 1
    input_dims = tuple(int(d) for d in tr.x.shape[2:3]) * tr.x.shape[1]
    top = build_topology(args.model, input_dims, args.r, n_out)

    e = node_second_moments(tr.x)
    sigma = auto_sigma(top, tr.x) if args.sigma_w2 == "auto" else float(args.sigma_w2)
    verdict = meanfield.stability_verdict(top, meanfield.predict(top, sigma, e))
    if verdict != "stable":
        print(f"warning: predicted {verdict} signal propagation at sigma_w2={sigma:g}", file=sys.stderr)

    image = cfg["dataset"] in ("mnist", "fashion-mnist")
    lr = args.lr if args.lr is not None else (1e-3 if image else 1e-2)
    loss = args.loss if args.loss != "auto" else ("softmax_cross_entropy" if classification else "mse")
    spec = train.TrainSpec(learning_rate=lr, epochs=args.epochs, batch_size=args.batch_size,
                           weight_decay=args.weight_decay, loss=loss, seed=args.seed,
                           shuffle_seed=args.shuffle_seed, eval_every=args.eval_every, dtype=args.dtype)
    params = init_params(top, sigma, args.seed)
    resolved = {"sigma_w2": repr(sigma), "learning_rate": repr(lr), "loss_resolved": loss, "verdict": verdict,
                "train_size": len(tr), "test_size": len(te)}
    write_manifest(out, args, resolved)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:4d} loss {row['train_loss']:.6g} eval {row['eval_metric']:.6g}", flush=True)

    log = train.fit(params, top, tr, te, spec, progress)
    log.write_csv(out / "runlog.csv")
    metadata = {"data": {k: v for k, v in cfg.items()}, "sigma_w2": sigma, "train_spec": spec.as_dict(), **info}
    save_checkpoint(out / "checkpoint.npz", log.params, top, metadata)
    metrics = train.evaluate(log.params, top, te)
    _write_metrics(out / "metrics.csv", metrics)
    print(" ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    return EXIT_OK


def _write_metrics(path, metrics: dict) -> None:
    Path(path).write_text("metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in metrics.items()))


def cmd_probe_meanfield(args) -> int:
    output_dim = args.output_dim or args.r
    dims = (args.I,) * args.N
    top = Topology.plain_tt(dims, args.r, output_dim) if args.model == "tt" else Topology.restt(dims, args.r, output_dim)
    if args.inputs == "trig":
        sampler, e = meanfield.trig_pixel_sampler(top), 1.0
    else:
        sampler, e = meanfield.gaussian_sampler(top), float(args.I)
    sigma = meanfield.recommend_sigma(top, e, args.model) if args.sigma_w2 == "auto" else float(args.sigma_w2)
    report = meanfield.measure(top, sigma, sampler, trials=args.trials, seed=args.seed)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(out)
        write_manifest(out.parent, args, {"sigma_w2": repr(sigma)})
    except OSError as exc:
        raise OutputError(f"cannot write {out}: {exc}") from None
    print(report.summary())
    return EXIT_OK


def cmd_expand(args) -> int:
    params, top, _ = load_checkpoint(args.checkpoint)
    text = oracle.expand(params, top).dump()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise OutputError(f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


def cmd_eval(args) -> int:
    params, top, meta = load_checkpoint(args.checkpoint)
    cfg = _data_settings(args, meta.get("data"))
    tr, te, _ = prepare_data(cfg, data_dir(args.data_dir), meta.get("scaler"))
    ds = te if args.split == "test" else tr
    if ds.x.ndim != 3 or tuple([ds.x.shape[2]] * ds.x.shape[1]) != top.input_dims:
        raise InputShapeError(
            f"dataset gives {ds.x.shape[1] if ds.x.ndim == 3 else '?'} nodes of length "
            f"{ds.x.shape[2] if ds.x.ndim == 3 else '?'}, checkpoint expects input_dims {top.input_dims}"
        )
    task = train.task_of(ds) if args.task == "auto" else args.task
    metrics = train.metrics_from_outputs(predict(params, top, ds.x), ds.y, task)
    print(" ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    if args.out:
        try:
            _write_metrics(args.out, metrics)
        except OSError as exc:
            raise OutputError(f"cannot write {args.out}: {exc}") from None
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


@contextlib.contextmanager
def _thread_cap(n):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors exit with status 2
        return int(exc.code or 0)
    try:
        with _thread_cap(args.threads):
            return args.func(args)
    except (ConfigError, TopologyError, oracle.SizeGuardError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DataError, InputShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except train.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
