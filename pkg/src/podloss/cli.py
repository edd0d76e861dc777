"""Command-line surface: centroid generation, training, analysis, exports.

Commands (all under the ``podloss`` entry point):

    pedcc-gen        generate + verify a centroid file
    train            run a training config into a run directory
    eval             recompute metrics for a finished run
    gradcheck        finite-difference check of every loss on MLP and CNN
    export-features  dump latent features of a split to CSV
    analyze          report diagnostics for a run (or a lambda-sweep directory)

Configuration is a flat ``section.key = value`` text file; every key can be
overridden with ``--set section.key=value``. A run directory always holds
manifest.json, history.csv, summary.json, model.podn and centroids.bin, and
is never partially overwritten (``--force`` replaces it atomically-enough by
writing into a fresh directory).

Exit codes: 0 success, 1 validation failure, 2 numerical failure
(divergence or gradient-check breach).
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__, classify, data, losses, net as net_mod, pedcc
from .train import (
    DivergenceError,
    TrainConfig,
    TrainHistory,
    evaluate,
    run_training,
    write_summary,
    _latents_in_chunks,
    _prepared_inputs,
)

CONFIG_DEFAULTS = {
    "run.seed": "7",
    "data.kind": "blobs",  # blobs | digits | mnist | cifar10
    "data.dir": "",
    "data.upsample": "0",
    "data.classes": "",
    "data.train_fraction": "0.8",
    "data.standardize": "true",
    "data.augment": "false",
    "data.blob_classes": "5",
    "data.blob_dim": "16",
    "data.blob_per_class": "150",
    "data.blob_test_per_class": "60",
    "data.blob_spread": "0.5",
    "pedcc.n": "64",
    "pedcc.seed": "",
    "pedcc.circle": "false",
    "pedcc.phase": "0.0",
    "pedcc.file": "",
    "net.spec": "dense:784:256,relu,dense:256:64",
    "train.loss": "pod",
    "train.alpha": "0.01",
    "train.lambda": "1.0",
    "train.epochs": "20",
    "train.batch_size": "128",
    "train.lr": "0.1",
    "train.lr_drops": "6,12,18",
    "train.lr_drop_factor": "0.1",
    "train.momentum": "0.9",
    "train.weight_decay": "0.0005",
    "train.eval_every": "1",
    "train.checkpoint_every": "0",
}

RUN_FILES = ("manifest.json", "history.csv", "summary.json", "model.podn", "centroids.bin")


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``section.key = value`` lines; unknown keys and syntax errors
    are reported with their line number."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def resolve_config(path: str | None, overrides) -> dict[str, str]:
    config = dict(CONFIG_DEFAULTS)
    if path:
        config.update(parse_config_text(Path(path).read_text(), source=str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"--set: unknown config key {key!r}")
        config[key] = value.strip()
    return config


def _as_bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {value!r}")


def _as_int_tuple(value: str) -> tuple:
    value = value.strip()
    if not value:
        return ()
    return tuple(int(tok) for tok in value.split(","))


def train_config_from(config: dict[str, str]) -> TrainConfig:
    specs = net_mod.parse_layer_specs(config["net.spec"])
    return TrainConfig(
        loss=config["train.loss"],
        alpha=float(config["train.alpha"]),
        lam=float(config["train.lambda"]),
        epochs=int(config["train.epochs"]),
        batch_size=int(config["train.batch_size"]),
        lr=float(config["train.lr"]),
        lr_drops=_as_int_tuple(config["train.lr_drops"]),
        lr_drop_factor=float(config["train.lr_drop_factor"]),
        momentum=float(config["train.momentum"]),
        weight_decay=float(config["train.weight_decay"]),
        seed=int(config["run.seed"]),
        latent_dim=specs[-1][2],
        backbone=config["net.spec"],
        eval_every=int(config["train.eval_every"]),
        augment=_as_bool(config["data.augment"]),
        checkpoint_every=int(config["train.checkpoint_every"]),
    )


def build_datasets(config: dict[str, str]) -> tuple[data.Dataset, data.Dataset]:
    """Construct the train/test splits named by the data section.

    Blob test sets draw fresh noise with seed+1000003 (documented offset) so
    they sample the same class distribution as the train set.
    """
    kind = config["data.kind"]
    seed = int(config["run.seed"])
    if kind == "blobs":
        k = int(config["data.blob_classes"])
        dim = int(config["data.blob_dim"])
        spread = float(config["data.blob_spread"])
        train = data.synth_blobs(k, dim, int(config["data.blob_per_class"]), spread, seed)
        test = data.synth_blobs(
            k, dim, int(config["data.blob_test_per_class"]), spread, seed + 1_000_003
        )
        test.split = "test"
    elif kind == "digits":
        upsample = int(config["data.upsample"]) or None
        full = data.load_digits8(upsample_to=upsample)
        if config["data.classes"]:
            full = data.subset_classes(full, [int(c) for c in config["data.classes"].split(",")])
        train, test = data.split_dataset(full, float(config["data.train_fraction"]), seed)
    elif kind == "mnist":
        paths = data.find_mnist(config["data.dir"] or None)
        if paths is None:
            raise FileNotFoundError(
                f"MNIST IDX files not found under {config['data.dir'] or '$PODLOSS_MNIST_DIR or data/mnist'}"
            )
        train = data.load_mnist_idx(paths["train_images"], paths["train_labels"])
        test = data.load_mnist_idx(paths["test_images"], paths["test_labels"])
        test.split = "test"
        if config["data.classes"]:
            keep = [int(c) for c in config["data.classes"].split(",")]
            train = data.subset_classes(train, keep)
            test = data.subset_classes(test, keep)
    elif kind == "cifar10":
        base = Path(config["data.dir"])
        train_files = sorted(base.glob("data_batch_*.bin")) or sorted(base.glob("data_batch_*"))
        test_files = sorted(base.glob("test_batch*"))
        if not train_files or not test_files:
            raise FileNotFoundError(f"CIFAR-10 batch files not found under {base}")
        train = data.load_cifar10_bin(train_files)
        test = data.load_cifar10_bin(test_files)
        test.split = "test"
    else:
        raise ConfigError(f"unknown data.kind {kind!r}")
    if _as_bool(config["data.standardize"]):
        mean, std = data.compute_norm_stats(train)
        train = data.with_norm_stats(train, mean, std)
        test = data.with_norm_stats(test, mean, std)
    return train, test


def build_centroids(config: dict[str, str], num_classes: int) -> pedcc.CentroidSet:
    if config["pedcc.file"]:
        return pedcc.load_centroids(config["pedcc.file"])
    seed = int(config["pedcc.seed"] or config["run.seed"])
    if _as_bool(config["pedcc.circle"]):
        return pedcc.generate_circle_centroids(num_classes, float(config["pedcc.phase"]))
    return pedcc.generate_simplex_centroids(num_classes, int(config["pedcc.n"]), seed=seed)


def cmd_pedcc_gen(args) -> int:
    if args.circle:
        cs = pedcc.generate_circle_centroids(args.k, phase=args.phase)
    else:
        cs = pedcc.generate_simplex_centroids(args.k, args.n, seed=args.seed, rotate=not args.no_rotate)
    report = pedcc.verify_centroids(cs)
    pedcc.save_centroids(cs, args.output)
    if args.text:
        pedcc.export_centroids_text(cs, args.text)
    print(f"wrote {cs.num_classes}x{cs.dim} {cs.mode} centroids to {args.output}")
    print(f"max_norm_deviation={report.max_norm_deviation:.3e}")
    print(f"max_pair_deviation={report.max_pair_deviation:.3e} (target {report.pair_target:.9f})")
    if not report.passed:
        print("verification FAILED", file=sys.stderr)
        return 1
    print("verification passed")
    return 0


def _prepare_run_dir(out: Path, force: bool) -> None:
    if out.exists():
        if not force:
            raise ConfigError(f"run directory {out} exists; pass --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True)


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.set)
    out = Path(args.out)
    _prepare_run_dir(out, args.force)
    train_set, test_set = build_datasets(config)
    cfg = train_config_from(config)
    cs = build_centroids(config, train_set.num_classes)
    network, history = run_training(cfg, train_set, test_set, cs, checkpoint_dir=out)
    pedcc.save_centroids(cs, out / "centroids.bin")
    net_mod.save_checkpoint(network, out / "model.podn")
    history.to_csv(out / "history.csv")
    write_summary(out / "summary.json", cfg, history)
    manifest = {
        "config": config,
        "build": {
            "package": f"podloss {__version__}",
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "dataset_checksums": {
            "train": data.dataset_checksum(train_set),
            "test": data.dataset_checksum(test_set),
        },
        "outputs": {name: name for name in RUN_FILES},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    final = history.final
    print(
        f"run complete: {len(history)} epochs, final test accuracy "
        f"{final.test_accuracy:.4f}, final train loss {final.train_loss:.6f}"
    )
    return 0


def _load_run(run_dir: Path):
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"missing artifact: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    config = dict(CONFIG_DEFAULTS) | manifest["config"]
    for name in ("model.podn", "centroids.bin"):
        if not (run_dir / name).exists():
            raise ConfigError(f"missing artifact: {run_dir / name}")
    network = net_mod.load_checkpoint(run_dir / "model.podn")
    cs = pedcc.load_centroids(run_dir / "centroids.bin")
    return config, network, cs


def _run_latents(config, network, cs, split: str):
    train_set, test_set = build_datasets(config)
    ds = test_set if split == "test" else train_set
    head_attached = config["train.loss"] == "softmax_ce"
    latents = _latents_in_chunks(
        network, _prepared_inputs(ds, network.layers[0]), skip_last=1 if head_attached else 0
    )
    if head_attached:
        logits, _ = network.layers[-1].forward(latents)
        preds = np.argmax(logits, axis=1)
    else:
        preds = classify.classify_cosine_batch(latents, cs)
    return ds, latents, preds, head_attached


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    config, network, cs = _load_run(run_dir)
    train_set, test_set = build_datasets(config)
    ds = test_set if args.split == "test" else train_set
    metrics = evaluate(network, cs, ds, head_attached=config["train.loss"] == "softmax_ce")
    text = metrics.to_json()
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return 0


def cmd_export_features(args) -> int:
    run_dir = Path(args.run)
    config, network, cs = _load_run(run_dir)
    ds, latents, preds, _ = _run_latents(config, network, cs, args.split)
    if args.dim2 and latents.shape[1] != 2:
        raise ConfigError(f"--dim2 requires a 2-dimensional latent model, got {latents.shape[1]}")
    classify.export_features_csv(args.output, latents, ds.labels, preds)
    print(f"wrote {latents.shape[0]} rows to {args.output}")
    return 0


GRADCHECK_NETS = {
    "mlp": ("dense:12:10,relu,dense:10:6", (3, 12)),
    "cnn": ("conv3x3:1:4:1,relu,maxpool2x2,conv3x3:4:6:2,relu,flatten,dense:24:6", (2, 1, 8, 8)),
}


def _gradcheck_loss_fns(cs, labels):
    def wrap(fn):
        def loss_fn(latent):
            bundle = fn(losses.LatentBatch(latent, labels))
            return bundle.value, bundle.grad

        return loss_fn

    return {
        "nac": wrap(lambda b: losses.nac_loss(b, cs, delta=0.3)),
        "cosine": wrap(lambda b: losses.cosine_loss(b, cs)),
        "mse": wrap(lambda b: losses.mse_loss_normalized(b, cs)),
        "sc": wrap(lambda b: losses.sc_loss(b, cs)),
        "pod": wrap(lambda b: losses.pod_loss(b, cs, delta=0.3, lam=1.0)),
        "softmax_ce": lambda latent: losses.softmax_ce_loss(losses.Logits(latent), labels),
    }


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    cs = pedcc.generate_simplex_centroids(4, 6, seed=args.seed)
    worst_overall = 0.0
    failed = False
    for net_name, (spec, input_shape) in GRADCHECK_NETS.items():
        network = net_mod.build_network(spec, seed=args.seed)
        x = rng.normal(size=input_shape)
        labels = rng.integers(0, 4, size=input_shape[0])
        for loss_name, loss_fn in _gradcheck_loss_fns(cs, labels).items():
            err = net_mod.grad_check(
                network, loss_fn, x, num_params=200, rng=rng, corrupt=args.negative_control
            )
            worst_overall = max(worst_overall, err)
            status = "PASS" if err < args.threshold else "FAIL"
            print(f"loss={loss_name:<10} net={net_name:<3} max_rel_err={err:.3e} {status}")
            failed = failed or err >= args.threshold
    if args.negative_control:
        # corrupted gradients must be caught; report and exit accordingly
        if failed:
            print("negative control failed as expected")
            return 0
        print("negative control was NOT detected", file=sys.stderr)
        return 2
    print(f"worst max_rel_err={worst_overall:.3e}")
    return 2 if failed else 0


def cmd_analyze(args) -> int:
    target = Path(args.run)
    if args.sweep:
        rows = []
        for sub in sorted(p for p in target.iterdir() if p.is_dir()):
            summary_path = sub / "summary.json"
            if not summary_path.exists():
                continue
            summary = json.loads(summary_path.read_text())
            lam = float(summary["config"]["lam"])
            rows.append((lam, summary["final_train_loss"]))
        if not rows:
            raise ConfigError(f"no run summaries found under {target}")
        rows.sort()
        print("lambda,lg_lambda,final_train_loss")
        for lam, loss in rows:
            print(f"{lam:g},{np.log10(lam):.1f},{loss!r}")
        return 0
    summary_path = target / "summary.json"
    history_path = target / "history.csv"
    for path in (summary_path, history_path):
        if not path.exists():
            raise ConfigError(f"missing artifact: {path}")
    summary = json.loads(summary_path.read_text())
    history = TrainHistory.from_csv(history_path)
    final = history.final
    print(f"epochs={len(history)}")
    print(f"final_test_accuracy={final.test_accuracy!r}")
    print(f"final_train_loss={final.train_loss!r}")
    print(f"mean_norm={final.mean_norm!r}")
    print(f"low_norm_accuracy={final.low_norm_accuracy!r}")
    print(f"high_norm_accuracy={final.high_norm_accuracy!r}")
    print(f"offdiag_energy={final.offdiag_energy!r}")
    print(f"subspace_alignment={final.subspace_alignment!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="podloss", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"podloss {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pedcc-gen", help="generate and verify a centroid file")
    p.add_argument("--k", type=int, required=True, help="number of classes")
    p.add_argument("--n", type=int, default=2, help="latent dimension (simplex mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--circle", action="store_true", help="2-D circle layout instead of a simplex")
    p.add_argument("--phase", type=float, default=0.0, help="circle phase in radians")
    p.add_argument("--no-rotate", action="store_true", help="skip the seeded random rotation")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--text", help="also write a plain-text export here")
    p.set_defaults(func=cmd_pedcc_gen)

    p = sub.add_parser("train", help="run a training config into a run directory")
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--force", action="store_true", help="replace an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics for a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("-o", "--output", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--negative-control",
        action="store_true",
        help="flip analytic gradients; the check must then fail",
    )
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-features", help="dump latent features of a split to CSV")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--dim2", action="store_true", help="require a 2-D latent model")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("analyze", help="report diagnostics for a run directory")
    p.add_argument("run", help="run directory (or sweep directory with --sweep)")
    p.add_argument("--sweep", action="store_true", help="tabulate lambda vs final loss")
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
