"""Command-line entry point.

Subcommands: train, evaluate, ablate, sweep, report, ssim-report, embed, echo-config.
Exit status is 0 on success, 1 for configuration errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import platform
import subprocess
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .config import PRESETS, ExperimentConfig, dump_config, load_config
from .datasets import ConfigurationError, DataError

log = logging.getLogger("bidir_adapt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigArgumentParser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; usage errors are configuration errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class LockError(RuntimeError):
    pass


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def directory_lock(directory):
    """Hold ``directory/.lock`` for the duration; a lock left by a dead process is taken over."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid):
                raise LockError(f"{directory} is in use by process {pid} (remove {lock} if that is wrong)")
            log.warning("removing stale lock %s", lock)
            lock.unlink(missing_ok=True)
    else:
        raise LockError(f"could not acquire {lock}")
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def code_version():
    rev = None
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            rev = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return {"package": __version__, "git": rev}


def write_manifest(out_dir, cfg: ExperimentConfig, command, extra=None):
    out = Path(out_dir)
    manifest = {
        "command": command, "config_hash": cfg.hash(), "seed": cfg.seed, "code_version": code_version(),
        "python": platform.python_version(), "created": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    dump_config(cfg, out / "config.yaml")
    return manifest


# ---------------------------------------------------------------------------
# argument handling


def _add_config_args(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", default="default", choices=sorted(PRESETS),
                   help="base defaults: 'default' (full protocol) or 'desk' (small CPU run)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set loss_weights.eta=0 (repeatable)")
    p.add_argument("--setting", help="domain pair, e.g. synthetic or mnist->usps")
    p.add_argument("--data-root", help="raw data directory (default: $BIDIR_ADAPT_DATA)")
    p.add_argument("--epochs", type=int, help="shortcut for schedule.epochs; the self-labeling start "
                                              "keeps its fraction of the schedule")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", "-o", help="artifact directory")


def resolve_config(args) -> ExperimentConfig:
    """Defaults < config file < flags < --set."""
    cfg = load_config(args.config, preset=args.preset)
    flags = []
    if args.setting:
        flags.append(("setting", args.setting))
    if args.data_root:
        flags.append(("data_root", args.data_root))
    if args.seed is not None:
        flags.append(("seed", args.seed))
    if args.output_dir:
        flags.append(("output_dir", args.output_dir))
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigurationError("--epochs must be >= 0")
        s = cfg.schedule
        frac = s.eta_activation_epoch / s.epochs if s.epochs else 0.5
        flags += [("schedule.epochs", args.epochs), ("schedule.eta_activation_epoch", int(args.epochs * frac))]
    if not flags and not args.overrides:
        return cfg
    return load_config(args.config, overrides=flags + list(args.overrides), preset=args.preset)


def _output_dir(cfg: ExperimentConfig, default_name):
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("runs") / f"{default_name}-{cfg.setting.replace('->', '_to_')}-{cfg.hash()[:8]}"


def _summary_lines(metrics):
    return [
        f"{'C_t':<12}{100 * metrics['acc_C_t']:8.2f}",
        f"{'C_s(G_ts)':<12}{100 * metrics['acc_C_s']:8.2f}",
        f"{'ensemble':<12}{100 * metrics['acc_ensemble']:8.2f}   (sigma={metrics['sigma']:.1f})",
    ]


def _write_summary(out, metrics, extra=None):
    rec = {**metrics, **(extra or {})}
    (out / "summary.json").write_text(json.dumps(rec, indent=2))
    text = "\n".join(["target accuracy (%)"] + _summary_lines(metrics)) + "\n"
    (out / "summary.txt").write_text(text)
    return text


# ---------------------------------------------------------------------------
# subcommands


def cmd_echo_config(args):
    sys.stdout.write(dump_config(resolve_config(args)))
    return EXIT_OK


def cmd_train(args):
    from .trainer import Trainer, load_pair

    cfg = resolve_config(args)
    out = _output_dir(cfg, "train")
    with directory_lock(out):
        write_manifest(out, cfg, "train")
        pair = load_pair(cfg)
        if args.resume:
            trainer = Trainer.from_checkpoint(args.resume, pair, cfg, output_dir=out)
        else:
            trainer = Trainer(cfg, pair, output_dir=out)
        try:
            trainer.train()
        finally:
            trainer.close()
        if pair.target_labels is None:
            print(f"finished; artifacts in {out}")
            return EXIT_OK
        metrics = trainer.state.history[-1] if trainer.state.history else trainer.evaluate()
        text = _write_summary(out, metrics, {"epoch": trainer.state.epoch, "config_hash": cfg.hash()})
    print(text, end="")
    print(f"artifacts in {out}")
    return EXIT_OK


def _load_checkpoint(args):
    from .config import load_config as _load
    from .trainer import Trainer, load_pair

    ck = Path(args.checkpoint)
    if not (ck / "state.json").exists():
        raise FileNotFoundError(f"no checkpoint at {ck}")
    cfg = _load(ck / "config.yaml")
    if args.data_root:
        cfg = cfg.replace(data_root=args.data_root)
    return Trainer.from_checkpoint(ck, load_pair(cfg), cfg), cfg


def cmd_evaluate(args):
    from .inference import combine, export_predictions

    trainer, cfg = _load_checkpoint(args)
    metrics = trainer.evaluate()
    out = Path(args.output_dir) if args.output_dir else Path(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    text = _write_summary(out, metrics, {"checkpoint": str(args.checkpoint)})
    if args.export:
        p_s, p_t, _ = trainer.target_probabilities()
        export_predictions(combine(p_s, p_t, metrics["sigma"]), metrics["sigma"], args.export)
    print(text, end="")
    return EXIT_OK


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigurationError(f"--seeds must be comma-separated integers, got {text!r}") from exc


def cmd_ablate(args):
    from .experiments import ablation_configs, ablation_matrix, format_table

    cfg = resolve_config(args)
    seeds = _seeds(args.seeds)
    out = _output_dir(cfg, "ablate")
    with directory_lock(out):
        write_manifest(out, cfg, "ablate", {"seeds": list(seeds)})
        rows = ablation_matrix(cfg, seeds, output_dir=out / "runs",
                               progress=lambda r: log.info("%s: %.4f", r["row"], r["median_accuracy"]))
        configs = {name: c.to_dict() for name, c in ablation_configs(cfg)}
        for r in rows:
            r["config"] = configs[r["row"]]
        (out / "ablation.json").write_text(json.dumps(rows, indent=2))
        table = format_table(rows)
        (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_sweep(args):
    from .experiments import format_table, robustness_sweep, sweep_configs

    cfg = resolve_config(args)
    seeds = _seeds(args.seeds)
    out = _output_dir(cfg, "sweep")
    with directory_lock(out):
        write_manifest(out, cfg, "sweep", {"seeds": list(seeds)})
        rows = robustness_sweep(cfg, seeds=seeds, output_dir=out / "runs")
        configs = {name: c.to_dict() for name, c in sweep_configs(cfg)}
        for r in rows:
            r["config"] = configs[r["run"]]
        (out / "sweep.json").write_text(json.dumps(rows, indent=2))
        table = format_table(rows, label="run")
        (out / "sweep.txt").write_text(table + "\n")
    print(table)
    diverged = [r["run"] for r in rows if not r["finite"]]
    if diverged:
        print(f"non-finite losses in: {', '.join(diverged)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _report_source(args):
    """Networks and pair from a checkpoint (or raw data only); SSIM settings and seed from the command line."""
    from .trainer import load_pair

    cfg = resolve_config(args)
    if args.checkpoint:
        trainer, ck_cfg = _load_checkpoint(args)
        return trainer.nets, trainer.pair, ck_cfg.replace(ssim=cfg.ssim, seed=cfg.seed)
    return None, load_pair(cfg), cfg


def cmd_report(args):
    from .reporting import write_report

    nets, pair, cfg = _report_source(args)
    out = Path(args.output_dir or (Path(args.checkpoint) / "report"))
    paths = write_report(nets, pair, out, cfg.ssim, args.pairs_per_class, args.per_class, args.n_embed, cfg.seed)
    print((out / "ssim.txt").read_text(), end="")
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_ssim_report(args):
    from .reporting import format_ssim_table, ssim_table

    nets, pair, cfg = _report_source(args)
    table = ssim_table(pair, nets, cfg.ssim, args.pairs_per_class, args.per_class, cfg.seed)
    text = format_ssim_table(table, pair.name or cfg.setting, cfg.ssim)
    if args.output_dir:
        Path(args.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.output_dir) / "ssim.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_embed(args):
    from .reporting import embedding_records, embedding_scatter, write_embedding_csv

    nets, pair, cfg = _report_source(args)
    out = Path(args.output_dir or (Path(args.checkpoint) / "report" if args.checkpoint else "embedding"))
    out.mkdir(parents=True, exist_ok=True)
    records, meta = embedding_records(nets, pair, args.n_embed, cfg.seed)
    write_embedding_csv(records, out / "embedding.csv")
    embedding_scatter(records, out / "embedding.png", pair.name)
    (out / "embedding_meta.json").write_text(json.dumps(meta, indent=2))
    print(f"{len(records)} points -> {out / 'embedding.csv'}")
    return EXIT_OK


def build_parser():
    parser = ConfigArgumentParser(prog="bidir-adapt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ConfigArgumentParser)

    p = sub.add_parser("train", help="train a model and write checkpoints, metrics and a summary")
    _add_config_args(p)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="target accuracies of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-root")
    p.add_argument("--output-dir", "-o")
    p.add_argument("--export", metavar="PATH", help="per-sample predictions (.csv or .jsonl)")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("ablate", cmd_ablate, "train the five ablation configurations"),
                                 ("sweep", cmd_sweep, "loss-weight robustness sweep")):
        p = sub.add_parser(name, help=helptext)
        _add_config_args(p)
        p.add_argument("--seeds", default="0", help="comma-separated seeds (default: 0)")
        p.set_defaults(func=func)

    for name, func, helptext in (("report", cmd_report, "image grids, SSIM table and embedding"),
                                 ("ssim-report", cmd_ssim_report, "mean intra-class SSIM table"),
                                 ("embed", cmd_embed, "PCA + t-SNE embedding export")):
        p = sub.add_parser(name, help=helptext)
        _add_config_args(p)
        p.add_argument("--checkpoint", help="checkpoint directory (omit for raw data only)")
        p.add_argument("--pairs-per-class", type=int, default=1000)
        p.add_argument("--per-class", type=int, help="cap on images per class used for SSIM")
        p.add_argument("--n-embed", type=int, default=250, help="images per domain in the embedding")
        p.set_defaults(func=func)

    p = sub.add_parser("echo-config", help="print the merged configuration")
    _add_config_args(p)
    p.set_defaults(func=cmd_echo_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LockError, OSError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # anything unexpected is still a runtime failure, not a config error
        log.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
