"""Command-line entry point: ``caption2ds <command> ...``.

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 failed check.
Set ``CAPTION2DS_THREADS`` to cap the BLAS thread pool; ``--deterministic``
forces one thread and drops wall-clock timings from the run manifest.
"""

from __future__ import annotations

import functools
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint, interpret
from .autodiff import grad_check
from .cells import KINDS, CellConfig, init_params, parse_kind
from .checkpoint import CheckpointError
from .compare import MatchingError, compare, report_csv
from .corpus import CorpusError, load_features, parse_corpus_spec, synthetic_corpus
from .decoder import (DEFAULT_MAX_LEN, Intervention, UnsupportedIntervention, generate,
                      generate_batch, teacher_forced_nll)
from .tensor import ConfigError, RegionError
from .training import TrainConfig, build_vocabulary, evaluate, train

THREADS_ENV = "CAPTION2DS_THREADS"
EXIT_IO, EXIT_USAGE, EXIT_CHECK = 1, 2, 3


class CheckFailed(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None
    deterministic: bool
    out_dir: Path
    version: str = f"v{__version__}"
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)
    timings: dict[str, float] = field(default_factory=dict)

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def to_dict(self) -> dict:
        d = {"subcommand": self.subcommand, "version": self.version, "seed": self.seed,
             "deterministic": self.deterministic, "config": self.config,
             "outputs": sorted(self.outputs)}
        if not self.deterministic:
            d["timings"] = {**self.timings, "total_seconds": time.perf_counter() - self.started}
        return d

    def write(self) -> None:
        (self.out_dir / "manifest.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _threads(deterministic: bool) -> int | None:
    if deterministic:
        return 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise click.UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise click.UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def command(fn):
    """Map library exceptions onto the exit-code contract and apply thread limits."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            with threadpool_limits(limits=_threads(kwargs.get("deterministic", False))):
                return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (OSError, CorpusError, CheckpointError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except (ConfigError, RegionError, UnsupportedIntervention, MatchingError,
                interpret.EmptySupportError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        except CheckFailed as exc:
            click.echo(f"check failed: {exc}", err=True)
            sys.exit(EXIT_CHECK)

    return wrapper


def parse_dims(text: str, what: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"{what} must look like 16x7x7 or 500, got {text!r}") from None
    if not dims or min(dims) < 1:
        raise click.BadParameter(f"{what} extents must be positive, got {text!r}")
    return dims


def parse_region(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    try:
        region = tuple(int(p) for p in parts)
    except ValueError:
        region = ()
    if len(region) != 4:
        raise click.BadParameter(f"region must be x1,y1,x2,y2, got {text!r}")
    return region


def load_corpus(spec: str):
    synth = parse_corpus_spec(spec)
    if synth is not None:
        return synthetic_corpus(*synth)
    return load_features(spec)


def resolve_config(cell, state, kernel, pooling, activation, embed) -> CellConfig:
    kind = parse_kind(cell)
    return CellConfig(kind, parse_dims(state, "--state"), kernel=parse_dims(kernel, "--kernel"),
                      activation=activation, embed=None if embed is None else parse_dims(embed, "--embed"),
                      pooling=pooling)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


_deterministic = click.option("--deterministic/--no-deterministic", default=False,
                              help="Single thread, no timings in the manifest.")
_out = click.option("--out", "out_dir", default="out", show_default=True, help="Output directory.")


def _cell_options(fn):
    opts = [
        click.option("--cell", required=True, type=click.Choice(KINDS, case_sensitive=False)),
        click.option("--state", required=True, help="CxHxW for 2D cells, L for 1D cells."),
        click.option("--kernel", default="3x3", show_default=True),
        click.option("--pooling", type=click.Choice(["mean", "max"]), default="mean", show_default=True),
        click.option("--activation", type=click.Choice(["relu", "tanh"]), default=None,
                     help="Default relu for 2D cells, tanh for 1D cells."),
        click.option("--embed", default=None, help="Raw embedding CxxHxxWx (2D) or length (1D)."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _train_options(fn):
    opts = [
        click.option("--corpus", "corpus_spec", required=True, help="synth:N[:SEED] or a JSONL feature file."),
        click.option("--val", "val_spec", default=None, help="Validation corpus; default holds out 10%."),
        click.option("--threshold", default=6, show_default=True, help="Vocabulary count threshold."),
        click.option("--epochs", default=20, show_default=True),
        click.option("--stage1-epochs", default=20, show_default=True),
        click.option("--lr", default=4e-4, show_default=True),
        click.option("--lr2", default=1e-5, show_default=True),
        click.option("--batch-size", default=32, show_default=True),
        click.option("--max-len", default=DEFAULT_MAX_LEN, show_default=True),
        click.option("--patience", default=None, type=int),
        click.option("--precision", type=click.Choice(["float32", "float64"]), default="float32",
                     show_default=True),
        click.option("--seed", default=0, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _split(records, val_spec):
    if val_spec is not None:
        return list(records), load_corpus(val_spec)
    n_val = max(1, len(records) // 10)
    if len(records) < 2:
        return list(records), list(records)
    return list(records[:-n_val]), list(records[-n_val:])


def _train_config(kw) -> TrainConfig:
    return TrainConfig(lr=kw["lr"], stage1_epochs=kw["stage1_epochs"], lr2=kw["lr2"], epochs=kw["epochs"],
                       batch_size=kw["batch_size"], max_len=kw["max_len"], seed=kw["seed"],
                       precision=kw["precision"], patience=kw["patience"])


@click.group()
@click.version_option(__version__, prog_name="caption2ds")
def main():
    """2D-state recurrent caption decoders: train, caption, intervene, interpret."""


@main.command("train")
@_cell_options
@_train_options
@_out
@_deterministic
@command
def cmd_train(cell, state, kernel, pooling, activation, embed, corpus_spec, val_spec, threshold,
              out_dir, deterministic, **kw):
    """Train one decoder and write its checkpoint and epoch log."""
    cfg = resolve_config(cell, state, kernel, pooling, activation, embed)
    tc = _train_config(kw)
    records = load_corpus(corpus_spec)
    train_set, val_set = _split(records, val_spec)
    vocab = build_vocabulary([c for r in train_set for c in r.captions], threshold)
    from .decoder import DecoderModel

    model = DecoderModel.create(cfg, vocab, train_set[0].features.shape, seed=tc.seed)
    man = RunManifest("train", {"cell": cfg.to_dict(), "train": tc.to_dict(), "corpus": corpus_spec,
                                "val": val_spec, "threshold": threshold,
                                "parameters": model.count_parameters()},
                      tc.seed, deterministic, _out_dir(out_dir))
    t0 = time.perf_counter()
    model, log = train(model, train_set, tc, validation=val_set,
                       on_epoch=lambda e: click.echo(json.dumps(e), err=True))
    man.timings["train_seconds"] = time.perf_counter() - t0
    checkpoint.save(man.output("model.c2ds"), model, {"seed": tc.seed, "train": tc.to_dict()})
    man.output("train_log.json").write_text(json.dumps(log, indent=1) + "\n")
    man.write()
    click.echo(str(man.out_dir / "model.c2ds"))


def _load_model(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint.load(path)[0]


@main.command("caption")
@click.argument("checkpoint_path", metavar="CHECKPOINT")
@click.argument("features")
@click.option("--mode", type=click.Choice(["greedy", "sample", "beam"]), default="greedy", show_default=True)
@click.option("--width", default=3, show_default=True, help="Beam width.")
@click.option("--seed", default=0, show_default=True, help="Sampling seed.")
@click.option("--max-len", default=DEFAULT_MAX_LEN, show_default=True)
@click.option("--emit-trace", is_flag=True, help="Write one trace JSON per example.")
@_out
@_deterministic
@command
def cmd_caption(checkpoint_path, features, mode, width, seed, max_len, emit_trace, out_dir, deterministic):
    """Caption every example of FEATURES (synth:N[:SEED] or JSONL)."""
    model = _load_model(checkpoint_path)
    records = load_corpus(features)
    man = RunManifest("caption", {"checkpoint": str(checkpoint_path), "features": features, "mode": mode,
                                  "width": width, "max_len": max_len, "emit_trace": emit_trace},
                      seed, deterministic, _out_dir(out_dir))
    lines = []
    for i, rec in enumerate(records):
        ids, trace = generate(model, rec.features, mode=mode, max_len=max_len, seed=seed + i, width=width)
        lines.append(json.dumps({"id": rec.id, "caption": model.vocab.decode(ids)}))
        if emit_trace:
            man.output(f"traces/{rec.id}.json").write_text(json.dumps(trace.to_dict()) + "\n")
    man.output("captions.jsonl").write_text("\n".join(lines) + "\n")
    man.write()


@main.command("manipulate")
@click.argument("checkpoint_path", metavar="CHECKPOINT")
@click.argument("features")
@click.option("--region", default=None, help="Pool only over x1,y1,x2,y2 (one-based, inclusive).")
@click.option("--deactivate", type=int, default=None, help="Clamp this state channel to zero.")
@click.option("--max-len", default=DEFAULT_MAX_LEN, show_default=True)
@_out
@_deterministic
@command
def cmd_manipulate(checkpoint_path, features, region, deactivate, max_len, out_dir, deterministic):
    """Caption with and without a state intervention, side by side."""
    if (region is None) == (deactivate is None):
        raise click.UsageError("give exactly one of --region or --deactivate")
    intervention = Intervention(region=parse_region(region) if region else None, deactivate=deactivate)
    model = _load_model(checkpoint_path)
    records = load_corpus(features)
    V = np.stack([r.features for r in records])
    base, _ = generate_batch(model, V, max_len, with_traces=False)
    alt, _ = generate_batch(model, V, max_len, intervention, with_traces=False)
    man = RunManifest("manipulate", {"checkpoint": str(checkpoint_path), "features": features,
                                     "region": intervention.region, "deactivate": deactivate,
                                     "max_len": max_len}, None, deterministic, _out_dir(out_dir))
    lines = [json.dumps({"id": r.id, "baseline": model.vocab.decode(b), "intervened": model.vocab.decode(a)})
             for r, b, a in zip(records, base, alt)]
    man.output("paired.jsonl").write_text("\n".join(lines) + "\n")
    man.write()


@main.command("interpret")
@click.argument("checkpoint_path", metavar="CHECKPOINT")
@click.argument("corpus_spec", metavar="CORPUS")
@click.option("--word", "words", multiple=True, help="Word to analyse (repeatable).")
@click.option("--all-words", is_flag=True, help="Analyse every vocabulary word.")
@click.option("--lambda", "lam", default=interpret.DEFAULT_LAMBDA, show_default=True,
              help="Activation threshold fraction.")
@click.option("--images", default=3, show_default=True, help="Region maps per word.")
@click.option("--max-len", default=DEFAULT_MAX_LEN, show_default=True)
@_out
@_deterministic
@command
def cmd_interpret(checkpoint_path, corpus_spec, words, all_words, lam, images, max_len, out_dir, deterministic):
    """Word-channel association table plus activated-region maps."""
    if bool(words) == all_words:
        raise click.UsageError("give --word (one or more) or --all-words")
    model = _load_model(checkpoint_path)
    if not model.config.is_2d:
        raise UnsupportedIntervention("interpretation needs a 2D-state checkpoint")
    records = load_corpus(corpus_spec)
    V = np.stack([r.features for r in records])
    _, traces = generate_batch(model, V, max_len)
    vocab = model.vocab
    selected = list(vocab.words) if all_words else list(words)
    for w in selected:
        if w not in vocab:
            raise ValueError(f"word {w!r} is not in the vocabulary")
    table = interpret.association_table(traces, vocab, selected)
    if not all_words:
        for w in selected:
            if w not in table:
                raise interpret.EmptySupportError(w)
    man = RunManifest("interpret", {"checkpoint": str(checkpoint_path), "corpus": corpus_spec,
                                    "words": selected, "lambda": lam, "images": images, "max_len": max_len},
                      None, deterministic, _out_dir(out_dir))
    table.save(man.output("associations.json"))
    for w, entry in sorted(table.items()):
        wid = vocab.id_of(w)
        shown = 0
        for rec, trace in zip(records, traces):
            if shown == images:
                break
            if wid not in trace.tokens:
                continue
            step = trace.tokens.index(wid) + 1
            region = interpret.activated_region(trace, entry.argmax, step, lam=lam)
            interpret.emit_region_map(region, man.output(f"maps/{w}__{rec.id}.pgm"))
            shown += 1
    man.write()


@main.command("compare")
@click.option("--pairs", "pair_spec", default="rnn2ds:8x7x7,rnn2ds:16x7x7", show_default=True,
              help="Comma-separated cell:state entries for the 2D side.")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--test", "test_spec", default="synth:200:1", show_default=True)
@click.option("--tolerance", default=0.01, show_default=True)
@_train_options
@_out
@_deterministic
@command
def cmd_compare(pair_spec, seeds, test_spec, tolerance, corpus_spec, val_spec, threshold,
                out_dir, deterministic, **kw):
    """Train parameter-matched 2D / LSTM-1DS pairs and report BLEU-4 and ROUGE-L."""
    configs = []
    for entry in pair_spec.split(","):
        cell, _, state = entry.partition(":")
        cfg = CellConfig(parse_kind(cell), parse_dims(state, "--pairs"))
        if not cfg.is_2d:
            raise click.BadParameter(f"pair entries must be 2D cells, got {entry!r}")
        configs.append(cfg)
    seed_list = [int(s) for s in seeds.split(",")]
    tc = _train_config(kw)
    train_set, val_set = _split(load_corpus(corpus_spec), val_spec)
    test_set = load_corpus(test_spec)
    vocab = build_vocabulary([c for r in train_set for c in r.captions], threshold)
    man = RunManifest("compare", {"pairs": [c.to_dict() for c in configs], "seeds": seed_list,
                                  "corpus": corpus_spec, "val": val_spec, "test": test_spec,
                                  "threshold": threshold,
                                  "tolerance": tolerance, "train": tc.to_dict()},
                      None, deterministic, _out_dir(out_dir))
    t0 = time.perf_counter()
    report = compare(configs, seed_list, vocab, train_set, test_set, tc, tolerance,
                     progress=lambda msg: click.echo(msg, err=True), validation=val_set)
    man.timings["compare_seconds"] = time.perf_counter() - t0
    man.output("compare.json").write_text(json.dumps(report, indent=1) + "\n")
    man.output("compare.csv").write_text(report_csv(report))
    from .plotting import plot_comparison

    plot_comparison(report, man.output("compare.png"))
    man.write()
    for p in report["pairs"]:
        click.echo(f"{p['model_2d']} ({p['params_2d']}) bleu4={p['bleu4_2d_mean']:.4f}  vs  "
                   f"{p['model_1d']} ({p['params_1d']}) bleu4={p['bleu4_1d_mean']:.4f}  "
                   f"margin={p['bleu4_margin']:+.4f}")


GRADCHECK_TOLERANCE = 1e-4


def gradcheck_model(cfg: CellConfig, seed: int = 0, eps: float = 1e-5, n_coords: int = 200,
                    steps: int = 3):
    """Finite-difference check of a ``steps``-long unrolled decode of ``cfg``.

    Parameters are drawn at a well-scaled random point rather than the
    small initialisation, so no gradient sinks to rounding level.
    """
    vocab_size, feature_shape = 8, (3, *cfg.state[1:]) if cfg.is_2d else (3, 5, 5)
    rng = np.random.default_rng(seed)
    shapes = init_params(cfg, vocab_size, feature_shape, seed, np.float64)
    params = {}
    for name, p in shapes.items():
        fan = int(np.prod(p.shape[1:])) if p.ndim > 1 else 1
        params[name] = rng.uniform(-1, 1, size=p.shape) * 2 / np.sqrt(fan)
    V = rng.normal(size=(2, *feature_shape))
    inputs = rng.integers(3, vocab_size, size=(2, steps))
    inputs[:, 0] = 0
    targets = rng.integers(1, vocab_size, size=(2, steps))
    weights = np.full((2, steps), 1.0 / (2 * steps))
    return grad_check(lambda P: teacher_forced_nll(cfg, P, V, inputs, targets, weights), params,
                      eps=eps, n_coords=n_coords, seed=seed)


@main.command("gradcheck")
@_cell_options
@click.option("--eps", default=1e-5, show_default=True)
@click.option("--coords", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_out
@_deterministic
@command
def cmd_gradcheck(cell, state, kernel, pooling, activation, embed, eps, coords, seed, out_dir, deterministic):
    """Compare analytic gradients of a 3-step decode with central differences."""
    cfg = resolve_config(cell, state, kernel, pooling, activation, embed or ("2x7x7" if state.count("x") else None))
    report = gradcheck_model(cfg, seed, eps, coords)
    man = RunManifest("gradcheck", {"cell": cfg.to_dict(), "eps": eps, "coords": coords},
                      seed, deterministic, _out_dir(out_dir))
    passed = report.max_error < GRADCHECK_TOLERANCE
    result = {"passed": passed, "tolerance": GRADCHECK_TOLERANCE, "max_error": report.max_error,
              "per_param": report.per_param, "coordinates": report.coordinates,
              "skipped_kinks": report.skipped_kinks}
    man.output("gradcheck.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    man.write()
    for name, err in sorted(report.per_param.items()):
        click.echo(f"{name:28s} {err:.2e}")
    click.echo(f"max relative error {report.max_error:.2e}: {'PASS' if passed else 'FAIL'}")
    if not passed:
        raise CheckFailed(f"max relative error {report.max_error:.2e} >= {GRADCHECK_TOLERANCE:.0e}")


if __name__ == "__main__":
    main()
