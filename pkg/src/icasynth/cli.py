"""Command-line interface wiring the library into reproducible runs.

Every command takes its randomness from `--seed` only, writes results to
paths named by flags (or standard output), and keeps progress messages
on the error stream. Exit codes: 0 success, 1 validation/usage error,
2 numeric or runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .datamodel import (
    load_labeled_dataset,
    load_labels,
    load_matrix,
    load_multimodal_dataset,
    quality_control,
    save_labels,
    save_matrix,
)
from .errors import IcasynthError, ValidationError
from .generator import BatchSpec, fit_generator, generator_stream, load_generator_model, save_generator_model
from .ica import fit_ica, save_ica_model
from .mlp import (
    MlpConfig,
    fine_tune,
    init_mlp,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
    transfer_weights,
)
from .numerics import RngStream
from .pipeline import (
    ExperimentConfig,
    PhantomSpec,
    auc,
    phantom_generate,
    run_experiment,
    run_unimodal_pretraining,
)
from .rvgen import RvGeneratorKind


def _progress(message):
    print(message, file=sys.stderr)


def _require(condition, message):
    if not condition:
        raise ValidationError(message)


def _int_tuple(text, flag):
    try:
        return tuple(int(part) for part in str(text).split(","))
    except ValueError:
        raise ValidationError(f"{flag} expects comma-separated integers, got {text!r}") from None


def _float_tuple(text, flag):
    try:
        return tuple(float(part) for part in str(text).split(","))
    except ValueError:
        raise ValidationError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _bool_flag(text, flag):
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValidationError(f"{flag} expects true or false, got {text!r}")


def _rv_kind(name, bins):
    if name == "mvn":
        return RvGeneratorKind.mvn()
    if name == "rejection":
        _require(bins >= 1, f"--bins must be >= 1, got {bins}")
        return RvGeneratorKind.rejection(bin_count=bins)
    raise ValidationError(f"--rv-kind must be mvn or rejection, got {name!r}")


def _model_dir(path):
    # accept either the model directory or its manifest.json
    if os.path.basename(path) == "manifest.json":
        return os.path.dirname(path) or "."
    return path


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def _cmd_phantom(args):
    m = _int_tuple(args.m, "--m")
    effects = _float_tuple(args.effects, "--effects")
    components = _int_tuple(args.effect_components, "--effect-components")
    if len(m) == 1:
        m = m * len(effects)
    spec = PhantomSpec(n_per_class=args.n_per_class, n_features=m,
                       n_sources=args.sources, effect_sizes=effects,
                       effect_components=components, noise_sigma=args.noise)
    # same stream tag as the experiment command's in-memory phantom, so
    # a given seed names the same cohort through either path
    dataset = phantom_generate(spec, RngStream(args.seed).split("phantom-data"))
    os.makedirs(args.out_dir, exist_ok=True)
    ext = args.format
    for name in dataset.names:
        save_matrix(dataset.get(name).data,
                    os.path.join(args.out_dir, f"{name}.{ext}"), args.format)
    save_labels(dataset.subject_ids, dataset.labels,
                os.path.join(args.out_dir, "labels.csv"))
    _progress(f"wrote {len(dataset.names)} modalities for "
              f"{dataset.n_subjects} subjects to {args.out_dir}")


def _cmd_qc(args):
    data = load_matrix(args.data, args.format)
    if args.labels is not None:
        ids, _ = load_labels(args.labels)
        _require(len(ids) == data.shape[0],
                 f"labels list {len(ids)} subjects but data has {data.shape[0]} rows")
    else:
        ids = tuple(f"row{i:04d}" for i in range(data.shape[0]))
    report = quality_control(data, sigmas=args.sigmas)
    discarded = set(report.discarded)
    lines = ["subject_id,mean_correlation,status"]
    for i, subject in enumerate(ids):
        status = "discarded" if i in discarded else "kept"
        lines.append(f"{subject},{report.mean_correlation[i]!r},{status}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    _progress(f"threshold {report.threshold!r}: kept {len(report.kept)}, "
              f"discarded {len(report.discarded)}")


def _cmd_ica_fit(args):
    _require(args.c >= 1, f"--c must be >= 1, got {args.c}")
    x = load_matrix(args.data, args.format)
    model = fit_ica(x, args.c, max_iter=args.max_iter, tol=args.tol,
                    rng=RngStream(args.seed))
    save_ica_model(model, args.out)
    info = model.convergence
    _progress(f"ica: converged={info.converged} iterations={info.iterations} "
              f"final_delta={info.final_delta!r}; model saved to {args.out}")


def _cmd_gen_fit(args):
    _require(args.c >= 1, f"--c must be >= 1, got {args.c}")
    dataset = load_labeled_dataset(args.data, args.labels, args.format)
    kind = _rv_kind(args.rv_kind, args.bins)
    gen = fit_generator(dataset, args.c, kind, RngStream(args.seed),
                        max_iter=args.max_iter, tol=args.tol)
    save_generator_model(gen, args.out)
    _progress(f"generator ({kind.name}) fitted on {dataset.n_subjects} subjects "
              f"with c={args.c}; saved to {args.out}")


def _cmd_gen_sample(args):
    _require(args.batches >= 1, f"--batches must be >= 1, got {args.batches}")
    gen = load_generator_model(_model_dir(args.model))
    spec = BatchSpec(args.hc, args.sz, args.batches)
    os.makedirs(args.out_dir, exist_ok=True)
    rng = RngStream(args.seed)
    ext = args.format
    for batch in generator_stream(gen, spec, rng):
        stem = f"batch_{batch.batch_index:04d}"
        save_matrix(batch.data, os.path.join(args.out_dir, f"{stem}.{ext}"),
                    args.format)
        ids = tuple(f"{stem}_r{j:04d}" for j in range(batch.data.shape[0]))
        save_labels(ids, batch.labels, os.path.join(args.out_dir, f"{stem}_labels.csv"))
    _progress(f"wrote {args.batches} batches of {spec.batch_size} rows to {args.out_dir}")


def _cmd_pretrain(args):
    _require(args.c >= 1, f"--c must be >= 1, got {args.c}")
    dataset = load_labeled_dataset(args.data, args.labels, args.format)
    kind = _rv_kind(args.rv_kind, args.bins)
    config = MlpConfig.unimodal(dataset.n_features,
                                branch_hidden=_int_tuple(args.hidden, "--hidden"),
                                dropout_rate=args.dropout,
                                learning_rate=args.lr)
    result = run_unimodal_pretraining(
        dataset, np.arange(dataset.n_subjects), c=args.c, rv_kind=kind,
        batch_spec=BatchSpec(args.hc, args.sz, args.batches),
        rng=RngStream(args.seed), mlp_config=config,
        ica_max_iter=args.max_iter, ica_tol=args.tol)
    save_checkpoint(result.model, args.out)
    _progress(f"pre-trained on {result.trace.n_steps} synthetic batches; "
              f"final loss {result.trace.losses[-1]!r}; checkpoint saved to {args.out}")


def _load_modalities(data_paths, labels_path, format):
    entries = [(f"mod{i + 1}", path, labels_path)
               for i, path in enumerate(data_paths)]
    return load_multimodal_dataset(entries, format)


def _cmd_train(args):
    dataset = _load_modalities(args.data, args.labels, args.format)
    xs = [dataset.get(name).data for name in dataset.names]
    y = dataset.labels
    rng = RngStream(args.seed)
    checkpoints = args.checkpoint or []
    hidden = _int_tuple(args.hidden, "--hidden")
    merged = _int_tuple(args.merged_hidden, "--merged-hidden")
    if len(checkpoints) == 0:
        if len(xs) == 1:
            config = MlpConfig.unimodal(xs[0].shape[1], branch_hidden=hidden,
                                        dropout_rate=args.dropout,
                                        learning_rate=args.lr)
        else:
            config = MlpConfig.multimodal(tuple(x.shape[1] for x in xs),
                                          branch_hidden=hidden, merged_hidden=merged,
                                          dropout_rate=args.dropout,
                                          learning_rate=args.lr)
        model = init_mlp(config, rng.split("init"))
    elif len(checkpoints) == 1 and len(xs) == 1:
        model, _ = load_checkpoint(_model_dir(checkpoints[0]))
    elif len(checkpoints) == len(xs):
        unimodal = [load_checkpoint(_model_dir(path))[0] for path in checkpoints]
        config = MlpConfig.multimodal(tuple(x.shape[1] for x in xs),
                                      branch_hidden=hidden, merged_hidden=merged,
                                      dropout_rate=args.dropout,
                                      learning_rate=args.lr)
        model = transfer_weights(unimodal, config, rng.split("transfer"),
                                 mode=args.transfer)
    else:
        raise ValidationError(
            f"got {len(checkpoints)} checkpoints for {len(xs)} modalities; "
            "pass none, one (single modality), or one per modality")
    result = fine_tune(model, xs if len(xs) > 1 else xs[0], y,
                       val_fraction=args.val_fraction, epochs=args.epochs,
                       eval_every=args.eval_every, batch_size=args.batch_size,
                       rng=rng.split("fine-tune"))
    save_checkpoint(result.model, args.out, epoch=result.best_epoch,
                    val_loss=result.best_val_loss)
    _progress(f"fine-tuned {args.epochs} epochs; best epoch {result.best_epoch} "
              f"(validation loss {result.best_val_loss!r}); saved to {args.out}")


def _cmd_evaluate(args):
    dataset = _load_modalities(args.data, args.labels, args.format)
    model, _ = load_checkpoint(_model_dir(args.checkpoint))
    xs = [dataset.get(name).data for name in dataset.names]
    scores = predict_proba(model, xs if len(xs) > 1 else xs[0])
    value = auc(scores, dataset.labels)
    if args.out:
        lines = ["subject_id,label,score"]
        for subject, label, score in zip(dataset.subject_ids, dataset.labels, scores):
            lines.append(f"{subject},{int(label)},{score!r}")
        _write_text(args.out, "\n".join(lines) + "\n")
        _progress(f"per-subject scores written to {args.out}")
    sys.stdout.write(f"auc {value!r}\n")


_CONFIG_FIELDS = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}


def _experiment_config(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValidationError(f"{args.config}: config must be a JSON object")
    extra = {"modalities", "format", "phantom"}
    unknown = set(raw) - _CONFIG_FIELDS - extra
    if unknown:
        raise ValidationError(f"{args.config}: unknown config keys {sorted(unknown)}")
    fields = {k: v for k, v in raw.items() if k in _CONFIG_FIELDS}
    if "batch_spec" in fields:
        spec = fields["batch_spec"]
        if not (isinstance(spec, dict) and set(spec) == {"hc", "sz", "batches"}):
            raise ValidationError('batch_spec must be {"hc": .., "sz": .., "batches": ..}')
        fields["batch_spec"] = BatchSpec(spec["hc"], spec["sz"], spec["batches"])
    # flags override file values
    overrides = {
        "seed": args.seed, "c": args.c, "bins": args.bins, "folds": args.folds,
        "epochs": args.epochs, "eval_every": args.eval_every,
        "learning_rate": args.lr, "transfer": args.transfer,
        "parallel_folds": args.parallel_folds,
    }
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    if args.rv_kind is not None:
        fields["rv_kinds"] = tuple(args.rv_kind)
    if args.transductive_ica is not None:
        fields["transductive"] = _bool_flag(args.transductive_ica, "--transductive-ica")
    if args.batches is not None:
        base = fields.get("batch_spec", BatchSpec(10, 10, 1000))
        fields["batch_spec"] = BatchSpec(base.hc_per_batch, base.sz_per_batch,
                                         args.batches)
    config = ExperimentConfig(**fields)
    return raw, config


def _cmd_experiment(args):
    raw, config = _experiment_config(args)
    if "phantom" in raw:
        spec_fields = dict(raw["phantom"])
        for key in ("n_features", "effect_sizes", "effect_components"):
            if key in spec_fields:
                spec_fields[key] = tuple(spec_fields[key])
        spec = PhantomSpec(**spec_fields)
        _progress(f"generating phantom data ({spec.n_subjects} subjects, "
                  f"{spec.n_modalities} modalities)")
        dataset = phantom_generate(spec, RngStream(config.seed).split("phantom-data"))
    else:
        modalities = raw.get("modalities")
        _require(isinstance(modalities, list) and modalities,
                 "config needs a non-empty modalities list (or a phantom block)")
        entries = []
        for entry in modalities:
            _require(isinstance(entry, dict) and {"name", "data", "labels"} <= set(entry),
                     "each modality needs name, data and labels keys")
            entries.append((entry["name"], entry["data"], entry["labels"]))
        dataset = load_multimodal_dataset(entries, raw.get("format", "csv"))
    _progress(f"running {config.folds}-fold experiment "
              f"(seed {config.seed}, c={config.c})")
    report = run_experiment(dataset, config)
    _write_text(args.out, report.to_csv_text())
    sys.stdout.write(report.to_table_text())
    _progress(f"report written to {args.out}")


# ---------------------------------------------------------------------------
# parser


def _add_common(parser, *, seed=True, format=True):
    if seed:
        parser.add_argument("--seed", type=int, default=0,
                            help="seed for all randomness (default 0)")
    if format:
        parser.add_argument("--format", choices=("csv", "bin"), default="csv",
                            help="matrix file format (default csv)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="icasynth",
        description="Synthetic-data pre-training toolkit: ICA generators, "
                    "online MLP training, and a cross-validated AUC harness.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("phantom", help="generate a ground-truth phantom dataset")
    _add_common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-per-class", type=int, default=80)
    p.add_argument("--m", default="2000,2000", help="features per modality (comma list)")
    p.add_argument("--sources", type=int, default=10)
    p.add_argument("--effects", default="1.0,1.5", help="loading shift per modality")
    p.add_argument("--effect-components", default="0,1",
                   help="affected source index per modality")
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("qc", help="mean-correlation subject quality control")
    _add_common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="labels csv naming the subjects")
    p.add_argument("--sigmas", type=float, default=2.0)
    p.add_argument("--out", help="report path (default: standard output)")
    p.set_defaults(func=_cmd_qc)

    p = sub.add_parser("ica-fit", help="fit an ICA decomposition of a matrix")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--c", type=int, required=True, help="number of components")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True, help="model output directory")
    p.set_defaults(func=_cmd_ica_fit)

    p = sub.add_parser("gen-fit", help="fit a class-conditional generator")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--rv-kind", default="mvn")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True, help="model output directory")
    p.set_defaults(func=_cmd_gen_fit)

    p = sub.add_parser("gen-sample", help="draw synthetic batches from a generator")
    _add_common(p)
    p.add_argument("--model", required=True, help="generator model directory")
    p.add_argument("--batches", type=int, required=True)
    p.add_argument("--hc", type=int, default=10, help="HC rows per batch")
    p.add_argument("--sz", type=int, default=10, help="SZ rows per batch")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_gen_sample)

    p = sub.add_parser("pretrain", help="train a fresh net on synthetic batches")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--c", type=int, default=20)
    p.add_argument("--rv-kind", default="mvn")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--hc", type=int, default=10)
    p.add_argument("--sz", type=int, default=10)
    p.add_argument("--hidden", default="20,20,20")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune a net on labeled data")
    _add_common(p)
    p.add_argument("--data", action="append", required=True,
                   help="data matrix; repeat for extra modalities")
    p.add_argument("--labels", required=True)
    p.add_argument("--checkpoint", action="append",
                   help="starting checkpoint; repeat to fuse one per modality")
    p.add_argument("--transfer", choices=("full", "input-only"), default="full")
    p.add_argument("--hidden", default="20,20,20")
    p.add_argument("--merged-hidden", default="20")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="report a checkpoint's AUC on a dataset")
    _add_common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", help="optional per-subject score csv")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("experiment", help="run the cross-validated comparison")
    p.add_argument("--config", required=True, help="json config file")
    p.add_argument("--out", required=True, help="report csv path")
    p.add_argument("--seed", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--rv-kind", action="append",
                   help="generator kind; repeat for several")
    p.add_argument("--bins", type=int)
    p.add_argument("--batches", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--transfer", choices=("full", "input-only"))
    p.add_argument("--transductive-ica", choices=("true", "false"))
    p.add_argument("--parallel-folds", type=int)
    p.set_defaults(func=_cmd_experiment)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        args.func(args)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IcasynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
