"""Command-line entry point.

Subcommands: ingest | beats | spectrogram | pretrain | finetune |
crossval | evaluate | baseline | synth. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .errors import DataError, DivergenceError, EcgtlError
from .metrics import (
    ClinicalCovariates,
    MetricsReport,
    confusion,
    guideline_predict,
    linear_svm_fit,
    logistic_fit,
)
from .spectrogram import Fingerprint, export_png, log_magnitude, make_window, stft
from .synthdata import load_cohort_manifest, synth_crt_cohort, synth_wfdb_corpus
from .trainer import (
    Checkpoint,
    TrainConfig,
    crossval,
    finetune,
    load_checkpoint,
    make_folds,
    predict_patient,
    pretrain,
    save_checkpoint,
)

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_data_dir() -> str | None:
    return os.environ.get("ECGTL_DATA_DIR")


def _fingerprint(args) -> Fingerprint:
    h, w = (int(v) for v in args.size.split("x"))
    return Fingerprint(
        fs=args.fs, window_kind=args.window, window_len=args.window_len,
        hop=args.hop, image_height=h, image_width=w, channels=args.channels,
    )


def _add_fingerprint_flags(p):
    p.add_argument("--fs", type=float, default=360.0)
    p.add_argument("--window", choices=["hann", "hamming"], default="hann")
    p.add_argument("--window-len", type=int, default=512)
    p.add_argument("--hop", type=int, default=32)
    p.add_argument("--size", default="96x96", help="image HxW")
    p.add_argument("--channels", type=int, default=1)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--optimizer", choices=["adam", "sgd-momentum"], default="adam")
    p.add_argument("--seed", type=int, default=0)


def _add_common(p):
    p.add_argument("--workers", type=int, default=1,
                   help="data-stage parallelism (training is single-stream)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-worker bit-exact mode")


def build_parser() -> _Parser:
    parser = _Parser(prog="ecgtl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and verify WFDB records")
    p.add_argument("--data-dir", default=_default_data_dir(), required=_default_data_dir() is None)
    p.add_argument("--records", required=True, help="comma-separated record ids")
    p.add_argument("--strict-checksum", action="store_true")
    _add_common(p)

    p = sub.add_parser("beats", help="segment beats into 1.2-RR windows")
    p.add_argument("--data-dir", default=_default_data_dir(), required=_default_data_dir() is None)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--detect", action="store_true",
                   help="use the R-peak detector instead of annotations")
    _add_common(p)

    p = sub.add_parser("spectrogram", help="beat tensors -> image tensors")
    p.add_argument("--segments", required=True, help="output directory of `beats`")
    p.add_argument("--out", required=True)
    p.add_argument("--png-dir", help="also export grayscale PNGs here")
    _add_fingerprint_flags(p)
    _add_common(p)

    p = sub.add_parser("pretrain", help="train the beat classifier")
    p.add_argument("--data-dir", default=_default_data_dir(), required=_default_data_dir() is None)
    p.add_argument("--records", required=True)
    p.add_argument("--out", default="checkpoint")
    p.add_argument("--variant", type=int, choices=[18, 50, 101], default=18)
    p.add_argument("--max-beats", type=int)
    _add_fingerprint_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("finetune", help="transfer to the responder task")
    p.add_argument("--cohort", required=True, help="cohort.json path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="finetuned")
    p.add_argument("--segments-per-patient", type=int, default=4)
    p.add_argument(
        "--freeze", default="freeze_stem_and_stages_1_2",
        choices=["none", "freeze_stem_and_stages_1_2", "freeze_all_but_head"],
    )
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("crossval", help="k-fold cross-validated fine-tuning")
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", help="omit to train from scratch")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", default="crossval_report")
    p.add_argument("--variant", type=int, choices=[18, 50, 101], default=18)
    p.add_argument("--segments-per-patient", type=int, default=4)
    p.add_argument(
        "--freeze", default="freeze_stem_and_stages_1_2",
        choices=["none", "freeze_stem_and_stages_1_2", "freeze_all_but_head"],
    )
    _add_fingerprint_flags(p)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="patient-level predictions of a checkpoint")
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="evaluation")
    p.add_argument("--segments-per-patient", type=int, default=4)
    _add_common(p)

    p = sub.add_parser("baseline", help="guideline / logistic / SVM baselines")
    p.add_argument("--cohort", required=True)
    p.add_argument("--method", choices=["guideline", "logistic", "svm"], required=True)
    p.add_argument("--checkpoint", help="embedding source for logistic/svm")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="baseline_report")
    p.add_argument("--segments-per-patient", type=int, default=4)
    _add_common(p)

    p = sub.add_parser("synth", help="generate the surrogate cohort")
    p.add_argument("--n", type=int, default=71)
    p.add_argument("--prevalence", type=float, default=46 / 71)
    p.add_argument("--effect", type=float, default=1.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--wfdb-corpus", type=int, metavar="N_RECORDS",
                   help="also write N synthetic WFDB records for pretraining")
    _add_common(p)

    return parser


def _apply_determinism(args) -> None:
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _records(args) -> list[str]:
    return [r.strip() for r in args.records.split(",") if r.strip()]


def _train_config(args, freeze="freeze_stem_and_stages_1_2") -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        optimizer=args.optimizer, seed=args.seed,
        freeze_policy=getattr(args, "freeze", freeze),
    )


def cmd_ingest(args) -> int:
    from .wfdb_ingest import load_annotations, load_record

    summary = []
    for rec in _records(args):
        record = load_record(args.data_dir, rec, strict_checksum=args.strict_checksum)
        annotations = load_annotations(args.data_dir, rec)
        summary.append({
            "record": rec,
            "num_signals": record.header.num_signals,
            "sampling_rate_hz": record.header.sampling_rate_hz,
            "samples_per_signal": len(record.channels[0]),
            "beats": len(annotations),
        })
    print(json.dumps(summary, indent=2))
    return 0


def cmd_beats(args) -> int:
    from .pipeline import detected_beats_from_signal, labeled_beats_from_record
    from .wfdb_ingest import load_record

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index_lines = []
    for rec in _records(args):
        if args.detect:
            record = load_record(args.data_dir, rec)
            signal = record.to_millivolts(0)
            segments = detected_beats_from_signal(
                signal, record.header.sampling_rate_hz, source_id=rec
            )
        else:
            segments = labeled_beats_from_record(args.data_dir, rec)
        for i, seg in enumerate(segments):
            name = f"{rec}_{i:05d}.ecgt"
            tensorio.write_tensor(out / name, seg.samples.astype(np.float32))
            label = seg.label.name if seg.label is not None else "-"
            index_lines.append(f"{rec}\t{seg.r_index}\t{seg.rr_s:.6f}\t{label}\t{name}")
    (out / "segments.tsv").write_text("\n".join(index_lines) + "\n")
    print(f"wrote {len(index_lines)} segments to {out}")
    return 0


def cmd_spectrogram(args) -> int:
    from .spectrogram import to_image

    fp = _fingerprint(args)
    seg_dir = Path(args.segments)
    index = (seg_dir / "segments.tsv").read_text().strip().splitlines()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png_dir = Path(args.png_dir) if args.png_dir else None
    if png_dir:
        png_dir.mkdir(parents=True, exist_ok=True)
    window = make_window(fp.window_kind, fp.window_len)
    out_lines = []
    for line in index:
        rec, r_idx, rr, label, name = line.split("\t")
        samples = tensorio.read_tensor(seg_dir / name)
        spec = log_magnitude(
            stft(samples, window, fp.hop), fp.window_len, fp.hop, fp.fs, fp.window_kind
        )
        image = to_image(spec, fp.image_height, fp.image_width, fp.channels)
        img_name = name.replace(".ecgt", "_img.ecgt")
        tensorio.write_tensor(out / img_name, image)
        if png_dir:
            export_png(image, png_dir / name.replace(".ecgt", ".png"))
        out_lines.append(f"{rec}\t{r_idx}\t{rr}\t{label}\t{img_name}")
    (out / "images.tsv").write_text("\n".join(out_lines) + "\n")
    (out / "fingerprint.json").write_text(json.dumps(fp.to_dict(), indent=2) + "\n")
    print(f"wrote {len(out_lines)} images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .pipeline import build_pretrain_dataset

    fp = _fingerprint(args)
    dataset = build_pretrain_dataset(
        args.data_dir, _records(args), fp, max_beats=args.max_beats, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = pretrain(
        dataset, _train_config(args), variant=args.variant,
        log_path=out / "train_log.jsonl",
    )
    save_checkpoint(ckpt, out)
    print(f"checkpoint written to {out} (final loss {ckpt.metadata['final_loss']:.4f})")
    return 0


def cmd_finetune(args) -> int:
    from .pipeline import build_cohort_dataset

    ckpt = load_checkpoint(args.checkpoint)
    cohort = build_cohort_dataset(
        args.cohort, ckpt.fingerprint,
        segments_per_patient=args.segments_per_patient,
    )
    dataset = cohort.flatten(cohort.patient_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tuned = finetune(
        ckpt, dataset, _train_config(args), log_path=out / "train_log.jsonl"
    )
    save_checkpoint(tuned, out)
    print(f"fine-tuned checkpoint written to {out}")
    return 0


def cmd_crossval(args) -> int:
    from .pipeline import build_cohort_dataset
    from .report import write_report

    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    fp = ckpt.fingerprint if ckpt is not None else _fingerprint(args)
    cohort = build_cohort_dataset(
        args.cohort, fp, segments_per_patient=args.segments_per_patient
    )
    report = crossval(
        cohort, _train_config(args), checkpoint=ckpt,
        k=args.k, seed=args.seed, variant=args.variant,
    )
    name = "pretrained" if ckpt is not None else "scratch"
    write_report(
        {f"resnet_{name}": report}, args.out,
        extra={"seed": args.seed, "k": args.k, "fingerprint": fp.to_dict()},
    )
    print(report.summary_line(f"resnet_{name}"))
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import build_cohort_dataset

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.num_classes != 2:
        raise DataError("evaluate needs a fine-tuned binary checkpoint")
    cohort = build_cohort_dataset(
        args.cohort, ckpt.fingerprint,
        segments_per_patient=args.segments_per_patient,
    )
    model = ckpt.build_model()
    rows, preds, truths = [], [], []
    for pid in cohort.patient_ids:
        prob, cls = predict_patient(model, cohort.segments[pid])
        rows.append({"patient_id": pid, "probability": prob, "predicted": cls,
                     "label": cohort.patient_labels[pid]})
        preds.append(cls)
        truths.append(cohort.patient_labels[pid])
    report = MetricsReport.from_folds([confusion(preds, truths)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "predictions.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(report.summary_line("evaluated"))
    return 0


def cmd_baseline(args) -> int:
    from .model import extract_embedding
    from .pipeline import build_cohort_dataset
    from .report import write_report

    manifest = load_cohort_manifest(args.cohort)
    labels = {e.patient_id: int(e.label == "responder") for e in manifest.entries}

    if args.method == "guideline":
        preds, truths = [], []
        for e in manifest.entries:
            cov = ClinicalCovariates(**e.covariates)
            preds.append(guideline_predict(cov))
            truths.append(labels[e.patient_id])
        report = MetricsReport.from_folds([confusion(preds, truths)])
    else:
        if not args.checkpoint:
            raise DataError(f"{args.method} baseline needs --checkpoint for embeddings")
        ckpt = load_checkpoint(args.checkpoint)
        cohort = build_cohort_dataset(
            args.cohort, ckpt.fingerprint,
            segments_per_patient=args.segments_per_patient,
        )
        model = ckpt.build_model()
        features = {
            pid: extract_embedding(model, torch.from_numpy(cohort.segments[pid]))
            .mean(dim=0).numpy()
            for pid in cohort.patient_ids
        }
        plan = make_folds(labels, k=args.k, seed=args.seed)
        fit = logistic_fit if args.method == "logistic" else linear_svm_fit
        cms = []
        for fold in range(args.k):
            holdout = set(plan.fold_members(fold))
            train = [p for p in cohort.patient_ids if p not in holdout]
            clf = fit(
                np.stack([features[p] for p in train]),
                np.array([labels[p] for p in train]),
                seed=args.seed,
            )
            test = sorted(holdout)
            preds = clf.predict(np.stack([features[p] for p in test]))
            cms.append(confusion(preds, [labels[p] for p in test]))
        report = MetricsReport.from_folds(cms)

    write_report({args.method: report}, args.out, extra={"seed": args.seed})
    print(report.summary_line(args.method))
    return 0


def cmd_synth(args) -> int:
    manifest = synth_crt_cohort(
        n=args.n, prevalence=args.prevalence, effect=args.effect,
        seed=args.seed, out_dir=args.out,
    )
    print(f"wrote cohort of {len(manifest.entries)} patients to {args.out}")
    if args.wfdb_corpus:
        corpus_dir = Path(args.out) / "wfdb"
        records = synth_wfdb_corpus(corpus_dir, n_records=args.wfdb_corpus, seed=args.seed)
        print(f"wrote WFDB corpus {records[0]}..{records[-1]} to {corpus_dir}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "beats": cmd_beats,
    "spectrogram": cmd_spectrogram,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _apply_determinism(args)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EcgtlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
