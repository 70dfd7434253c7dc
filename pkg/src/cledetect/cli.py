"""Command-line entry point.

Subcommands cover the whole workflow: generate synthetic data, inspect
median statistics, preprocess frames, train either classifier, run the
cross-validation experiments, and export class activation maps. Every
command prints a one-line JSON summary to stdout and confines its side
effects to the chosen output directory; input datasets are never
modified. Exit codes: 0 success, 1 validation or runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREADS_ENV = "CLEDETECT_THREADS"


def _pin_threads() -> None:
    """Propagate the thread-count request to the BLAS runtimes.

    Must run before numpy is first imported, which is why the heavy
    imports below all live inside the command functions.
    """
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise SystemExit(f"{THREADS_ENV} must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cledetect", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a seeded two-domain synthetic dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--fov-radius", type=float, default=60.0)
    g.add_argument("--patients-per-domain", type=int, default=4)
    g.add_argument("--frames-per-patient", type=int, default=10)

    s = sub.add_parser("stats", help="median raw value statistics and histograms")
    s.add_argument("--dataset", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--by-site", action="store_true", default=True,
                   help="group histograms by anatomical site (default)")
    s.add_argument("--bins", type=int, default=32)

    pp = sub.add_parser("preprocess", help="write FOV-extrapolated copies of frames")
    pp.add_argument("--dataset", required=True, type=Path)
    pp.add_argument("--out", required=True, type=Path)
    pp.add_argument("--frame", default=None, help="frame id; default processes all frames")
    pp.add_argument("--size", type=int, default=None, help="resize edge length after extrapolation")

    t = sub.add_parser("train", help="train one classifier on a patient pool")
    t.add_argument("--dataset", required=True, type=Path)
    t.add_argument("--method", required=True, choices=("ppf", "image"))
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--domain", choices=("oc", "vc", "all"), default="all",
                   help="restrict the training pool to one side")
    t.add_argument("--patch-size", type=int, default=None)
    t.add_argument("--stride", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)

    e = sub.add_parser("eval", help="run a cross-validation experiment end to end")
    e.add_argument("--dataset", required=True, type=Path)
    e.add_argument("--experiment", required=True,
                   help="oc | vc | oc2vc | vc2oc | joint (long ids also accepted)")
    e.add_argument("--method", required=True, choices=("ppf", "image"))
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--patch-size", type=int, default=None)
    e.add_argument("--stride", type=int, default=None)
    e.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    c = sub.add_parser("cam", help="export the class activation map of one frame")
    c.add_argument("--dataset", required=True, type=Path)
    c.add_argument("--checkpoint", required=True, type=Path)
    c.add_argument("--frame", required=True)
    c.add_argument("--out", required=True, type=Path)
    return p


def _ppf_config(args):
    from .harness import DESK_PPF_CONFIG
    import dataclasses

    over = {}
    if getattr(args, "patch_size", None) is not None:
        over["patch_size"] = args.patch_size
    if getattr(args, "stride", None) is not None:
        over["stride"] = args.stride
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    return dataclasses.replace(DESK_PPF_CONFIG, **over) if over else DESK_PPF_CONFIG


def _training_frames(ds, domain: str):
    from .data import DOMAIN_OC, DOMAIN_VC
    from .harness import side_patients

    if domain == "all":
        patients = ds.patients()
    else:
        patients = side_patients(ds, DOMAIN_OC if domain == "oc" else DOMAIN_VC)
    return [f for p in patients for f in ds.frames(patient=p)], patients


def cmd_gen(args) -> dict:
    from .data import Dataset, SynthSpec, generate_synthetic

    spec = SynthSpec(
        seed=args.seed,
        size=args.size,
        fov_radius=args.fov_radius,
        patients_per_domain=args.patients_per_domain,
        frames_per_patient=args.frames_per_patient,
    )
    manifest = generate_synthetic(spec, args.out)
    ds = Dataset.open(manifest)
    return {
        "manifest": str(manifest),
        "frames": len(ds.manifest.records),
        "patients": ds.patients(),
        "domains": ds.domains(),
    }


def cmd_stats(args) -> dict:
    from .data import Dataset
    from .fov import default_log_edges, median_histogram, median_raw_value
    from .report import plot_median_histogram

    ds = Dataset.open(args.dataset)
    frames = ds.frames()
    args.out.mkdir(parents=True, exist_ok=True)
    lines = ["frame_id\tpatient_id\tsite\tdomain\tlabel\tmedian"]
    for f in frames:
        lines.append("\t".join([
            f.frame_id, f.patient_id, f.site, f.domain, f.label,
            repr(median_raw_value(f)),
        ]))
    (args.out / "medians.tsv").write_text("\n".join(lines) + "\n")
    hists = median_histogram(frames, default_log_edges(nbins=args.bins))
    hlines = ["site\tbin_low\tbin_high\tfraction"]
    for site in sorted(hists):
        h = hists[site]
        for k in range(len(h.counts)):
            hlines.append(f"{site}\t{h.edges[k]!r}\t{h.edges[k + 1]!r}\t{h.counts[k]!r}")
    (args.out / "median_histogram.tsv").write_text("\n".join(hlines) + "\n")
    fig = plot_median_histogram(hists, args.out / "median_histogram.png")
    return {
        "frames": len(frames),
        "sites": {
            site: {
                "n_frames": h.n_frames,
                "mass": float(h.counts.sum() + h.underflow),
            }
            for site, h in sorted(hists.items())
        },
        "medians_tsv": str(args.out / "medians.tsv"),
        "histogram_tsv": str(args.out / "median_histogram.tsv"),
        "figure": str(fig),
    }


def cmd_preprocess(args) -> dict:
    import numpy as np

    from .data import Dataset, write_pgm
    from .errors import ConfigError
    from .fov import circular_extrapolate, resize_bilinear

    ds = Dataset.open(args.dataset)
    frames = ds.frames()
    if args.frame is not None:
        frames = [f for f in frames if f.frame_id == args.frame]
        if not frames:
            raise ConfigError(f"frame {args.frame!r} not in dataset")
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    for f in frames:
        raw = circular_extrapolate(f).raw
        if args.size is not None:
            raw = np.clip(
                np.rint(resize_bilinear(raw, args.size, args.size)), 0, 65535
            ).astype(np.uint16)
        out = args.out / f"{f.frame_id}.pgm"
        write_pgm(out, raw)
        written.append(str(out))
    return {"frames": len(written), "files": written}


def cmd_train(args) -> dict:
    import numpy as np

    from .data import Dataset
    from .harness import DESK_IMAGE_CONFIG
    from .patches import save_ppf_model, train_ppf
    from .wholeimage import save_image_model, train_image

    ds = Dataset.open(args.dataset)
    frames, patients = _training_frames(ds, args.domain)
    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0]))
    if args.method == "ppf":
        cfg = _ppf_config(args)
        model, tlog = train_ppf(frames, cfg, rng)
        save_ppf_model(args.out / "model.ckpt", model, cfg, seed=args.seed)
    else:
        cfg = DESK_IMAGE_CONFIG
        model, tlog = train_image(frames, cfg, rng)
        save_image_model(args.out / "model.ckpt", model, meta={"seed": args.seed})
    log_dict = tlog.to_dict()
    (args.out / "train_log.json").write_text(json.dumps(log_dict, indent=2, sort_keys=True) + "\n")
    (args.out / "config.json").write_text(json.dumps(
        {"method": args.method, "seed": args.seed, "domain": args.domain,
         "patients": patients, "config": cfg.__dict__},
        indent=2, sort_keys=True, default=list) + "\n")
    return {
        "checkpoint": str(args.out / "model.ckpt"),
        "method": args.method,
        "patients": patients,
        "epochs": len(log_dict["epochs"]),
        "final_train_loss": log_dict["epochs"][-1]["train_loss"],
    }


def cmd_eval(args) -> dict:
    from .data import Dataset
    from .harness import execute_run
    from .report import render_run_figures

    ds = Dataset.open(args.dataset)
    rr = execute_run(
        ds,
        args.experiment,
        args.method,
        args.seed,
        args.out,
        threshold=args.threshold,
        ppf_config=_ppf_config(args),
        dataset_path=args.dataset,
    )
    figures = []
    if not args.no_figures:
        figures = [str(p) for p in render_run_figures(
            rr.run_dir, rr.outcome.result_vector, rr.metrics, args.threshold)]
    m = rr.metrics
    return {
        "run_dir": str(rr.run_dir),
        "experiment": rr.outcome.plan.experiment_id,
        "method": rr.outcome.plan.method,
        "seed": rr.outcome.seed,
        "n_frames": m.n,
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "roc_auc": m.roc_auc,
        "figures": figures,
    }


def cmd_cam(args) -> dict:
    import numpy as np

    from .data import Dataset
    from .errors import ConfigError
    from .frame import CLASS_INDEX, LABEL_CARCINOMA
    from .report import render_cam
    from .wholeimage import evaluate, load_image_model, masked_gap, prepare_model_input

    ds = Dataset.open(args.dataset)
    matches = [f for f in ds.frames() if f.frame_id == args.frame]
    if not matches:
        raise ConfigError(f"frame {args.frame!r} not in dataset")
    model, meta = load_image_model(args.checkpoint)
    prepared = prepare_model_input(matches[0], model.contract.input_size)
    res = evaluate(model, prepared)
    paths = render_cam(prepared, res.cam, Path(args.out) / args.frame)
    # the masked mean of the map must reproduce the classifier logits
    recovered = masked_gap(res.cam.scores, res.cam.mask)
    drift = float(np.max(np.abs(recovered - res.logits)))
    return {
        "frame": args.frame,
        "p_carcinoma": float(res.probabilities[CLASS_INDEX[LABEL_CARCINOMA]]),
        "logits": [float(v) for v in res.logits],
        "cam_consistency_max_abs_diff": drift,
        **{k: str(v) for k, v in paths.items()},
    }


COMMANDS = {
    "gen": cmd_gen,
    "stats": cmd_stats,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "cam": cmd_cam,
}


def main(argv=None) -> int:
    _pin_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    from .errors import CleError

    try:
        summary = COMMANDS[args.command](args)
    except CleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
