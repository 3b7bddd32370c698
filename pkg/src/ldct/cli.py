"""Single entry point: simulate, train, enhance, evaluate, study.

Every random operation takes an explicit --seed, so any artifact is
reproducible from the command line alone. LDCT_THREADS caps the BLAS
worker count; it must be read before numpy spins up its thread pools,
hence the environment block ahead of the imports.
"""
from __future__ import annotations

import os

_threads = os.environ.get("LDCT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ctsim, dataio, metrics, readerstudy, trainkit, unet
from .errors import InfinitePsnrError, LdctError
from .nnops import make_rng

ERROR_PREFIX = "ldct-error:"


def _fail(message: str) -> int:
    print(f"{ERROR_PREFIX} {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    if args.count < 1:
        return _fail(f"--count must be >= 1, got {args.count}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dose = ctsim.DoseModel(args.n0)
    bins = args.bins if args.bins else args.size
    pairs = []
    for i in range(args.count):
        pid = f"p{i:04d}"
        rng = make_rng(args.seed + i)  # per-pair derived seed
        phantom = ctsim.random_phantom(rng, size=args.size, pixel_spacing=args.spacing)
        full, quarter, truth = ctsim.simulate_pair(
            phantom, dose, n_angles=args.angles, n_bins=bins, rng=rng)
        dataio.save_image(full.astype(np.float32), out / f"{pid}_full.f32")
        dataio.save_image(quarter.astype(np.float32), out / f"{pid}_quarter.f32")
        dataio.save_image(truth.astype(np.float32), out / f"{pid}_truth.f32")
        pairs.append(dataio.PairEntry(
            id=pid, full_path=f"{pid}_full.f32", quarter_path=f"{pid}_quarter.f32",
            truth_path=f"{pid}_truth.f32"))

    ids = [e.id for e in pairs]
    train_ids, _ = trainkit.split_train_val(ids, args.val_frac, args.seed)
    train_set = set(train_ids)
    for entry in pairs:
        entry.split = "train" if entry.id in train_set else "val"
    manifest = dataio.PairManifest(pairs=pairs)
    manifest.base_dir = out
    manifest.normalization = dataio.compute_normalization(manifest)
    dataio.save_manifest(manifest, out / "manifest.json")
    print(f"wrote {args.count} pairs to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    first = dataio.load_image(manifest.resolve(manifest.pairs[0].quarter_path))
    size = first.shape[0]
    net_cfg = unet.UNetConfig(depth=args.depth, base_channels=args.base_channels,
                              bottleneck_features=args.bottleneck, input_size=size)
    params = unet.build(net_cfg, make_rng(args.seed))
    train_cfg = trainkit.TrainConfig(
        learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
        val_fraction=args.val_frac, seed=args.seed)

    def progress(record):
        print(f"epoch {record.epoch} train_mse {record.train_mse:.6g} "
              f"val_mse {record.val_mse:.6g}", file=sys.stderr)

    params, curve = trainkit.fit(params, manifest, train_cfg,
                                 callback=progress, checkpoint_dir=out)
    curve.save_csv(out / "loss_curve.csv")
    # frozen split + stats, rewritten so the copy resolves from the run dir
    dataio.save_manifest(dataio.rebase_manifest(manifest, out), out / "manifest_used.json")
    return 0


# ---------------------------------------------------------------------------
# enhance


def _enhance_one(params, img01: np.ndarray) -> np.ndarray:
    y, _ = unet.forward(params, img01[None, None, :, :].astype(np.float32))
    return y[0, 0]


def cmd_enhance(args) -> int:
    params = unet.load_checkpoint(args.ckpt)
    div = 1 << params.config.depth
    input_path = Path(args.input)

    if input_path.suffix == ".json":  # batch mode over a manifest
        manifest = dataio.load_manifest(input_path)
        if manifest.normalization is None:
            return _fail("manifest carries no normalization record; train first")
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        for entry in manifest.pairs:
            quarter, _ = dataio.load_pair_unit(manifest, entry)
            if quarter.shape[0] % div or quarter.shape[1] % div:
                return _fail(
                    f"pair {entry.id}: size {quarter.shape} not divisible by {div}; "
                    f"center_crop the images to a multiple of {div} first")
            enhanced01 = _enhance_one(params, quarter)
            restored = dataio.denormalize(enhanced01, manifest.normalization)
            dataio.save_image(restored.astype(np.float32), out_dir / f"{entry.id}.f32")
        print(f"enhanced {len(manifest.pairs)} images into {out_dir}", file=sys.stderr)
        return 0

    img = dataio.load_image(input_path)
    if img.shape[0] % div or img.shape[1] % div:
        return _fail(f"input size {img.shape} not divisible by 2^depth = {div}; "
                     f"center_crop to a multiple of {div} first")
    if args.norm_manifest:
        norm = dataio.load_manifest(args.norm_manifest).normalization
        if norm is None:
            return _fail("normalization manifest carries no stats")
    else:
        norm = dataio.Normalization(lo=0.0, hi=1.0)  # input already in [0,1]
    enhanced01 = _enhance_one(params, dataio.normalize(img, norm))
    restored = dataio.denormalize(enhanced01, norm)
    dataio.save_image(restored.astype(np.float32), args.output)
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    manifest = dataio.load_manifest(args.manifest)
    if manifest.normalization is None:
        return _fail("manifest carries no normalization record")
    enhanced_dir = Path(args.enhanced_dir)
    norm = manifest.normalization

    missing = [e.id for e in manifest.pairs
               if readerstudy.find_enhanced(enhanced_dir, e.id) is None]
    if missing:
        return _fail(f"missing enhanced images for: {', '.join(missing)}")

    records = []
    quality_rows = []
    montage_dir = Path(args.montage_dir) if args.montage_dir else None
    if montage_dir:
        montage_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.pairs:
        quarter01, full01 = dataio.load_pair_unit(manifest, entry)
        enhanced_raw = dataio.load_image(readerstudy.find_enhanced(enhanced_dir, entry.id))
        enhanced01 = dataio.normalize(enhanced_raw, norm)
        records.append(metrics.triplet_report(full01, quarter01, enhanced01, entry.id))

        row = {"patient": entry.id}
        if entry.truth_path is not None:
            truth01 = dataio.normalize(
                dataio.load_image(manifest.resolve(entry.truth_path)), norm)
            for label, img in (("quarter", quarter01), ("enhanced", enhanced01)):
                row[f"mse_{label}"] = metrics.mse_metric(img, truth01)
                try:
                    row[f"psnr_{label}"] = f"{metrics.psnr(img, truth01):.4f}"
                except InfinitePsnrError:
                    row[f"psnr_{label}"] = "inf"
        quality_rows.append(row)

        if montage_dir:
            tiles = dataio.montage(full01, quarter01, enhanced01)
            grid = np.clip(np.rint(tiles * 0xFFFF), 0, 0xFFFF).astype(np.float32)
            dataio.save_image(grid, montage_dir / f"{entry.id}_montage.png")

    report_base = Path(args.report)
    report_base.parent.mkdir(parents=True, exist_ok=True)
    report_base.with_suffix(".csv").write_text(metrics.report_csv(records))
    report_base.with_suffix(".txt").write_text(metrics.report_text(records))
    if any(len(row) > 1 for row in quality_rows):
        keys = ["patient", "mse_quarter", "psnr_quarter", "mse_enhanced", "psnr_enhanced"]
        lines = [",".join(keys)]
        lines += [",".join(str(row.get(k, "")) for k in keys) for row in quality_rows]
        report_base.with_suffix(".quality.csv").write_text("\n".join(lines) + "\n")
    print(f"evaluated {len(records)} patients", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# study


def cmd_study(args) -> int:
    if args.study_cmd == "serve":
        manifest = dataio.load_manifest(args.manifest)
        store = readerstudy.StudyStore(args.scores)
        service = readerstudy.StudyService(manifest, args.enhanced, store)
        server = readerstudy.make_server(service, port=args.port,
                                         ui_dir=args.ui if args.ui else None)
        host, port = server.server_address
        print(f"study service on http://{host}:{port} "
              f"({len(manifest.pairs)} patients, {3 * len(manifest.pairs)} items/session)",
              file=sys.stderr, flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return 0

    store = readerstudy.StudyStore(args.scores)
    report = readerstudy.aggregate(store.read_records(), store.sessions())
    print(readerstudy.report_table(report), end="")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldct",
        description="Desk-scale low-dose CT enhancement workbench")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="generate paired full/quarter-dose slices")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--angles", type=int, default=180)
    p.add_argument("--bins", type=int, default=0, help="detector bins (default: size)")
    p.add_argument("--n0", type=float, default=1e5, help="full-dose photons per bin")
    p.add_argument("--spacing", type=float, default=0.25, help="cm per pixel")
    p.add_argument("--val-frac", type=float, default=0.10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit the network on a pair manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--val-frac", type=float, default=0.10)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--bottleneck", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="run a checkpoint on quarter-dose images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True,
                   help="manifest .json (batch) or a single image file")
    p.add_argument("--output", required=True, help="directory (batch) or file")
    p.add_argument("--norm-manifest", default=None,
                   help="manifest supplying normalization for single-image mode")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="correlation/PSNR report and montages")
    p.add_argument("--manifest", required=True)
    p.add_argument("--enhanced-dir", required=True)
    p.add_argument("--report", required=True, help="report path base (.csv/.txt added)")
    p.add_argument("--montage-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="blind reader study service")
    study_sub = p.add_subparsers(dest="study_cmd", required=True)
    ps = study_sub.add_parser("serve")
    ps.add_argument("--manifest", required=True)
    ps.add_argument("--enhanced", required=True)
    ps.add_argument("--port", type=int, default=8535)
    ps.add_argument("--scores", default="study_scores", help="state directory")
    ps.add_argument("--ui", default=None, help="static UI directory to serve at /")
    ps.set_defaults(func=cmd_study)
    pr = study_sub.add_parser("report")
    pr.add_argument("--scores", required=True, help="state directory")
    pr.add_argument("--out", default=None, help="also write the JSON report here")
    pr.set_defaults(func=cmd_study)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LdctError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(f"{exc}")


if __name__ == "__main__":
    sys.exit(main())
