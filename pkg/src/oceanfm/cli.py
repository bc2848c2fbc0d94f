"""Command-line entry point: ``oceanfm <subcommand> [flags]``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.

The global ``--seed`` is split into per-component seeds by fixed offsets
(``SEED_OFFSETS``) so a component keeps its seed when others change.

Labeled datasets are directories holding one OCT1 tile per patch plus a
``labels.tsv`` index (file, kind, log10 value, source id).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import baselines, evaluation, finetune as ft, ingestion, mae, synth
from .data_model import (CHL, TARGET_KINDS, LabeledPatch, Tile, atomic_write, read_checkpoint,
                         read_tile, write_checkpoint, write_tile)
from .errors import ConfigurationError, OceanFMError, ValidationError
from .gradcheck import finite_diff_check
from .nn_core import param_set

log = logging.getLogger("oceanfm")

SEED_OFFSETS = {
    "synth": 0,
    "sample": 101,
    "pretrain": 202,
    "finetune": 303,
    "baseline": 404,
    "eval": 505,
    "gradcheck": 606,
}
LABELS_INDEX = "labels.tsv"
MANIFEST = "manifest.tsv"


def sub_seed(seed: int, component: str) -> int:
    return seed + SEED_OFFSETS[component]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- labeled dataset directories -------------------------------------------


def write_labeled_dir(patches, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(patches):
        name = f"patch_{i:05d}.oct"
        write_tile(p.tile, out / name)
        lines.append(f"{name}\t{p.kind}\t{float(p.value)!r}\t{p.source_id}\n")
    atomic_write(out / LABELS_INDEX, "".join(lines).encode())


def read_labeled_dir(path: Path, kind: str | None = None) -> list[LabeledPatch]:
    index = path / LABELS_INDEX
    if not index.exists():
        raise ValidationError(f"{index} not found")
    out = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        name, k, value, source = line.split("\t")
        if kind is not None and k != kind:
            continue
        tile = read_tile(path / name)
        label = np.full((tile.height, tile.width), np.nan, dtype=np.float32)
        block_r = ingestion.label_block_slice(tile.height)
        block_c = ingestion.label_block_slice(tile.width)
        label[block_r, block_c] = np.float32(float(value))
        out.append(LabeledPatch(tile, label, k, source))
    if not out:
        raise ValidationError(f"no {kind or 'labeled'} patches in {path}")
    return out


def _read_tiles(manifest: Path) -> tuple[list[Tile], list[ingestion.ManifestEntry]]:
    entries = ingestion.parse_manifest(manifest.read_text())
    return [read_tile(manifest.parent / e.path) for e in entries], entries


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode())


def _loss_csv(history) -> str:
    return "epoch,split,region,loss\n" + "".join(
        f"{h.epoch},{h.split},{h.region},{h.loss!r}\n" for h in history)


# -- subcommands ------------------------------------------------------------


def cmd_synth(a) -> None:
    cfg = synth.SynthConfig(seed=sub_seed(a.seed, "synth"), n_bands=a.bands, with_sst=a.sst,
                            cloud_fraction=a.cloud, size=a.size)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(a.count):
        tile = synth.gen_tile(cfg, i)
        name = f"tile_{i:05d}.oct"
        write_tile(tile, out / name)
        entries.append(ingestion.ManifestEntry(name, tile.region, tile.month,
                                               ingestion.valid_fraction(tile)))
    _write_text(out / MANIFEST, ingestion.format_manifest(entries))
    if a.labeled:
        write_labeled_dir(synth.gen_labeled_dataset(cfg, a.labeled, a.kind), out / "labeled")
    print(f"wrote {a.count} tiles and {a.labeled} labeled patches to {out}")


def cmd_sample(a) -> None:
    manifest = Path(a.manifest)
    entries = ingestion.parse_manifest(manifest.read_text())
    clear = [e for e in entries if e.valid_fraction >= ingestion.MIN_VALID_FRACTION]
    regions = sorted({e.region for e in clear})
    budget = ingestion.SampleBudget.uniform(regions, a.per_region, a.exclude)
    res = ingestion.balanced_sample(clear, budget, sub_seed(a.seed, "sample"))
    out = Path(a.out)
    rel = [ingestion.ManifestEntry(os.path.relpath(manifest.parent / e.path, out.parent),
                                   e.region, e.month, e.valid_fraction) for e in res.selected]
    _write_text(out, ingestion.format_manifest(rel))
    for region, month, want, have in res.shortfall:
        print(f"shortfall {region} month {month}: wanted {want}, had {have}", file=sys.stderr)
    print(f"selected {len(res.selected)} of {len(entries)} tiles ({len(clear)} cloud free)")


def cmd_composite(a) -> None:
    if len(a.tiles) != len(a.days):
        raise ValidationError("--tiles and --days must have the same length")
    stack = ingestion.SceneStack([read_tile(p) for p in a.tiles], list(a.days))
    comp = ingestion.median_composite(stack, a.center, a.window)
    write_tile(comp, a.out)
    print(f"composite of {comp.shape} written to {a.out}")


def cmd_pretrain(a) -> None:
    profile = mae.get_profile(a.profile)
    tiles, entries = _read_tiles(Path(a.manifest))
    tiles = [t for t in tiles if ingestion.passes_cloud_filter(t)]
    ckpt, history = mae.pretrain(tiles, profile, a.epochs, lr_peak=a.lr, mask_ratio=a.mask_ratio,
                                 seed=sub_seed(a.seed, "pretrain"), batch_size=a.batch_size)
    write_checkpoint(ckpt, a.out)
    if a.log:
        _write_text(a.log, _loss_csv(history))
    last = [h.loss for h in history if h.split == "train"]
    print(f"pretrained {a.epochs} epochs on {len(tiles)} tiles; "
          f"final train loss {last[-1] if last else float('nan'):.6f}")


def _ft_config(a, init, seed) -> ft.FinetuneConfig:
    return ft.FinetuneConfig(init=init, task=a.task, bands=a.bands, epochs=a.epochs, lr=a.lr,
                             batch_size=a.batch_size, seed=seed, fraction=a.fraction)


def cmd_finetune(a) -> None:
    profile = mae.get_profile(a.profile)
    data = read_labeled_dir(Path(a.data), a.task)
    fm = ft.finetune(data, _ft_config(a, a.init, sub_seed(a.seed, "finetune")), profile)
    write_checkpoint(fm.checkpoint(), a.out)
    if a.log:
        _write_text(a.log, _loss_csv(fm.history))
    print(f"fine-tuned on {fm.n_train} patches; final loss {fm.history[-1].loss:.6f}")


def cmd_baseline(a) -> None:
    data = read_labeled_dir(Path(a.data), a.task)
    keep = ft.band_selection(data[0].tile.bands, a.bands)
    model = baselines.fit_baseline(data, a.trees, sub_seed(a.seed, "baseline"), keep)
    baselines.write_ensemble(model.ensemble, a.out)
    print(f"fitted {a.trees} trees on {len(data)} patches")


def _factory(kind: str, a, profile, seed: int):
    if kind == "trees":
        def make(train, fold):
            keep = ft.band_selection(train[0].tile.bands, a.bands)
            return baselines.fit_baseline(train, a.trees, seed + fold, keep)
        return "ExtraTrees", make
    init = "scratch" if kind == "scratch" else kind

    def make(train, fold):
        cfg = ft.FinetuneConfig(init=init, task=a.task, bands=a.bands, epochs=a.epochs, lr=a.lr,
                                batch_size=a.batch_size, seed=seed + fold)
        return ft.finetune(train, cfg, profile)
    return ("Scratch" if kind == "scratch" else f"MAE:{Path(kind).stem}"), make


def cmd_eval(a) -> None:
    profile = mae.get_profile(a.profile)
    data = read_labeled_dir(Path(a.data), a.task)
    seed = sub_seed(a.seed, "eval")
    folds = evaluation.kfold_split(len(data), a.folds, seed)
    reports, ablation = [], []
    for kind in a.model:
        name, make = _factory(kind, a, profile, seed)
        rep = evaluation.run_cv(data, make, folds, name, a.task)
        reports.append(rep)
        if a.ablation:
            for pt in evaluation.fraction_ablation(data, make, folds, seed=seed):
                ablation.append((name, pt))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    # runtimes are left out of the artifacts so repeated runs stay bit-identical
    _write_text(out / "report.csv", evaluation.report_csv(reports))
    summary = evaluation.format_table(reports)
    _write_text(out / "summary.txt", summary)
    if ablation:
        _write_text(out / "ablation.csv", "model,fraction,mean,std,n_train,skipped\n" + "".join(
            f"{n},{p.fraction},{p.mean!r},{p.std!r},{'/'.join(map(str, p.n_train))},{int(p.skipped)}\n"
            for n, p in ablation))
    print(summary, end="")


def _load_predictor(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == baselines.ETR_MAGIC:
        model = baselines.TreeBaseline(baselines.read_ensemble(path))
        return model.ensemble.n_features, model.predict
    fm = ft.regressor_from_checkpoint(read_checkpoint(path))
    return len(fm.band_mean), fm.predict


def cmd_infer(a) -> None:
    scene = read_tile(a.scene)
    keep = ft.band_selection(scene.bands, a.bands)
    n, fn = _load_predictor(a.model)
    if n != len(keep):
        raise ConfigurationError(f"model expects {n} bands, --bands {a.bands} gives {len(keep)}")
    planes = scene.planes[keep]
    out = evaluation.tiled_inference(fn, planes, a.window, a.stride)
    tile = Tile.from_planes((a.task,), out[None], region=scene.region, year=scene.year,
                            month=scene.month, lat=scene.lat, lon=scene.lon)
    write_tile(tile, a.out)
    msg = f"wrote {out.shape[0]}x{out.shape[1]} {a.task} map to {a.out}"
    if a.truth:
        truth = read_tile(a.truth).planes[0]
        rng = float(np.nanmax(truth) - np.nanmin(truth)) or 1.0
        msg += f"; ssim {evaluation.ssim(out, truth, rng):.6f}"
    if a.histogram:
        _write_text(a.histogram, evaluation.histogram_csv(out[None], (a.task,)))
    print(msg)


def cmd_gradcheck(a) -> None:
    profile = mae.get_profile(a.profile)
    seed = sub_seed(a.seed, "gradcheck")
    rng = np.random.default_rng(seed)
    s = profile.input_size
    x = torch.from_numpy(rng.normal(size=(1, 2, s, s)))
    model = mae.build_mae(profile, 2, seed).double()
    plan = mae.random_mask(profile.n_tokens, 0.75, seed)
    err_mae = finite_diff_check(lambda: mae.masked_rmse_loss(model(x, [plan]), x, [plan]),
                                param_set(model), seed=seed)
    reg = ft.PixelRegressor(profile, 2).double()
    label = torch.full((1, s, s), float("nan"), dtype=torch.float64)
    label[0, s // 2 - 1:s // 2 + 2, s // 2 - 1:s // 2 + 2] = 0.3
    err_ft = finite_diff_check(lambda: ft.sparse_masked_loss(reg(x), label),
                               param_set(reg), seed=seed)
    print(f"mae loss max relative error {err_mae:.3e}")
    print(f"fine-tune loss max relative error {err_ft:.3e}")
    print(f"max relative error {max(err_mae, err_ft):.3e}")
    if max(err_mae, err_ft) >= 1e-3:
        raise OceanFMError("gradient check failed")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oceanfm", description="Ocean-colour foundation model pipeline")
    p.add_argument("--threads", type=int, default=None, help="cap intra-op parallelism")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(sp, required=True):
        sp.add_argument("--seed", type=int, required=required)

    def train_flags(sp, epochs):
        sp.add_argument("--profile", default="desk", choices=sorted(mae.PROFILES))
        sp.add_argument("--task", default=CHL, choices=TARGET_KINDS)
        sp.add_argument("--bands", default="olci", choices=("olci", "olci+sst"))
        sp.add_argument("--epochs", type=int, default=epochs)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--batch-size", type=int, default=8)

    s = sub.add_parser("synth", help="generate synthetic tiles and labeled patches")
    seeded(s)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=36)
    s.add_argument("--bands", type=int, default=16)
    s.add_argument("--sst", action="store_true")
    s.add_argument("--cloud", type=float, default=0.0)
    s.add_argument("--size", type=int, default=ingestion.SOURCE_TILE)
    s.add_argument("--labeled", type=int, default=0)
    s.add_argument("--kind", default=CHL, choices=TARGET_KINDS)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("sample", help="cloud filter and region/month balanced sampling")
    seeded(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--per-region", type=int, required=True)
    s.add_argument("--exclude", nargs="*", default=sorted(ingestion.DEFAULT_EXCLUDED))
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("composite", help="per-pixel median over a time window")
    s.add_argument("--tiles", nargs="+", required=True)
    s.add_argument("--days", nargs="+", type=float, required=True)
    s.add_argument("--center", type=float, required=True)
    s.add_argument("--window", type=float, default=6.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_composite)

    s = sub.add_parser("pretrain", help="masked-autoencoder pre-training")
    seeded(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--profile", default="desk", choices=sorted(mae.PROFILES))
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=mae.PAPER_PEAK_LR)
    s.add_argument("--mask-ratio", type=float, default=mae.DEFAULT_MASK_RATIO)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune a per-pixel regressor")
    seeded(s)
    train_flags(s, 30)
    s.add_argument("--data", required=True, help="labeled dataset directory")
    s.add_argument("--init", default="scratch", help="'scratch' or a pre-trained checkpoint")
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("baseline", help="fit the extremely randomized trees baseline")
    seeded(s)
    s.add_argument("--data", required=True)
    s.add_argument("--task", default=CHL, choices=TARGET_KINDS)
    s.add_argument("--bands", default="olci", choices=("olci", "olci+sst"))
    s.add_argument("--trees", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_baseline)

    s = sub.add_parser("eval", help="k-fold cross-validation report")
    seeded(s)
    train_flags(s, 30)
    s.add_argument("--data", required=True)
    s.add_argument("--model", action="append", required=True,
                   help="'trees', 'scratch' or a pre-trained checkpoint path; repeatable")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--trees", type=int, default=100)
    s.add_argument("--ablation", action="store_true", help="also run the training-fraction sweep")
    s.add_argument("--out", required=True, help="report directory")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", help="tiled inference over a scene")
    s.add_argument("--model", required=True, help="fine-tuned CKP1 or ETR1 file")
    s.add_argument("--scene", required=True)
    s.add_argument("--bands", default="olci", choices=("olci", "olci+sst"))
    s.add_argument("--task", default=CHL, choices=TARGET_KINDS)
    s.add_argument("--window", type=int, default=42)
    s.add_argument("--stride", type=int, default=21)
    s.add_argument("--truth", help="single-band OCT1 reference for SSIM")
    s.add_argument("--histogram", help="write a 64-bin histogram CSV of the map")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    seeded(s)
    s.add_argument("--profile", default="tiny", choices=sorted(mae.PROFILES))
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("oceanfm: error: --threads must be >= 1", file=sys.stderr)
            return 2
        torch.set_num_threads(args.threads)
    t0 = time.perf_counter()
    try:
        args.fn(args)
    except (OceanFMError, ValueError, OSError) as e:
        print(f"oceanfm {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
