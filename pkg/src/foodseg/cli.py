"""Command line entry point: ``foodseg <verb> ...``.

CSV goes to stdout (or ``--out``), human summaries to stderr. Any hard error
exits with status 2.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger("foodseg")


def _emit(text: str, out: Path | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


# --------------------------------------------------------------------------
# dataset

def cmd_dataset_stats(args) -> int:
    from .dataset import check_disjoint, class_frequency_report, load_dataset
    train = load_dataset(args.root, args.train_split)
    test = load_dataset(args.root, args.test_split)
    check_disjoint(train, test)
    report = class_frequency_report(train, test, threshold=args.threshold)
    out = Path(args.out) if args.out else None
    _emit(report.to_csv(), out, "class_frequency.csv")
    print(report.summary(), file=sys.stderr)
    if out is not None:
        from .plotting import plot_class_frequency
        plot_class_frequency(report.train_images, report.test_images, out / "class_frequency.png", args.threshold)
    return 0


def cmd_dataset_generate(args) -> int:
    from .dataset import generate_toy_dataset
    man = generate_toy_dataset(args.root, args.seed, args.n_images, args.n_classes, args.size, args.n_test)
    print(f"wrote {len(man)} train images ({man.num_classes} classes) to {args.root}", file=sys.stderr)
    return 0


def cmd_dataset_folder(args) -> int:
    from .dataset import generate_toy_image_folder
    items = generate_toy_image_folder(args.root, args.seed, args.per_class, args.n_classes, args.size)
    print(f"wrote {len(items)} images to {args.root}", file=sys.stderr)
    return 0


# --------------------------------------------------------------------------
# tokenizer

def _folder_images(folder, size):
    from .dataset import load_folder_tensor, load_image_folder
    items = load_image_folder(folder)
    return load_folder_tensor([p for p, _ in items], size), items


def cmd_tokenizer_train(args) -> int:
    from .vqkd import TOKENIZER_PRESETS, TokenizerConfig, train_tokenizer
    cfg = _load_json(args.config)
    images = args.images or cfg.pop("images", None)
    out = args.out or cfg.pop("out", None)
    name = args.preset or cfg.pop("preset", "toy")
    overrides = {k: v for k, v in dict(seed=args.seed, steps=args.steps).items() if v is not None}
    config = TokenizerConfig.from_dict({**TOKENIZER_PRESETS[name], **cfg, **overrides})
    if images is None:
        raise ValueError("no image folder given (--images or 'images' in the config)")
    data, _ = _folder_images(images, config.encoder.img_size)
    _, history = train_tokenizer(config, data, out_dir=out)
    if out is None:
        _write_rows(history, sys.stdout)
    last = history[-1]
    print(f"tokenizer: {len(history)} steps, final loss {last['loss']:.4f}", file=sys.stderr)
    return 0


def cmd_tokenizer_encode(args) -> int:
    from .dataset import load_folder_tensor
    from .vqkd import load_tokenizer, tokenize_image
    tok = load_tokenizer(args.checkpoint)
    size = tok.config.encoder.img_size
    image = load_folder_tensor([Path(args.image)], size)[0]
    seq = tokenize_image(tok, image)
    gh, gw = seq.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "code"])
    for i, code in enumerate(seq.codes.tolist()):
        w.writerow([i // gw, i % gw, code])
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_tokenizer_similarity(args) -> int:
    from .dataset import load_folder_tensor
    from .vqkd import load_tokenizer, matrix_to_csv, tokenize_image, token_iou_matrix
    if len(args.images) < 2:
        raise ValueError("similarity needs at least two images")
    tok = load_tokenizer(args.checkpoint)
    batch = load_folder_tensor([Path(p) for p in args.images], tok.config.encoder.img_size)
    seqs = [tokenize_image(tok, im) for im in batch]
    matrix = token_iou_matrix(seqs, diagonal=1.0 if args.diagonal_one else None)
    names = [Path(p).stem for p in args.images]
    if len(set(names)) < len(names):
        names = [f"{Path(p).parent.name}/{Path(p).stem}" for p in args.images]
    sys.stdout.write(matrix_to_csv(matrix, names))
    if args.figure:
        from .plotting import plot_token_iou
        plot_token_iou(matrix, names, args.figure)
    return 0


# --------------------------------------------------------------------------
# pretrain / finetune / eval / render

def cmd_pretrain(args) -> int:
    from .mim import PRETRAIN_PRESETS, PretrainConfig, pretrain
    from .vqkd import load_tokenizer
    cfg = _load_json(args.config)
    images = args.images or cfg.pop("images", None)
    tokenizer = args.tokenizer or cfg.pop("tokenizer", None)
    out = args.out or cfg.pop("out", None)
    name = cfg.pop("preset", "toy")
    overrides = {k: v for k, v in dict(seed=args.seed, steps=args.steps).items() if v is not None}
    config = PretrainConfig.from_dict({**PRETRAIN_PRESETS[name], **cfg, **overrides})
    if images is None or tokenizer is None:
        raise ValueError("pretrain needs an image folder and a tokenizer checkpoint")
    tok = load_tokenizer(tokenizer)
    data, _ = _folder_images(images, config.encoder.img_size)
    _, history = pretrain(config, tok, data, out_dir=out)
    if out is None:
        _write_rows(history, sys.stdout)
    print(f"pretrain: {len(history)} steps, final loss {history[-1]['loss']:.4f}", file=sys.stderr)
    return 0


def cmd_finetune(args) -> int:
    from .dataset import load_dataset
    from .train import TrainConfig, finetune, preset, run_manifest
    raw = _load_json(args.config)
    data = args.data or raw.pop("data", None)
    out = args.out or raw.pop("out", None)
    overrides = dict(backbone=args.backbone, seed=args.seed, pretrained=args.pretrained)
    name = raw.pop("preset", None)
    if name:
        base = preset(name).to_dict()
        raw = {**base, **raw}
    config = TrainConfig.from_dict({**raw, **{k: v for k, v in overrides.items() if v is not None}})
    if args.dry_run:
        text = json.dumps(run_manifest(config), indent=2) + "\n"
        _emit(text, Path(out) if out else None, "run_manifest.json")
        return 0
    if data is None:
        raise ValueError("no dataset root given (--data or 'data' in the config)")
    train = load_dataset(data, "train")
    val = load_dataset(data, args.val_split) if args.val_split else None
    res = finetune(config, train, val, out_dir=out, iterations=args.iterations)
    if out is None:
        _write_rows(res.history, sys.stdout)
    else:
        from .plotting import plot_training_curve
        h = res.history
        vi = [r["iteration"] for r in h if r["val_miou"] is not None]
        vm = [r["val_miou"] for r in h if r["val_miou"] is not None]
        plot_training_curve([r["iteration"] for r in h], [r["loss"] for r in h],
                            Path(out) / "training_curve.png", vi, vm)
    if val is not None:
        print(f"best val mIoU {res.best_miou:.4f} at iteration {res.best_iteration}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .dataset import class_frequency_report, load_dataset
    from .evaluation import evaluate_dataset
    from .train import load_segmentor
    model, config = load_segmentor(args.checkpoint)
    manifest = load_dataset(args.data, args.split)
    freq = None
    if args.train_split:
        freq = class_frequency_report(load_dataset(args.data, args.train_split), manifest)
    report = evaluate_dataset(model, manifest, args.crop or config.crop, args.stride, args.mode,
                              norm=config.augment_config(), frequency=freq)
    out = Path(args.out) if args.out else None
    _emit(report.to_csv(), out, "eval_per_class.csv")
    summary = report.summary() + f"\ninference: {args.mode}, crop {args.crop or config.crop}\n"
    print(summary, file=sys.stderr)
    if out is not None:
        (out / "eval_summary.txt").write_text(summary)
        if freq is not None:
            from .plotting import plot_long_tail
            plot_long_tail(report.iou, freq.train_images, out / "long_tail.png", names=manifest.class_names)
    return 0


def cmd_render(args) -> int:
    from .dataset import AugmentConfig, load_dataset, normalize, to_tensor
    from .evaluation import predict_sliding
    from .plotting import palette, render_report
    from .train import load_segmentor
    model, config = load_segmentor(args.checkpoint)
    manifest = load_dataset(args.data, args.split)
    norm = config.augment_config() if config.augment else AugmentConfig()
    colors = palette(manifest.num_classes)
    ids = args.ids or manifest.ids[: args.limit]
    out = Path(args.out)
    for sid in ids:
        sample = manifest.load_sample(sid)
        pred = predict_sliding(model, to_tensor(normalize(sample.image, norm)), config.crop, args.stride,
                               manifest.num_classes).numpy()
        path = render_report(sample.image, pred, sample.mask, out / f"{sid}.png", colors)
        print(path, file=sys.stderr)
    return 0


def _write_rows(rows, fh) -> None:
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foodseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset tools").add_subparsers(dest="action", required=True)
    s = ds.add_parser("stats", help="per-class frequency CSV and long-tail summary")
    s.add_argument("root")
    s.add_argument("--threshold", type=int, default=10)
    s.add_argument("--train-split", default="train")
    s.add_argument("--test-split", default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dataset_stats)
    g = ds.add_parser("generate", help="write a synthetic segmentation dataset")
    g.add_argument("root")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--n-images", type=int, default=8)
    g.add_argument("--n-classes", type=int, default=5)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_dataset_generate)
    f = ds.add_parser("folder", help="write a synthetic class-per-folder image set")
    f.add_argument("root")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--per-class", type=int, default=16)
    f.add_argument("--n-classes", type=int, default=3)
    f.add_argument("--size", type=int, default=32)
    f.set_defaults(func=cmd_dataset_folder)

    tk = sub.add_parser("tokenizer", help="VQ-KD tokenizer").add_subparsers(dest="action", required=True)
    t = tk.add_parser("train")
    t.add_argument("--config")
    t.add_argument("--preset", choices=["toy", "base"])
    t.add_argument("--images")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_tokenizer_train)
    e = tk.add_parser("encode", help="code CSV for one image")
    e.add_argument("image")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_tokenizer_encode)
    m = tk.add_parser("similarity", help="pairwise token-IoU matrix CSV")
    m.add_argument("images", nargs="+")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--diagonal-one", action="store_true", help="write 1.0 instead of '-' on the diagonal")
    m.add_argument("--figure")
    m.set_defaults(func=cmd_tokenizer_similarity)

    pt = sub.add_parser("pretrain", help="masked image modeling")
    pt.add_argument("--config")
    pt.add_argument("--images")
    pt.add_argument("--tokenizer")
    pt.add_argument("--out")
    pt.add_argument("--seed", type=int)
    pt.add_argument("--steps", type=int)
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="segmentation fine-tuning")
    ft.add_argument("--config")
    ft.add_argument("--backbone", choices=["vit", "dcn"])
    ft.add_argument("--data")
    ft.add_argument("--val-split")
    ft.add_argument("--out")
    ft.add_argument("--seed", type=int)
    ft.add_argument("--iterations", type=int, help="stop early without changing the schedule")
    ft.add_argument("--pretrained")
    ft.add_argument("--dry-run", action="store_true", help="write the run manifest and exit")
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="mIoU / per-class IoU report")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--train-split", default="train", help="joins IoU with train frequencies ('' to skip)")
    ev.add_argument("--mode", choices=["slide", "whole"], default="slide")
    ev.add_argument("--crop", type=int)
    ev.add_argument("--stride", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="input | prediction | ground-truth panels")
    r.add_argument("checkpoint")
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--ids", nargs="*")
    r.add_argument("--limit", type=int, default=8)
    r.add_argument("--stride", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
