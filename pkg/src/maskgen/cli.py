"""Command-line interface: ``maskgen <command>``.

Commands: gen-data, codebook, encode, train, infer, eval, annotate, attn,
e2e. Every command accepts ``--config``, ``--seed``, ``--cache-dir``, and
``--jobs``; the cache directory may also come from the ``MASKGEN_CACHE``
environment variable. Exit codes: 0 success, 2 validation error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .validation import MaskgenError, ValidationError


def _global_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("global options")
    group.add_argument("--config", metavar="FILE",
                       help="TOML config with [model], [train], [decode] tables")
    group.add_argument("--seed", type=int, default=0,
                       help="root seed; commands derive per-stage seeds from it")
    group.add_argument("--cache-dir", metavar="DIR",
                       default=os.environ.get("MASKGEN_CACHE"),
                       help="pipeline cache directory (env: MASKGEN_CACHE)")
    group.add_argument("--jobs", type=int, default=0,
                       help="worker threads; 0 keeps library defaults")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskgen",
        description="Text-conditioned autoregressive mask generation toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"maskgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parent = _global_flags()

    p = sub.add_parser("gen-data", parents=[parent],
                       help="generate a synthetic dataset of scenes")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=("referring", "semantic"), default="referring")
    p.add_argument("--seed0", type=int, default=0, help="first scene seed")
    p.add_argument("--canvas", type=int, default=64, help="square canvas size")
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("codebook", parents=[parent],
                       help="train a mask patch codebook from a dataset")
    p.add_argument("--data", required=True, help="dataset directory (manifest.jsonl)")
    p.add_argument("--k", type=int, default=1024, help="codebook size")
    p.add_argument("--patch", type=int, default=16, help="patch size")
    p.add_argument("--out", required=True,
                   help="output file (.txt = text form, else binary)")
    p.set_defaults(run=cmd_codebook)

    p = sub.add_parser("encode", parents=[parent],
                       help="encode one mask to a token file")
    p.add_argument("--codebook", required=True, help="codebook file")
    p.add_argument("--mask", required=True, help="PGM mask to encode")
    p.add_argument("--out", required=True, help="output tokens JSON")
    p.add_argument("--patch", type=int, default=16, help="patch size")
    p.set_defaults(run=cmd_encode)

    p = sub.add_parser("train", parents=[parent],
                       help="train the mask transformer on a dataset")
    p.add_argument("--data", required=True, help="dataset directory (manifest.jsonl)")
    p.add_argument("--preset", choices=("pretrain", "finetune"),
                   help="optimizer preset (overrides the config file)")
    p.add_argument("--codebook", help="existing codebook file (default: train one)")
    p.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("infer", parents=[parent],
                       help="decode a mask for one image and instruction")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image (PPM or PGM)")
    p.add_argument("--text", required=True, help="instruction text")
    p.add_argument("--decode", default="greedy",
                   help="greedy | beam:3 | topk:3 | topp:0.9 | random")
    p.add_argument("--out", default="mask_out.pgm", help="output mask PGM")
    p.set_defaults(run=cmd_infer)

    p = sub.add_parser("eval", parents=[parent],
                       help="score prediction/target mask pairs")
    p.add_argument("--manifest", required=True,
                   help='JSONL of {"pred": path, "gt": path, "class": optional}')
    p.add_argument("--thresholds", default="0.5,0.6,0.7,0.8,0.9",
                   help="comma-separated IoU thresholds for AHD grouping")
    p.add_argument("--strict-above", action="store_true",
                   help="retain pairs with IoU strictly above each threshold")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=4,
                   help="boundary connectivity")
    p.add_argument("--out", default="report", help="output directory for reports")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("annotate", parents=[parent],
                       help="filter detections against mask candidates")
    p.add_argument("--detections", required=True, help="detections JSONL")
    p.add_argument("--masks", required=True,
                   help="mask candidate directory (index.json + PGMs)")
    p.add_argument("--client", default="stub",
                   help="caption client: replay:transcript.json | stub[:answer]")
    p.add_argument("--out", default="annotations.jsonl", help="output records JSONL")
    p.add_argument("--no-verify", action="store_true",
                   help="skip cross-verification of referring expressions")
    p.set_defaults(run=cmd_annotate)

    p = sub.add_parser("attn", parents=[parent],
                       help="export an attention heatmap for one decode")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--image", required=True, help="input image (PPM or PGM)")
    p.add_argument("--text", required=True, help="instruction text")
    p.add_argument("--layer", default="last",
                   help='block index or "last" (default)')
    p.add_argument("--decode", default="greedy", help="decoding strategy")
    p.add_argument("--out", required=True, help="output heatmap PGM")
    p.set_defaults(run=cmd_attn)

    p = sub.add_parser("e2e", parents=[parent],
                       help="run gen-data, codebook, encode, train, infer, eval")
    p.add_argument("--out", default="e2e-report", help="report output directory")
    p.set_defaults(run=cmd_e2e)

    return parser


def _require_cache(args) -> str:
    if args.cache_dir:
        return args.cache_dir
    return str(Path.cwd() / ".maskgen-cache")


def _load_image_any(path) -> np.ndarray:
    """Read a PPM image, or a PGM one replicated to three channels."""
    from .pnm import read_image, read_pgm

    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        gray = read_pgm(path)
        return np.stack([gray] * 3, axis=-1)
    return read_image(path)


# ---------------------------------------------------------------------------
# command implementations


def cmd_gen_data(args) -> int:
    from .pipeline import make_manifest, write_dataset, write_manifest

    manifest = make_manifest(
        "gen-data",
        {"n": args.n, "task": args.task, "seed0": args.seed0, "canvas": args.canvas},
        {},
        args.seed0,
    )
    write_dataset(args.out, args.n, args.task, args.seed0, args.canvas,
                  manifest.hash())
    write_manifest(args.out, manifest)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_codebook(args) -> int:
    from .codec import patchify, save_codebook_binary, save_codebook_text, train_codebook
    from .pipeline import (
        file_hash,
        make_manifest,
        read_manifest_records,
        stage_seed,
    )
    from .pnm import read_mask

    data_dir = Path(args.data)
    manifest_path = data_dir / "manifest.jsonl"
    records = read_manifest_records(manifest_path)
    vectors = np.concatenate(
        [
            patchify(read_mask(data_dir / rec["mask"]), args.patch).reshape(
                -1, args.patch * args.patch
            )
            for rec in records
        ]
    )
    codebook = train_codebook(vectors, args.k, seed=stage_seed(args.seed, "codebook"))
    out = Path(args.out)
    if out.suffix == ".txt":
        save_codebook_text(out, codebook)
    else:
        save_codebook_binary(out, codebook)
    manifest = make_manifest(
        "codebook",
        {"k": args.k, "patch": args.patch},
        {"manifest": file_hash(manifest_path)},
        args.seed,
    )
    sidecar = out.with_suffix(out.suffix + ".run.json")
    sidecar.write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n")
    print(f"trained {args.k}-code codebook -> {out}")
    return 0


def cmd_encode(args) -> int:
    from .codec import encode_mask, flatten_tokens, load_codebook
    from .pipeline import file_hash, make_manifest
    from .pnm import read_mask

    codebook = load_codebook(args.codebook)
    mask = read_mask(args.mask)
    tokens = encode_mask(mask, codebook, args.patch)
    manifest = make_manifest(
        "encode",
        {"patch": args.patch},
        {"codebook": file_hash(args.codebook), "mask": file_hash(args.mask)},
        args.seed,
    )
    payload = {
        "h": tokens.shape[0],
        "w": tokens.shape[1],
        "tokens": flatten_tokens(tokens).tolist(),
        "manifest_hash": manifest.hash(),
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True) + "\n")
    print(f"encoded {args.mask} -> {args.out} ({tokens.size} tokens)")
    return 0


def cmd_train(args) -> int:
    from .codec import load_codebook, patchify, train_codebook
    from .pipeline import (
        file_hash,
        load_config,
        make_manifest,
        model_config_from,
        read_manifest_records,
        stage_seed,
        train_config_from,
    )
    from .pnm import read_mask
    from .model import MaskTransformer
    from .training import build_samples, save_checkpoint, train
    from .vocab import Vocabulary

    config = load_config(args.config)
    if args.preset:
        config["train"]["preset"] = args.preset

    data_dir = Path(args.data)
    manifest_path = data_dir / "manifest.jsonl"
    records = read_manifest_records(manifest_path)
    patch = config["codebook"]["patch_size"]

    if args.codebook:
        codebook = load_codebook(args.codebook)
    else:
        vectors = np.concatenate(
            [
                patchify(read_mask(data_dir / rec["mask"]), patch).reshape(
                    -1, patch * patch
                )
                for rec in records
            ]
        )
        codebook = train_codebook(vectors, config["codebook"]["n_codes"],
                                  seed=stage_seed(args.seed, "codebook"))

    n_codes = codebook.vectors.shape[0]
    vocab = Vocabulary(n_codes)
    samples = build_samples(records, data_dir, codebook, vocab, patch)

    model_seed = stage_seed(args.seed, "train")
    model = MaskTransformer(model_config_from(config, model_seed), vocab)
    train_config = train_config_from(config, model_seed)
    result = train(
        model, train_config, samples,
        log=lambda e, l: print(f"epoch {e}: loss {l:.4f}"),
    )
    if result.aborted:
        raise MaskgenError(f"training aborted: {result.abort_reason}")

    manifest = make_manifest(
        "train",
        {"model": model.config.to_dict(), "train": train_config.to_dict()},
        {"manifest": file_hash(manifest_path)},
        args.seed,
    )
    save_checkpoint(
        args.out,
        model,
        extra={
            "manifest_hash": manifest.hash(),
            "loss_curve": result.loss_curve,
            "steps": result.steps,
        },
        codebook=codebook,
    )
    print(f"saved checkpoint -> {args.out} (final loss {result.loss_curve[-1]:.4f})")
    return 0


def _infer_tokens(bundle, image, text: str, decode: str, seed: int):
    """Shared infer/attn path: build the prefix and decode mask tokens."""
    from .codec import patchify_image
    from .decoding import generate

    if bundle.codebook is None:
        raise ValidationError("checkpoint has no embedded codebook; "
                              "re-train or embed one")
    d_vq = bundle.codebook.vectors.shape[1]
    patch = int(round(d_vq ** 0.5))
    if patch * patch != d_vq:
        raise ValidationError(f"codebook vector size {d_vq} is not square")
    patches = patchify_image(image, patch)
    h, w = patches.shape[:2]
    text_ids = bundle.vocab.encode_text(text)
    tokens = generate(
        bundle.model,
        text_ids,
        patches.reshape(h * w, -1),
        n_tokens=h * w,
        strategy=decode,
        seed=seed,
    )
    return tokens, (h, w), patch, text_ids, patches


def cmd_infer(args) -> int:
    from .codec import decode_tokens, unflatten_tokens
    from .pipeline import file_hash, make_manifest
    from .pnm import write_pgm
    from .training import load_checkpoint

    bundle = load_checkpoint(args.ckpt)
    image = _load_image_any(args.image)
    tokens, (h, w), patch, _, _ = _infer_tokens(
        bundle, image, args.text, args.decode, args.seed
    )
    mask = decode_tokens(unflatten_tokens(tokens, h, w), bundle.codebook, patch)
    manifest = make_manifest(
        "infer",
        {"decode": args.decode, "text": args.text},
        {"ckpt": file_hash(args.ckpt), "image": file_hash(args.image)},
        args.seed,
    )
    write_pgm(args.out, mask * 255, comment=f"run {manifest.hash()}")
    print(f"decoded mask ({int(mask.sum())} foreground px) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .pipeline import (
        evaluate_pairs,
        file_hash,
        make_manifest,
        report_table,
        write_report,
    )
    from .pnm import read_mask

    thresholds = tuple(float(t) for t in args.thresholds.split(",") if t)
    if not thresholds:
        raise ValidationError("need at least one threshold")

    base = Path(args.manifest).parent
    pairs, classes = [], []
    with open(args.manifest) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            def resolve(p):
                p = Path(p)
                return p if p.is_absolute() else base / p
            pairs.append((read_mask(resolve(rec["pred"])),
                          read_mask(resolve(rec["gt"]))))
            classes.append(rec.get("class"))
    report = evaluate_pairs(
        pairs,
        classes=classes,
        thresholds=thresholds,
        strict=args.strict_above,
        connectivity=args.connectivity,
    )
    manifest = make_manifest(
        "eval",
        {"thresholds": list(thresholds), "strict": args.strict_above,
         "connectivity": args.connectivity},
        {"manifest": file_hash(args.manifest)},
        args.seed,
    )
    paths = write_report(args.out, report, manifest.hash())
    sys.stdout.write(report_table(report))
    print(f"reports -> {paths['json']}")
    return 0


def cmd_annotate(args) -> int:
    from .annotate import (
        ReplayClient,
        StubClient,
        annotate_image,
        load_detections,
        load_mask_candidates,
        run_referring_pipeline,
        write_records_jsonl,
    )

    if args.client.startswith("replay:"):
        client = ReplayClient(args.client.split(":", 1)[1])
    elif args.client == "stub" or args.client.startswith("stub:"):
        _, _, answer = args.client.partition(":")
        client = StubClient(verify_response=answer or "no")
    else:
        raise ValidationError(
            f"unknown client {args.client!r}; use replay:FILE or stub[:answer]"
        )

    image_path, detections = load_detections(args.detections)
    if image_path is None:
        raise ValidationError(f"no detections in {args.detections}")
    resolved = Path(image_path)
    if not resolved.is_absolute():
        resolved = Path(args.detections).parent / resolved
    image = _load_image_any(resolved)

    candidates = load_mask_candidates(args.masks)
    instances, rejections = annotate_image(detections, candidates)
    expressions, pipeline_rejections = run_referring_pipeline(
        image, instances, client, verify=not args.no_verify
    )
    rejections = list(rejections) + list(pipeline_rejections)
    records = list(instances) + list(expressions)
    write_records_jsonl(args.out, records)
    print(f"accepted {len(instances)} instance(s), "
          f"{len(expressions)} expression record(s), "
          f"rejected {len(rejections)} -> {args.out}")
    for rejection in rejections:
        print(f"  rejected [{rejection.reason}] label={rejection.label!r}"
              + (f" mask={rejection.mask_id}" if rejection.mask_id else ""))
    return 0


def cmd_attn(args) -> int:
    from .model import attention_heatmap, attention_matrix
    from .pipeline import file_hash, make_manifest
    from .pnm import write_pgm
    from .training import load_checkpoint

    bundle = load_checkpoint(args.ckpt)
    image = _load_image_any(args.image)
    tokens, (h, w), patch, text_ids, patches = _infer_tokens(
        bundle, image, args.text, args.decode, args.seed
    )
    if args.layer == "last":
        layer = -1
    else:
        try:
            layer = int(args.layer)
        except ValueError:
            raise ValidationError(
                f'--layer must be an integer or "last", got {args.layer!r}'
            ) from None
    emb, layout = bundle.model.build_sequence(
        text_ids, patches.reshape(h * w, -1), tokens
    )
    matrix = attention_matrix(bundle.model, emb, layout, layer=layer)
    heat = attention_heatmap(matrix)
    manifest = make_manifest(
        "attn",
        {"layer": args.layer, "decode": args.decode, "text": args.text},
        {"ckpt": file_hash(args.ckpt), "image": file_hash(args.image)},
        args.seed,
    )
    write_pgm(args.out, heat, comment=f"run {manifest.hash()}")
    print(f"attention heatmap {heat.shape[0]}x{heat.shape[1]} -> {args.out}")
    return 0


def cmd_e2e(args) -> int:
    from .pipeline import load_config, pipeline_e2e, report_table, write_report

    config = load_config(args.config)
    report, eval_result, stages = pipeline_e2e(
        config, args.seed, _require_cache(args), jobs=args.jobs, log=print
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("report.json", "report.csv", "report.txt"):
        (out_dir / name).write_bytes((eval_result.out_dir / name).read_bytes())
    sys.stdout.write(report_table(report))
    print(f"reports -> {out_dir / 'report.json'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except ValidationError as err:
        print(f"maskgen: {err}", file=sys.stderr)
        return 2
    except MaskgenError as err:
        print(f"maskgen: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"maskgen: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
