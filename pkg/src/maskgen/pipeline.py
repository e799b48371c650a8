"""Pipeline stages, content-hash caching, run manifests, and report emission.

Every command records a :class:`RunManifest`; its hash covers the command,
parameters, input hashes, seed, and tool version — never timestamps — so
identical work always lands on the same cache key and artifacts embed a
stable provenance mark. Stages of ``e2e`` (gen-data, codebook, encode, train,
infer, eval) are cached under that key and re-used when nothing changed.

Reports are rendered three ways from one structure: JSON (source of truth),
CSV with columns metric/threshold/count/value, and a human-readable table.
Values carry four decimals, rounded half-even; empty metric groups render as
``null`` in JSON and ``NA`` in CSV.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import __version__
from .codec import (
    decode_tokens,
    encode_mask,
    flatten_tokens,
    load_codebook,
    patchify,
    patchify_image,
    save_codebook_binary,
    train_codebook,
    unflatten_tokens,
)
from .decoding import generate, parse_strategy
from .metrics import EvalPair, c_iou, m_ahd, m_iou
from .model import MaskTransformer, ModelConfig
from .pnm import read_image, read_mask, write_pgm, write_ppm
from .scenes import generate_sample, sample_scene
from .training import (
    build_samples,
    load_checkpoint,
    preset_config,
    save_checkpoint,
    train,
)
from .validation import MaskgenError, ValidationError
from .vocab import Vocabulary

MANIFEST_NAME = "run.json"
DONE_MARKER = ".complete"


def stable_hash(obj) -> str:
    """sha256 of an object's canonical JSON form."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def stage_seed(root_seed: int, label: str) -> int:
    """Derive a per-stage seed from the root seed and a stable stage label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class RunManifest:
    """Provenance for one command or pipeline stage.

    The hash deliberately excludes the timestamps, so re-running identical
    work produces the identical mark.
    """

    command: str
    config_hash: str
    input_hashes: dict
    seed: int
    version: str = __version__
    started: str = ""
    finished: str = ""

    def hash(self) -> str:
        return stable_hash(
            {
                "command": self.command,
                "config_hash": self.config_hash,
                "input_hashes": self.input_hashes,
                "seed": self.seed,
                "version": self.version,
            }
        )

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "input_hashes": self.input_hashes,
            "seed": self.seed,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "hash": self.hash(),
        }


def make_manifest(command: str, params, input_hashes: dict, seed: int) -> RunManifest:
    return RunManifest(
        command=command,
        config_hash=stable_hash(params),
        input_hashes=dict(sorted(input_hashes.items())),
        seed=seed,
        started=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    )


def write_manifest(out_dir, manifest: RunManifest) -> str:
    record = manifest.to_dict()
    record["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    return record["hash"]


class PipelineError(MaskgenError):
    """A pipeline stage failed; carries the stage name and its manifest."""

    def __init__(self, stage: str, manifest: RunManifest, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.manifest = manifest


@dataclass
class StageResult:
    name: str
    out_dir: Path
    manifest_hash: str
    cached: bool


class StageCache:
    """Content-addressed stage outputs with advisory file locking.

    A stage's key is the hash of (name, params, input hashes, seed, tool
    version). Completed outputs carry a marker file; concurrent builders of
    the same key serialize on a lock file and the losers re-use the winner's
    output.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def run(self, name: str, params: dict, inputs: dict, seed: int, build) -> StageResult:
        manifest = make_manifest(name, params, inputs, seed)
        key = manifest.hash()
        out_dir = self.root / f"{name}-{key[:16]}"
        if (out_dir / DONE_MARKER).exists():
            return StageResult(name, out_dir, key, cached=True)
        lock = FileLock(str(self.root / f"{name}-{key[:16]}.lock"))
        with lock:
            if (out_dir / DONE_MARKER).exists():
                return StageResult(name, out_dir, key, cached=True)
            out_dir.mkdir(parents=True, exist_ok=True)
            try:
                build(out_dir, manifest.hash())
            except Exception as err:
                raise PipelineError(name, manifest, err) from err
            write_manifest(out_dir, manifest)
            (out_dir / DONE_MARKER).touch()
        return StageResult(name, out_dir, key, cached=False)


# ---------------------------------------------------------------------------
# value formatting and report emission


def round4(value: float) -> float:
    """Round to four decimals, ties to even, as a float."""
    quantized = Decimal(repr(float(value))).quantize(
        Decimal("0.0001"), rounding=ROUND_HALF_EVEN
    )
    return float(quantized)


def format4(value) -> str:
    """Fixed four-decimal rendering; None becomes NA."""
    if value is None:
        return "NA"
    return f"{round4(value):.4f}"


@dataclass
class EvalReport:
    """Evaluation results: cumulative IoU, mean IoU, and AHD groups."""

    ciou: float
    miou: float  # None when no class labels were supplied
    mahd: dict  # threshold string -> {"count": int, "mean": float | None}
    pair_count: int = 0
    class_count: int = 0

    def to_json_dict(self) -> dict:
        return {
            "ciou": round4(self.ciou),
            "miou": None if self.miou is None else round4(self.miou),
            "mahd": {
                key: {
                    "count": group["count"],
                    "mean": None if group["mean"] is None else round4(group["mean"]),
                }
                for key, group in self.mahd.items()
            },
        }


def evaluate_pairs(pairs, classes=None, thresholds=(0.5, 0.6, 0.7, 0.8, 0.9),
                   strict: bool = False, connectivity: int = 4) -> EvalReport:
    """Score (prediction, target) mask pairs into an :class:`EvalReport`.

    ``classes`` optionally names a class per pair; mean IoU is computed over
    classes and omitted (None) when no pair is labeled.
    """
    pairs = [(np.asarray(p), np.asarray(g)) for p, g in pairs]
    if not pairs:
        raise ValidationError("evaluation needs at least one mask pair")
    ciou = c_iou(pairs)

    miou = None
    class_count = 0
    if classes is not None:
        labeled = [
            ({cls: p}, {cls: g})
            for (p, g), cls in zip(pairs, classes)
            if cls is not None
        ]
        if labeled:
            miou = m_iou(labeled)
            class_count = len({cls for _, g in labeled for cls in g})

    groups = m_ahd(
        [EvalPair(p, g) for p, g in pairs],
        thresholds=thresholds,
        strict=strict,
        connectivity=connectivity,
    )
    mahd = {}
    for threshold in thresholds:
        group = groups.as_dict()[f"{threshold:g}"]
        mahd[f"{threshold:g}"] = {"count": group["count"], "mean": group["mean"]}
    return EvalReport(ciou=ciou, miou=miou, mahd=mahd, pair_count=len(pairs),
                      class_count=class_count)


def report_json(report: EvalReport, manifest_hash: str = None) -> str:
    payload = report.to_json_dict()
    if manifest_hash is not None:
        payload["manifest_hash"] = manifest_hash
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_csv(report: EvalReport) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["metric", "threshold", "count", "value"])
    writer.writerow(["ciou", "", report.pair_count, format4(report.ciou)])
    writer.writerow(
        ["miou", "", report.class_count, format4(report.miou)]
    )
    for threshold, group in report.mahd.items():
        writer.writerow(["mahd", threshold, group["count"], format4(group["mean"])])
    return out.getvalue()


def report_table(report: EvalReport) -> str:
    rows = [("metric", "threshold", "count", "value"),
            ("ciou", "-", str(report.pair_count), format4(report.ciou)),
            ("miou", "-", str(report.class_count), format4(report.miou))]
    for threshold, group in report.mahd.items():
        rows.append(("mahd", threshold, str(group["count"]), format4(group["mean"])))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = []
    for n, row in enumerate(rows):
        cells = (cell.ljust(widths[i]) for i, cell in enumerate(row))
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict:
    """Read a report CSV back into the JSON structure (for cross-checking)."""
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["metric", "threshold", "count", "value"]:
        raise ValidationError(f"unexpected CSV header {rows[0]}")
    out = {"ciou": None, "miou": None, "mahd": {}}
    for metric, threshold, count, value in rows[1:]:
        number = None if value == "NA" else float(value)
        if metric == "ciou":
            out["ciou"] = number
        elif metric == "miou":
            out["miou"] = number
        elif metric == "mahd":
            out["mahd"][threshold] = {"count": int(count), "mean": number}
        else:
            raise ValidationError(f"unexpected CSV metric {metric!r}")
    return out


def write_report(out_dir, report: EvalReport, manifest_hash: str = None) -> dict:
    """Write report.json / report.csv / report.txt; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "report.json",
        "csv": out_dir / "report.csv",
        "table": out_dir / "report.txt",
    }
    paths["json"].write_text(report_json(report, manifest_hash))
    paths["csv"].write_text(report_csv(report))
    paths["table"].write_text(report_table(report))
    return paths


# ---------------------------------------------------------------------------
# end-to-end configuration


E2E_DEFAULTS = {
    "data": {"n_train": 200, "n_eval": 50, "task": "referring", "canvas": 64},
    "codebook": {"n_codes": 64, "patch_size": 16},
    "model": {"layers": 2, "hidden": 64, "heads": 4, "rope_base": 10000.0},
    "train": {"preset": "finetune", "epochs": 5, "batch_size": 16},
    "decode": {"strategy": "greedy"},
    "eval": {"thresholds": [0.5, 0.6, 0.7, 0.8, 0.9], "strict": False,
             "connectivity": 4},
}


def load_config(path=None) -> dict:
    """Merge a TOML config file over the e2e defaults."""
    import tomli

    config = {section: dict(values) for section, values in E2E_DEFAULTS.items()}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                loaded = tomli.load(fh)
            except tomli.TOMLDecodeError as err:
                raise ValidationError(f"bad config file {path}: {err}") from err
        for section, values in loaded.items():
            if section not in config:
                raise ValidationError(f"unknown config table [{section}]")
            if not isinstance(values, dict):
                raise ValidationError(f"[{section}] must be a table")
            for key, value in values.items():
                if key not in config[section]:
                    raise ValidationError(f"unknown config key {section}.{key}")
                config[section][key] = value
    return config


def model_config_from(config: dict, seed: int) -> ModelConfig:
    model = config["model"]
    patch = config["codebook"]["patch_size"]
    return ModelConfig(
        layers=model["layers"],
        hidden=model["hidden"],
        heads=model["heads"],
        rope_base=model.get("rope_base", 10000.0),
        seed=seed,
        patch_dim=patch * patch * 3,
    )


def train_config_from(config: dict, seed: int):
    section = dict(config["train"])
    preset = section.pop("preset", "finetune")
    return preset_config(preset, seed=seed, **section)


# ---------------------------------------------------------------------------
# pipeline stages


def write_dataset(out_dir, n: int, task: str, seed0: int, canvas: int,
                  manifest_hash: str = None) -> Path:
    """Generate scenes into out_dir; each artifact embeds the run mark."""
    if n < 1:
        raise ValidationError(f"need at least one sample, got n={n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comment = f"run {manifest_hash}" if manifest_hash else None
    records = []
    for seed in range(seed0, seed0 + n):
        spec = sample_scene(seed, task=task, canvas=(canvas, canvas))
        image, instruction, mask = generate_sample(spec)
        image_name = f"img_{seed:06d}.ppm"
        mask_name = f"msk_{seed:06d}.pgm"
        write_ppm(out_dir / image_name, image, comment=comment)
        write_pgm(out_dir / mask_name, mask * 255, comment=comment)
        record = {
            "image": image_name,
            "mask": mask_name,
            "instruction": instruction,
            "task": task,
            "seed": seed,
        }
        if manifest_hash:
            record["manifest_hash"] = manifest_hash
        records.append(record)
    with open(out_dir / "manifest.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return out_dir / "manifest.jsonl"


def read_manifest_records(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ValidationError(f"empty dataset manifest {path}")
    return records


def pipeline_e2e(config: dict, seed: int, cache_dir, jobs: int = 0,
                 log=None) -> tuple:
    """Run gen-data -> codebook -> encode -> train -> infer -> eval.

    Returns (EvalReport, manifest hash of the eval stage, list of
    StageResult). Stages are cached by content hash; reruns with identical
    config and seed reuse every stage and reproduce the report byte for
    byte.
    """
    import torch

    if jobs:
        torch.set_num_threads(jobs)

    def say(message):
        if log is not None:
            log(message)

    cache = StageCache(cache_dir)
    results = []
    data_cfg = config["data"]
    book_cfg = config["codebook"]

    # --- datasets -----------------------------------------------------
    def gen(split, n, seed0):
        def build(out_dir, mark):
            write_dataset(out_dir, n, data_cfg["task"], seed0,
                          data_cfg["canvas"], mark)

        params = {"n": n, "task": data_cfg["task"], "seed0": seed0,
                  "canvas": data_cfg["canvas"]}
        result = cache.run(f"gen-{split}", params, {}, seed0, build)
        results.append(result)
        say(f"[{result.name}] {'cached' if result.cached else 'built'} "
            f"-> {result.out_dir}")
        return result

    train_seed0 = stage_seed(seed, "gen-data/train")
    eval_seed0 = stage_seed(seed, "gen-data/eval")
    gen_train = gen("train", data_cfg["n_train"], train_seed0)
    gen_eval = gen("eval", data_cfg["n_eval"], eval_seed0)

    train_manifest = gen_train.out_dir / "manifest.jsonl"
    eval_manifest = gen_eval.out_dir / "manifest.jsonl"

    # --- codebook ------------------------------------------------------
    def build_codebook(out_dir, mark):
        records = read_manifest_records(train_manifest)
        patch = book_cfg["patch_size"]
        vectors = np.concatenate(
            [
                patchify(read_mask(gen_train.out_dir / rec["mask"]), patch).reshape(
                    -1, patch * patch
                )
                for rec in records
            ]
        )
        codebook = train_codebook(vectors, book_cfg["n_codes"],
                                  seed=stage_seed(seed, "codebook"))
        save_codebook_binary(out_dir / "codebook.bin", codebook)

    book_result = cache.run(
        "codebook",
        dict(book_cfg),
        {"train_manifest": file_hash(train_manifest)},
        stage_seed(seed, "codebook"),
        build_codebook,
    )
    results.append(book_result)
    say(f"[codebook] {'cached' if book_result.cached else 'built'}")
    codebook_path = book_result.out_dir / "codebook.bin"

    # --- encode (token files for the training split) -------------------
    def build_encode(out_dir, mark):
        codebook = load_codebook(codebook_path)
        patch = book_cfg["patch_size"]
        records = read_manifest_records(train_manifest)
        for rec in records:
            tokens = encode_mask(read_mask(gen_train.out_dir / rec["mask"]),
                                 codebook, patch)
            payload = {
                "h": tokens.shape[0],
                "w": tokens.shape[1],
                "tokens": flatten_tokens(tokens).tolist(),
                "manifest_hash": mark,
            }
            name = Path(rec["mask"]).stem + ".tokens.json"
            (out_dir / name).write_text(json.dumps(payload, sort_keys=True))

    encode_result = cache.run(
        "encode",
        {"patch_size": book_cfg["patch_size"]},
        {"train_manifest": file_hash(train_manifest),
         "codebook": file_hash(codebook_path)},
        stage_seed(seed, "encode"),
        build_encode,
    )
    results.append(encode_result)
    say(f"[encode] {'cached' if encode_result.cached else 'built'}")

    # --- train ----------------------------------------------------------
    model_seed = stage_seed(seed, "train")
    model_config = model_config_from(config, model_seed)
    train_config = train_config_from(config, model_seed)

    def build_train(out_dir, mark):
        codebook = load_codebook(codebook_path)
        vocab = Vocabulary(book_cfg["n_codes"])
        records = read_manifest_records(train_manifest)
        samples = build_samples(records, gen_train.out_dir, codebook, vocab,
                                book_cfg["patch_size"])
        model = MaskTransformer(model_config, vocab)
        outcome = train(model, train_config, samples,
                        log=lambda e, l: say(f"[train] epoch {e}: loss {l:.4f}"))
        if outcome.aborted:
            raise ValidationError(f"training aborted: {outcome.abort_reason}")
        save_checkpoint(
            out_dir / "model.ckpt",
            model,
            extra={
                "manifest_hash": mark,
                "loss_curve": outcome.loss_curve,
                "steps": outcome.steps,
            },
            codebook=codebook,
        )

    train_result = cache.run(
        "train",
        {"model": model_config.to_dict(), "train": train_config.to_dict()},
        {"train_manifest": file_hash(train_manifest),
         "codebook": file_hash(codebook_path)},
        model_seed,
        build_train,
    )
    results.append(train_result)
    say(f"[train] {'cached' if train_result.cached else 'trained'}")
    ckpt_path = train_result.out_dir / "model.ckpt"

    # --- infer on the held-out split ------------------------------------
    decode_spec = config["decode"]["strategy"]
    infer_seed = stage_seed(seed, "infer")

    def build_infer(out_dir, mark):
        bundle = load_checkpoint(ckpt_path)
        patch = book_cfg["patch_size"]
        strategy = parse_strategy(decode_spec)
        comment = f"run {mark}"
        for rec in read_manifest_records(eval_manifest):
            image = read_image(gen_eval.out_dir / rec["image"])
            patches = patchify_image(image, patch)
            h, w = patches.shape[:2]
            tokens = generate(
                bundle.model,
                bundle.vocab.encode_text(rec["instruction"]),
                patches.reshape(h * w, -1),
                n_tokens=h * w,
                strategy=strategy,
                seed=infer_seed,
            )
            mask = decode_tokens(unflatten_tokens(tokens, h, w), bundle.codebook,
                                 patch)
            write_pgm(out_dir / f"pred_{rec['seed']:06d}.pgm", mask * 255,
                      comment=comment)

    infer_result = cache.run(
        "infer",
        {"decode": decode_spec},
        {"checkpoint": file_hash(ckpt_path),
         "eval_manifest": file_hash(eval_manifest)},
        infer_seed,
        build_infer,
    )
    results.append(infer_result)
    say(f"[infer] {'cached' if infer_result.cached else 'decoded'}")

    # --- eval -------------------------------------------------------------
    eval_cfg = config["eval"]

    def build_eval(out_dir, mark):
        pairs = []
        for rec in read_manifest_records(eval_manifest):
            pred = read_mask(infer_result.out_dir / f"pred_{rec['seed']:06d}.pgm")
            gt = read_mask(gen_eval.out_dir / rec["mask"])
            pairs.append((pred, gt))
        report = evaluate_pairs(
            pairs,
            thresholds=tuple(eval_cfg["thresholds"]),
            strict=eval_cfg["strict"],
            connectivity=eval_cfg["connectivity"],
        )
        write_report(out_dir, report, mark)

    eval_result = cache.run(
        "eval",
        dict(eval_cfg),
        {"eval_manifest": file_hash(eval_manifest),
         "predictions": stable_hash(sorted(
             file_hash(p) for p in infer_result.out_dir.glob("pred_*.pgm")
         ))},
        stage_seed(seed, "eval"),
        build_eval,
    )
    results.append(eval_result)
    say(f"[eval] {'cached' if eval_result.cached else 'scored'}")

    payload = json.loads((eval_result.out_dir / "report.json").read_text())
    report = EvalReport(
        ciou=payload["ciou"],
        miou=payload["miou"],
        mahd=payload["mahd"],
        pair_count=len(read_manifest_records(eval_manifest)),
    )
    return report, eval_result, results
