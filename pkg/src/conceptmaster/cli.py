"""Command-line entry points: train, sample, curate, eval, gen-data."""

import argparse
import json
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from . import evalbench as eb
from . import toydata as td
from .backbone import ModelConfig, param_group
from .conditioning import ConceptRef, ConditioningConfig
from .config import config_hash, load_config
from .datapipe import BackendSuite, CurateConfig, CurationRecord, Taxonomy, DEFAULT_TAXONOMY, run_pipeline, summarize
from .errors import (
    ConceptMasterError,
    MissingArtifactError,
    TooManyConceptsError,
    ValidationError,
)
from .flowmatch import FreezePolicy, Trainer, check_mix_weights, mix_sampler
from .model import ConceptMaster, load_checkpoint, save_checkpoint
from .tensorio import atomic_write_bytes, atomic_write_json, read_tensor, sha256_file, write_tensor

CHECKPOINT_NAME = "checkpoint"


class Run:
    """Collects produced artifacts and writes the run manifest last, atomically."""

    def __init__(self, command, cfg):
        self.command, self.cfg = command, cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.time()
        self.artifacts = []

    def add(self, path):
        path = Path(path)
        self.artifacts.append(path)
        return path

    def finish(self):
        files = []
        for p in self.artifacts:
            items = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
            files.extend(items)
        manifest = {
            "command": self.command,
            "version": self.cfg["version"],
            "config_hash": config_hash(self.cfg),
            "seeds": {"seed": self.cfg["seed"]},
            "wall_time": round(time.time() - self.t0, 3),
            "artifacts": [
                {"path": str(f.relative_to(self.out)), "sha256": sha256_file(f)} for f in sorted(set(files))
            ],
        }
        atomic_write_json(self.out / "run_manifest.json", manifest)
        return manifest


def _write_json(path, obj):
    atomic_write_json(path, obj)
    return path


# -- gen-data ----------------------------------------------------------------------


def cmd_gen_data(cfg, run):
    g = cfg["gen_data"]
    rng = np.random.default_rng(cfg["seed"])
    kind = g["kind"]
    if kind == "scenes":
        root = run.add(run.out / "scenes")
        names = []
        for i in range(g["n"]):
            spec = td.gen_scene(rng, g["concepts"], n_frames=g["n_frames"], height=g["height"], width=g["width"])
            name = f"scene_{i:05d}"
            td.write_scene_dir(root / name, spec)
            names.append(name)
        run.add(_write_json(run.out / "scenes.json", {"scenes": names}))
    elif kind == "corpus":
        vids = run.add(run.out / "videos")
        vids.mkdir(exist_ok=True)
        entries = []
        for cv in corpus_mod.planted_corpus(seed=cfg["seed"]):
            rel = f"videos/{cv.video_id}.f32"
            write_tensor(run.out / rel, corpus_mod.render(cv), fps=15)
            entries.append({
                "video_id": cv.video_id,
                "path": rel,
                "ground_truth": list(cv.ground_truth),
                "flaw": cv.flaw,
                "expected_reason": cv.expected_reason,
            })
        run.add(_write_json(run.out / "corpus.json", {"videos": entries}))
    elif kind == "bench":
        fixtures = g["fixtures"]
        if fixtures not in ("oracle", "swapped", "none"):
            raise ValidationError(f"gen_data.fixtures must be oracle, swapped or none, got {fixtures!r}")
        cases_dir = run.add(run.out / "cases")
        gen_dir = run.out / "generated"
        if fixtures != "none":
            run.add(gen_dir)
            gen_dir.mkdir(exist_ok=True)
        cases = []
        for i in range(g["n"]):
            scenario = eb.SCENARIOS[i % len(eb.SCENARIOS)]
            concepts = eb.bench_concepts(rng, scenario)
            spec = td.gen_scene(
                rng, len(concepts), n_frames=g["n_frames"], height=g["height"], width=g["width"], concepts=concepts
            )
            case_id = f"case_{i:04d}"
            refs = []
            for j, c in enumerate(spec.concepts):
                img, label = td.render_reference(c)
                rel = f"cases/{case_id}/ref_{j}.f32"
                (run.out / rel).parent.mkdir(parents=True, exist_ok=True)
                write_tensor(run.out / rel, img, label=label)
                refs.append({"path": rel, "label": label})
            if fixtures != "none":
                write_tensor(gen_dir / f"{case_id}.f32", td.render_video(_fixture(spec, fixtures)), fps=15)
            cases.append({"case_id": case_id, "scenario": scenario, "caption": td.caption(spec), "refs": refs})
        run.add(_write_json(run.out / "bench.json", {"cases": cases}))
    else:
        raise ValidationError(f"gen_data.kind must be scenes, corpus or bench, got {kind!r}")


def _fixture(spec, kind):
    if kind == "oracle":
        return spec
    # cyclic color shift: every concept is drawn with the next concept's color
    cs = spec.concepts
    swapped = tuple(
        td.ConceptSpec(c.shape, cs[(i + 1) % len(cs)].color, c.size, c.trajectory) for i, c in enumerate(cs)
    )
    return td.SceneSpec(spec.n_frames, spec.height, spec.width, swapped, spec.background_seed, spec.caption_template,
                        spec.background_amplitude)


# -- train -------------------------------------------------------------------------


def build_model(cfg):
    torch.manual_seed(cfg["seed"])
    mc = ModelConfig(**cfg["model"])
    cc = ConditioningConfig(**cfg["conditioning"])
    return ConceptMaster(mc, cc, caption_seed=cfg["caption_seed"])


def load_dataset(path, name):
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"dataset {name!r}: {root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "scene.json").exists())
    samples = [td.read_scene_dir(p) for p in dirs]
    if name == "single_image":
        samples = [{"image": s["video"][0], "refs": s["refs"], "caption": s["caption"]} for s in samples]
    return samples


def cmd_train(cfg, run):
    tc = cfg["train"]
    model = build_model(cfg)
    weights = {k: w for k, w in tc["mix"].items() if tc["datasets"].get(k)}
    if not weights:
        raise ValidationError("no training dataset configured (train.datasets.*)")
    weights = check_mix_weights(weights)
    datasets = {k: load_dataset(tc["datasets"][k], k) for k in weights}
    freeze = FreezePolicy({k: bool(v) for k, v in tc["freeze"].items()})
    trainer = Trainer(model, tc["lr"], freeze, param_group)
    rng = np.random.default_rng(cfg["seed"])
    stream = mix_sampler(rng, weights, datasets) if tc["steps"] > 0 else None
    shape = tuple(cfg["data"]["video_shape"])

    ck_root = run.out / "checkpoints"
    log_path = run.add(run.out / "loss.jsonl")
    kept, best = [], (float("inf"), None)
    lines = []
    window = []
    for step in range(tc["steps"]):
        try:
            samples = [next(stream)[1] for _ in range(tc["batch_size"])]
            batch = model.make_batch(samples, rng, tc["p_caption"], tc["p_refs"], video_shape=shape)
            loss = trainer.step(lambda: model.loss(batch))
        except (ConceptMasterError, ValueError) as exc:
            exc.args = (f"train step {step}: {exc}",)
            raise
        lines.append(json.dumps({"step": step, "loss": loss}))
        window.append(loss)
        every = tc["checkpoint_every"]
        if every > 0 and (step + 1) % every == 0:
            path = ck_root / f"step_{step + 1:07d}"
            save_checkpoint(model, path, freeze, {"step": step + 1})
            kept.append(path)
            mean = float(np.mean(window))
            window = []
            if mean < best[0]:
                best = (mean, path)
            keep = set(kept[-tc["keep_last"]:] if tc["keep_last"] > 0 else []) | {best[1]}
            for old in kept:
                if old not in keep and old.exists():
                    shutil.rmtree(old)
            kept = [p for p in kept if p.exists()]
    atomic_write_bytes(log_path, ("\n".join(lines) + "\n").encode() if lines else b"")
    save_checkpoint(model, run.out / CHECKPOINT_NAME, freeze, {"step": tc["steps"]})
    run.add(run.out / CHECKPOINT_NAME)
    if ck_root.exists():
        run.add(ck_root)
        if best[1] is not None:
            _write_json(ck_root / "best.json", {"path": best[1].name, "mean_loss": best[0]})


# -- sample ------------------------------------------------------------------------


def _load_ref(spec):
    """``path`` or ``path:label``; tensor files may carry the label in their header."""
    path, _, label = spec.partition(":") if ":" in spec and not Path(spec).exists() else (spec, "", "")
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"reference {path} does not exist")
    if path.suffix == ".f32":
        img, header = read_tensor(path)
        label = label or header.get("label", "")
    else:
        from PIL import Image

        img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if not label:
        raise ValidationError(f"reference {path} needs a label (path:label)")
    return str(path), ConceptRef(np.asarray(img, dtype=np.float64), label)


def cmd_sample(cfg, run):
    sc = cfg["sample"]
    if not sc["checkpoint"]:
        raise ValidationError("sample.checkpoint (or --checkpoint) is required")
    model, manifest = load_checkpoint(sc["checkpoint"])
    loaded = [_load_ref(r) for r in sc["refs"]]
    if len(loaded) > model.cond_cfg.max_concepts:
        raise TooManyConceptsError(f"{len(loaded)} references exceed the limit of {model.cond_cfg.max_concepts}")
    refs = [r for _, r in loaded]
    caption = sc["caption"] or None
    video = model.sample(refs, caption, tuple(cfg["data"]["video_shape"]), sc["steps"], sc["cfg_scale"], cfg["seed"])
    run.add(write_tensor(run.out / "video.f32", video, fps=15))
    side = {
        "refs": [{"path": p, "label": r.label, "sha256": sha256_file(p)} for p, r in loaded],
        "caption": sc["caption"],
        "seed": cfg["seed"],
        "steps": sc["steps"],
        "cfg_scale": sc["cfg_scale"],
        "checkpoint_hash": manifest["content_hash"],
    }
    run.add(_write_json(run.out / "video.json", side))


# -- curate ------------------------------------------------------------------------


def _curate_one(args):
    entry, base, curate_cfg = args
    vid = entry["video_id"]
    try:
        video, _ = read_tensor(base / entry["path"])
        rec = run_pipeline(video.astype(np.float64), BackendSuite(), Taxonomy(DEFAULT_TAXONOMY), curate_cfg, vid)
    except (ConceptMasterError, ValueError, OSError) as exc:
        rec = CurationRecord(video_id=vid, n_frames=0, reject_reason="error", error=f"{type(exc).__name__}: {exc}")
    crops = [(e.label, e.crop, e.mask) for e in rec.entities]
    return rec, crops


def cmd_curate(cfg, run):
    cc = dict(cfg["curate"])
    manifest_path = Path(cc.pop("corpus"))
    workers = cc.pop("workers")
    if not manifest_path.is_file():
        raise ValidationError(f"corpus manifest {manifest_path} does not exist")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corpus manifest: {exc}") from exc
    entries = sorted(doc.get("videos", []), key=lambda e: e["video_id"])
    curate_cfg = CurateConfig(**cc)
    jobs = [(e, manifest_path.parent, curate_cfg) for e in entries]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_curate_one, jobs))
    else:
        results = [_curate_one(j) for j in jobs]
    results.sort(key=lambda r: r[0].video_id)
    records = [r for r, _ in results]

    ent_dir = run.out / "entities"
    if ent_dir.exists():
        shutil.rmtree(ent_dir)
    for rec, crops in results:
        for label, crop, mask in crops:
            write_tensor(ent_dir / f"{rec.video_id}__{label}.crop.f32", crop)
            write_tensor(ent_dir / f"{rec.video_id}__{label}.mask.f32", mask.astype(np.float32))
    if ent_dir.exists():
        run.add(ent_dir)
    text = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)
    atomic_write_bytes(run.add(run.out / "records.jsonl"), text.encode())
    gt = {e["video_id"]: e["ground_truth"] for e in entries if "ground_truth" in e}
    summary = summarize(records, gt if gt else None)
    run.add(_write_json(run.out / "summary.json", summary))


# -- eval --------------------------------------------------------------------------


def _eval_one(args):
    case, base, gen_dir = args
    refs = [(read_tensor(base / r["path"])[0].astype(np.float64), r["label"]) for r in case["refs"]]
    video, _ = read_tensor(gen_dir / f"{case['case_id']}.f32")
    return eb.evaluate_case(eb.EvalCase(case["case_id"], refs, case["caption"], video.astype(np.float64),
                                        case.get("scenario", "")))


def cmd_eval(cfg, run):
    ec = cfg["eval"]
    manifest_path = Path(ec["manifest"])
    if not manifest_path.is_file():
        raise ValidationError(f"benchmark manifest {manifest_path} does not exist")
    try:
        cases = json.loads(manifest_path.read_text())["cases"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise ValidationError(f"benchmark manifest: {exc}") from exc
    gen_dir = Path(ec["generated"]) if ec["generated"] else manifest_path.parent / "generated"
    for c in cases:
        if not (gen_dir / f"{c['case_id']}.f32").exists():
            raise MissingArtifactError(f"no generated video for case {c['case_id']!r} in {gen_dir}")
    jobs = [(c, manifest_path.parent, gen_dir) for c in sorted(cases, key=lambda c: c["case_id"])]
    if ec["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ec["workers"]) as pool:
            reports = list(pool.map(_eval_one, jobs))
    else:
        reports = [_eval_one(j) for j in jobs]
    summary = eb.aggregate(reports)
    atomic_write_bytes(run.add(run.out / "report.json"), eb.report_json(summary, reports).encode())
    atomic_write_bytes(run.add(run.out / "table.txt"), eb.format_table(summary).encode())


# -- entry -------------------------------------------------------------------------

COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "curate": cmd_curate,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="conceptmaster", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train on toy scene datasets")
    p = sub.add_parser("sample", parents=[common], help="generate a video from references and a caption")
    p.add_argument("--checkpoint")
    p.add_argument("--ref", action="append", default=[], help="reference as PATH or PATH:LABEL (repeatable)")
    p.add_argument("--caption")
    p = sub.add_parser("curate", parents=[common], help="run the curation pipeline over a corpus manifest")
    p.add_argument("--corpus")
    p.add_argument("--workers", type=int)
    p = sub.add_parser("eval", parents=[common], help="score generated videos against a benchmark manifest")
    p.add_argument("--manifest")
    p.add_argument("--generated")
    p = sub.add_parser("gen-data", parents=[common], help="write toy scenes, a planted corpus or a benchmark")
    p.add_argument("--kind", choices=["scenes", "corpus", "bench"])
    p.add_argument("-n", type=int)
    return parser


def _overrides(args):
    sets = list(args.set)
    extra = {
        "seed": args.seed,
        "out": args.out,
        "sample.checkpoint": getattr(args, "checkpoint", None),
        "sample.caption": getattr(args, "caption", None),
        "curate.corpus": getattr(args, "corpus", None),
        "curate.workers": getattr(args, "workers", None),
        "eval.manifest": getattr(args, "manifest", None),
        "eval.generated": getattr(args, "generated", None),
        "gen_data.kind": getattr(args, "kind", None),
        "gen_data.n": getattr(args, "n", None),
    }
    for k, v in extra.items():
        if v is not None:
            sets.append(f"{k}={json.dumps(v)}")
    if getattr(args, "ref", None):
        sets.append(f"sample.refs={json.dumps(args.ref)}")
    return sets


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        run = Run(args.command, cfg)
        COMMANDS[args.command](cfg, run)
        run.finish()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
