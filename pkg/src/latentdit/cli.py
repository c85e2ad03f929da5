"""Command-line entry point: ingest, train, sample, adapt, translate, evaluate, sweep.

Every command writes ``config.json`` into its run directory holding the command,
its resolved arguments and the full RunConfig. ``latentdit --config
<run>/config.json --run-dir <new>`` with no subcommand replays it.

Errors go to stderr as one JSON object and the process exits with a code per
error family (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ingest, metrics, storage
from .adapters import AdapterHashError, lora_flat
from .autodiff import NonFiniteGradientError
from .backbone import StageContractError
from .codec import CodecConfig, encode
from .config import ConfigError, RunConfig
from .embedder import EmbedderConfig, embed_grid, embed_patch
from .flow import TranslationError, init_velocity_net, stain_translate_pipeline, train_flow
from .model import CheckpointMismatchError, DiffusionModel, attach_adapter, load_adapter, save_adapter
from .pipeline import (JsonlLog, StagePrerequisiteError, generate_variations, sample_from_grid, tile_seed,
                       train_controlnet, train_lora, train_stage)
from .samplers import SamplerConfig, guidance_sweep, sample, select_guidance, sweep_rows

EXIT_CODES = {"internal": 1, "stage prerequisite": 2, "config": 3, "data": 4, "numerical": 5, "contract": 6}

# arguments holding filesystem inputs; resolved to absolute paths before echoing
PATH_ARGS = ("sources", "manifest", "cache_dir", "init", "images", "checkpoint", "references", "adapter",
             "masks", "source", "target", "flow", "a", "b", "table")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def classify(exc: BaseException) -> str:
    if isinstance(exc, TranslationError) and exc.__cause__ is not None:
        return classify(exc.__cause__)
    if isinstance(exc, StagePrerequisiteError):
        return "stage prerequisite"
    if isinstance(exc, (StageContractError, CheckpointMismatchError, AdapterHashError)):
        return "contract"
    if isinstance(exc, (FloatingPointError, NonFiniteGradientError)):
        return "numerical"
    if isinstance(exc, (FileNotFoundError, storage.FormatError, OSError)):
        return "data"
    if isinstance(exc, (ConfigError, ValueError)):
        return "config"
    return "internal"


# helpers ------------------------------------------------------------------------------------

class Context:
    def __init__(self, args, cfg: RunConfig, run_dir: Path):
        self.args = args
        self.cfg = cfg
        self.run_dir = run_dir

    def path(self, *parts) -> Path:
        p = self.run_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def echo(self) -> dict:
        """Write and print the resolved command + RunConfig."""
        doc = {"command": self.args.command, "args": command_args(self.args), "run": self.cfg.to_dict()}
        text = json.dumps(doc, sort_keys=True, indent=2)
        print(text)
        if not self.args.dry_run:
            self.path("config.json").write_text(text + "\n", encoding="utf-8")
        return doc


GLOBAL_ARGS = ("command", "config", "seed", "run_dir", "dry_run", "func", "ingest_command")


def command_args(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in GLOBAL_ARGS}
    if getattr(args, "ingest_command", None):
        d["ingest_command"] = args.ingest_command
    return d


def resolve_paths(args) -> None:
    for name in PATH_ARGS:
        v = getattr(args, name, None)
        if isinstance(v, str) and v and v != "identity":
            setattr(args, name, str(Path(v).resolve()))


def list_images(directory, with_masks: bool = False) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory {d} does not exist")
    files = sorted((p for p in d.rglob("*.png") if not p.stem.endswith("_mask")),
                   key=lambda p: p.relative_to(d).as_posix())
    if not files:
        raise FileNotFoundError(f"no PNG images in {d}")
    if with_masks:
        for p in files:
            m = p.with_name(p.stem + "_mask.png")
            if not m.exists():
                raise FileNotFoundError(f"mask {m} missing for {p.name}")
    return files


def load_images(directory) -> Tuple[List[Path], np.ndarray]:
    files = list_images(directory)
    return files, np.stack([ingest.load_image(p) for p in files])


def latents_and_grids(images: np.ndarray, model_like=None) -> Tuple[np.ndarray, np.ndarray]:
    codec = model_like.codec if model_like else CodecConfig()
    emb = model_like.embedder if model_like else EmbedderConfig()
    if images.shape[1:3] != (32, 32):
        raise StageContractError(f"training images must be 32x32, got {images.shape[1:3]}")
    return encode(images, codec), np.stack([embed_grid(im, 4, 4, emb).tokens for im in images])


def split_to_size(images: np.ndarray, size: int) -> np.ndarray:
    """Cut (N, H, W, ...) into row-major (N * k * k, size, size, ...) tiles."""
    n, h, w = images.shape[:3]
    if h % size or w % size or h != w:
        raise StageContractError(f"images {h}x{w} cannot be cut into {size}x{size} tiles")
    k = h // size
    extra = images.shape[3:]
    x = images.reshape((n, k, size, k, size) + extra).swapaxes(2, 3)
    return x.reshape((n * k * k, size, size) + extra)


def load_references(directory, model: DiffusionModel, tile: bool) -> Tuple[List[str], np.ndarray]:
    """Reference images keyed by stem; ``tile`` cuts larger images into stage-sized tiles."""
    files, imgs = load_images(directory)
    ids = [p.stem for p in files]
    size = model.image_size
    if tile and imgs.shape[1] != size:
        k = (imgs.shape[1] // size) ** 2
        imgs = split_to_size(imgs, size)
        ids = [f"{s}_t{j}" for s in ids for j in range(k)]
    return ids, imgs


def load_model(ctx: Context, checkpoint: str, adapter: Optional[str] = None) -> DiffusionModel:
    model = DiffusionModel.load(checkpoint)
    if adapter:
        tensors, header = load_adapter(adapter, checkpoint)
        attach_adapter(model, tensors, header)
    return model


def write_jsonl(path: Path, records) -> None:
    ingest.write_manifest(path, records)


# commands ------------------------------------------------------------------------------------

def cmd_ingest(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    sub = a.ingest_command
    if sub == "toy":
        spec = ingest.ToyCorpusSpec(generator=a.generator, n=a.n, resolution=a.resolution, seed=cfg.seed,
                                    density=a.density, classes=a.classes)
        ctx.echo()
        if a.dry_run:
            return {}
        out = ctx.run_dir / "corpus"
        sources = ingest.write_toy_corpus(spec, out)
        rel = [[str(Path(p).relative_to(out)), tag] for p, tag in sources]
        (out / "sources.json").write_text(json.dumps(rel, indent=1) + "\n")
        return {"images": len(sources), "corpus": str(out)}
    if sub == "tile":
        src = Path(a.sources)
        if src.is_file():
            entries = [(str(src.parent / p), tag) for p, tag in json.loads(src.read_text())]
        else:
            entries = [(str(p), "") for p in list_images(src)]
        ctx.echo()
        if a.dry_run:
            return {}
        ing = cfg.ingest
        records = ingest.build_manifest(entries, a.size or ing["size"], ing["test_fraction"], cfg.seed,
                                        a.stride or ing["stride"], filter_tissue=not a.no_filter)
        ingest.check_manifest(records)
        write_jsonl(ctx.path("manifest.jsonl"), records)
        return {"patches": len(records)}
    if sub == "filter":
        ctx.echo()
        if a.dry_run:
            return {}
        records = ingest.read_manifest(a.manifest)
        kept, images = [], {}
        for r in records:
            if r["source"] not in images:
                images[r["source"]] = ingest.load_image(r["source"])
            s = r["size"]
            patch = images[r["source"]][r["y"]:r["y"] + s, r["x"]:r["x"] + s]
            keep, frac = ingest.tissue_filter(patch, cfg.ingest["background"], cfg.ingest["min_fraction"])
            if keep:
                kept.append(r)
        write_jsonl(ctx.path("manifest.filtered.jsonl"), kept)
        return {"kept": len(kept), "dropped": len(records) - len(kept)}
    if sub == "cache":
        ctx.echo()
        if a.dry_run:
            return {}
        records = ingest.read_manifest(a.manifest)
        report = ingest.precompute_caches(records, ctx.run_dir / "cache")
        ctx.path("cache_report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
        return report
    raise ConfigError(f"unknown ingest command {sub!r}")


def _training_data(ctx: Context) -> Tuple[np.ndarray, np.ndarray]:
    a = ctx.args
    if a.images:
        _, imgs = load_images(a.images)
        return latents_and_grids(imgs)
    if a.manifest:
        records = ingest.read_manifest(a.manifest)
        cache_dir = a.cache_dir or str(Path(a.manifest).parent / "cache")
        return ingest.load_cached(records, cache_dir, "train")
    raise ConfigError("train needs --images or --manifest")


def cmd_train(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    if a.stage not in (1, 2, 3):
        raise ConfigError("--stage must be 1, 2 or 3")
    if a.stage > 1 and not a.init:
        found = sorted((ctx.run_dir / "checkpoints").glob(f"stage{a.stage - 1}_step*.ckpt"))
        if not found:
            raise StagePrerequisiteError(f"stage prerequisite: stage {a.stage} needs a stage {a.stage - 1} "
                                         f"checkpoint (pass --init or train stage {a.stage - 1} first)")
        a.init = str(found[-1].resolve())
    if a.init and not Path(a.init).exists():
        raise StagePrerequisiteError(f"stage prerequisite: checkpoint {a.init} not found")
    ctx.echo()
    if a.dry_run:
        return {}
    lat, grids = _training_data(ctx)
    init = DiffusionModel.load(a.init) if a.init else None
    model, losses = train_stage(lat, grids, cfg.stage_spec(a.stage), cfg.train_cfg(), init=init,
                                backbone=None if init else cfg.backbone_cfg(), run_dir=ctx.run_dir,
                                schedule=cfg.schedule_cfg())
    ckpt = ctx.run_dir / "checkpoints" / f"stage{a.stage}_step{model.step}.ckpt"
    return {"checkpoint": str(ckpt), "initial_loss": losses[0] if losses else None,
            "final_loss": float(np.mean(losses[-50:])) if losses else None}


def cmd_sample(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    model = load_model(ctx, a.checkpoint, a.adapter)
    masks = None
    if a.masks:
        files = sorted(Path(a.masks).rglob("*_mask.png"))
        if not files:
            raise FileNotFoundError(f"no *_mask.png files in {a.masks}")
        masks = np.stack([ingest.load_mask(p) for p in files])
        if a.tile and masks.shape[1] != model.image_size:
            masks = split_to_size(masks, model.image_size)
    refs = None
    if a.references:
        _, refs = load_references(a.references, model, a.tile)
    sampler = cfg.sampler_cfg(guidance=a.guidance if a.guidance is not None else cfg.sampler["guidance"])
    out_dir = ctx.run_dir / "samples"
    manifest = []
    for k in range(a.num):
        cond = None
        if refs is not None:
            ref = refs[k % len(refs)]
            cond = embed_grid(ref, model.grid_side, model.grid_side, model.embedder).tokens
        mask = masks[k % len(masks)] if masks is not None else None
        eps_fn = model.eps_fn(mask, a.control_scale) if mask is not None else model.eps_fn()
        seed = tile_seed(sampler.seed, k, 0)
        if cond is None:
            sc = SamplerConfig(sampler.kind, sampler.steps, 0.0, seed)
            img = model.decode(sample(eps_fn, None, model.latent_shape(1), sc, model.schedule)[0])
        else:
            img = sample_from_grid(model, cond, sampler, seed, eps_fn)
        name = f"sample_{k:05d}.png"
        ingest.save_image(out_dir / name, img)
        manifest.append({"id": name, "seed": seed, "conditional": cond is not None})
    write_jsonl(ctx.path("samples.jsonl"), manifest)
    return {"samples": a.num}


def cmd_variations(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    model = load_model(ctx, a.checkpoint, a.adapter)
    ids, refs = load_references(a.references, model, a.tile)
    sampler = cfg.sampler_cfg(guidance=a.guidance if a.guidance is not None else cfg.sampler["guidance"])
    outputs, manifest = generate_variations(refs, model, a.n, sampler, ids=ids)
    out_dir = ctx.run_dir / "variations"
    for rec in manifest:
        i = ids.index(rec["reference"])
        ingest.save_image(out_dir / f"{rec['id']}.png", outputs[i][rec["index"]])
    write_jsonl(ctx.path("variations.jsonl"), manifest)
    return {"variations": len(manifest)}


def cmd_controlnet(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    model = DiffusionModel.load(a.checkpoint)
    files = list_images(a.images, with_masks=True)
    imgs = np.stack([ingest.load_image(p) for p in files])
    masks = np.stack([ingest.load_mask(p.with_name(p.stem + "_mask.png")) for p in files])
    size = model.image_size
    imgs, masks = split_to_size(imgs, size), split_to_size(masks, size)
    lat = encode(imgs, model.codec)
    g = model.grid_side
    grids = np.stack([embed_grid(im, g, g, model.embedder).tokens for im in imgs])
    cc = cfg.controlnet
    log = JsonlLog(ctx.run_dir / "logs" / "controlnet.jsonl")
    model, losses = train_controlnet(model, lat, grids, masks, cc["steps"], cc["batch"], cfg.train_cfg(),
                                     cc["scale"], log)
    path = ctx.path("adapters", "controlnet.ckpt")
    save_adapter(path, "controlnet", model.control, storage.file_sha256(a.checkpoint),
                 {"scale": cc["scale"], "steps": cc["steps"]})
    return {"adapter": str(path), "final_loss": float(np.mean(losses[-50:])) if losses else None}


def cmd_lora(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    model = DiffusionModel.load(a.checkpoint)
    _, imgs = load_images(a.images)
    lat, grids = latents_and_grids(imgs, model)
    lc = cfg.lora
    log = JsonlLog(ctx.run_dir / "logs" / "lora.jsonl")
    model, losses = train_lora(model, lat, grids, lc["steps"], lc["batch"], cfg.train_cfg(), lc["rank"],
                               lc["alpha"], log)
    path = ctx.path("adapters", "lora.ckpt")
    save_adapter(path, "lora", lora_flat(model.lora), storage.file_sha256(a.checkpoint),
                 {"alpha": lc["alpha"], "rank": lc["rank"], "steps": lc["steps"]})
    return {"adapter": str(path), "final_loss": float(np.mean(losses[-50:])) if losses else None}


def _tile_embeddings(images: np.ndarray, emb: EmbedderConfig, tile: int = 8) -> np.ndarray:
    return embed_patch(split_to_size(images, tile), emb)


def cmd_flow_train(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    sf, src = load_images(a.source)
    tf, tgt = load_images(a.target)
    if len(sf) != len(tf):
        raise ValueError(f"source and target directories hold {len(sf)} and {len(tf)} images; pairs needed")
    fc = cfg.flow_cfg()
    emb = EmbedderConfig()
    log = JsonlLog(ctx.run_dir / "logs" / "flow.jsonl")
    P, losses = train_flow(_tile_embeddings(src, emb), _tile_embeddings(tgt, emb), fc, log)
    path = ctx.path("flow.ckpt")
    storage.save_checkpoint(path, P, {"kind": "flow", "config": fc.to_dict()})
    return {"flow": str(path), "final_loss": float(np.mean(losses[-50:])) if losses else None}


def load_flow(spec: str, cfg: RunConfig) -> Dict[str, np.ndarray]:
    if spec == "identity":
        return init_velocity_net(cfg.flow_cfg())
    tensors, header = storage.load_checkpoint(spec)
    if header.get("kind") != "flow":
        raise CheckpointMismatchError(f"{spec} is not a flow checkpoint")
    return tensors


def cmd_translate(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    model = load_model(ctx, a.checkpoint, a.adapter)
    flow = load_flow(a.flow, cfg)
    ids, src = load_references(a.sources, model, a.tile)
    sampler = cfg.sampler_cfg(guidance=a.guidance if a.guidance is not None else cfg.sampler["guidance"])
    outputs = stain_translate_pipeline(src, flow, model, sampler, cfg.flow["euler_steps"],
                                       cfg.flow["time_features"])
    out_dir = ctx.run_dir / "translated"
    manifest = []
    for i, (name, img) in enumerate(zip(ids, outputs)):
        ingest.save_image(out_dir / f"{name}.png", img)
        manifest.append({"id": name, "source": name, "seed": tile_seed(sampler.seed, i, 0)})
    write_jsonl(ctx.path("translated.jsonl"), manifest)
    return {"translated": len(outputs)}


def cmd_eval(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    _, A = load_images(a.a)
    _, B = load_images(a.b)
    ev = cfg.eval
    ext = EmbedderConfig(seed=ev["extractor_seed"])
    proto = {"n_a": len(A), "n_b": len(B), "extractor": ext.extractor_id, "seed": cfg.seed,
             "eps_reg": ev["eps_reg"]}
    reports = [metrics.MetricReport("fid", metrics.fid(A, B, ext, ev["eps_reg"]), proto)]
    fa, fb = metrics.features(A, ext), metrics.features(B, ext)
    subset = min(ev["kid_subset"], len(A), len(B))
    if subset >= 2:
        reports.append(metrics.MetricReport(
            "kid", metrics.kid(fa, fb, 3, subset, ev["kid_subsets"], cfg.seed),
            dict(proto, subset_size=subset, subsets=ev["kid_subsets"])))
    if len(A) == len(B) and A.shape == B.shape:
        reports.append(metrics.MetricReport("embedding_similarity",
                                            metrics.embedding_similarity(A, B, ext), proto))
        reports.append(metrics.MetricReport("psnr", float(np.mean([metrics.psnr(x, y) for x, y in zip(A, B)])),
                                            proto))
        if A.shape[1] >= 8:
            reports.append(metrics.MetricReport(
                "ssim", float(np.mean([metrics.ssim(x, y) for x, y in zip(A, B)])), dict(proto, window=8)))
    doc = [json.loads(r.to_json()) for r in reports]
    ctx.path("report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return {r.metric: r.value for r in reports}


def cmd_sweep(ctx: Context) -> dict:
    a, cfg = ctx.args, ctx.cfg
    ctx.echo()
    if a.dry_run:
        return {}
    result = {}
    if a.table:
        doc = json.loads(Path(a.table).read_text())
        ws = [float(w) for w in doc["ws"]]
        for name, values in doc["rows"].items():
            if len(values) != len(ws):
                raise ValueError(f"row {name!r} has {len(values)} values for {len(ws)} guidance scales")
            table = dict(zip(ws, map(float, values)))
            result[name] = {"rows": sweep_rows(table), "best_w": select_guidance(table)}
    else:
        if not (a.checkpoint and a.references):
            raise ConfigError("sweep needs --table, or --checkpoint with --references")
        model = load_model(ctx, a.checkpoint, a.adapter)
        _, refs = load_references(a.references, model, a.tile)
        ws = [float(w) for w in a.ws.split(",")]
        ext = EmbedderConfig(seed=cfg.eval["extractor_seed"])

        def generate(w):
            outs, _ = generate_variations(refs, model, 1, cfg.sampler_cfg(guidance=w))
            return np.stack([o[0] for o in outs])

        table, best = guidance_sweep(generate, lambda imgs: metrics.fid(imgs, refs, ext, cfg.eval["eps_reg"]), ws)
        result["live"] = {"rows": sweep_rows(table), "best_w": best}
    ctx.path("sweep.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    return {k: v["best_w"] for k, v in result.items()}


# parser ------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentdit", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="RunConfig JSON (or a config.json echo to replay)")
    p.add_argument("--seed", type=int, help="override the RunConfig seed")
    p.add_argument("--run-dir", default="run", help="directory receiving every output")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ing = sub.add_parser("ingest", help="build corpora, manifests and caches")
    isub = ing.add_subparsers(dest="ingest_command", parser_class=_Parser)
    toy = isub.add_parser("toy", help="generate a procedural toy corpus")
    toy.add_argument("--generator", default="textures", choices=["textures", "two-domain", "masked-cells"])
    toy.add_argument("--n", type=int, default=64)
    toy.add_argument("--resolution", type=int, default=32)
    toy.add_argument("--density", type=float, default=0.3)
    toy.add_argument("--classes", type=int, default=4)
    tile = isub.add_parser("tile", help="tile source images into a manifest")
    tile.add_argument("--sources", required=True, help="image directory or sources.json")
    tile.add_argument("--size", type=int)
    tile.add_argument("--stride", type=int)
    tile.add_argument("--no-filter", action="store_true")
    filt = isub.add_parser("filter", help="apply the tissue filter to a manifest")
    filt.add_argument("--manifest", required=True)
    cache = isub.add_parser("cache", help="precompute latent and condition caches")
    cache.add_argument("--manifest", required=True)

    tr = sub.add_parser("train", help="train one curriculum stage")
    tr.add_argument("--stage", type=int, required=True)
    tr.add_argument("--images", help="directory of 32x32 training images")
    tr.add_argument("--manifest")
    tr.add_argument("--cache-dir")
    tr.add_argument("--init", help="previous-stage checkpoint")

    def sampling(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--adapter", help="LoRA or ControlNet checkpoint trained on --checkpoint")
        sp.add_argument("--guidance", type=float)
        sp.add_argument("--tile", action="store_true", help="cut larger inputs into stage-sized tiles")

    sm = sub.add_parser("sample", help="draw samples (conditional with --references)")
    sampling(sm)
    sm.add_argument("--num", type=int, default=8)
    sm.add_argument("--references")
    sm.add_argument("--masks", help="directory of mask PNGs for a ControlNet adapter")
    sm.add_argument("--control-scale", type=float, default=1.0)

    va = sub.add_parser("variations", help="sample variations of reference images")
    sampling(va)
    va.add_argument("--references", required=True)
    va.add_argument("--n", type=int, default=1)

    cn = sub.add_parser("controlnet-train", help="train a mask ControlNet on a frozen base")
    cn.add_argument("--checkpoint", required=True)
    cn.add_argument("--images", required=True, help="images with <name>_mask.png masks")

    lo = sub.add_parser("lora-train", help="train LoRA adapters on a frozen base")
    lo.add_argument("--checkpoint", required=True)
    lo.add_argument("--images", required=True)

    fl = sub.add_parser("flow-train", help="train the embedding rectified flow on paired images")
    fl.add_argument("--source", required=True)
    fl.add_argument("--target", required=True)

    tl = sub.add_parser("translate", help="translate source tiles to the target domain")
    sampling(tl)
    tl.add_argument("--flow", required=True, help="flow checkpoint or 'identity'")
    tl.add_argument("--sources", required=True)

    ev = sub.add_parser("eval", help="compare two image directories")
    ev.add_argument("--a", required=True)
    ev.add_argument("--b", required=True)

    sw = sub.add_parser("sweep", help="guidance-scale selection")
    sw.add_argument("--table", help="JSON {ws: [...], rows: {name: [metric per w]}}")
    sw.add_argument("--checkpoint")
    sw.add_argument("--adapter")
    sw.add_argument("--references")
    sw.add_argument("--tile", action="store_true")
    sw.add_argument("--ws", default="1,1.2,1.4,1.6,1.8,2,3,5")
    return p


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "sample": cmd_sample, "variations": cmd_variations,
            "controlnet-train": cmd_controlnet, "lora-train": cmd_lora, "flow-train": cmd_flow_train,
            "translate": cmd_translate, "eval": cmd_eval, "sweep": cmd_sweep}


def _resolve(argv: Optional[Sequence[str]]) -> Context:
    args = build_parser().parse_args(argv)
    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
    if args.command is None:
        if "command" not in doc:
            raise UsageError("no command given and --config is not a replayable echo")
        replay = dict(doc["args"])
        for k, v in replay.items():
            setattr(args, k, v)
        args.command = doc["command"]
    if args.command == "ingest" and not getattr(args, "ingest_command", None):
        raise UsageError("ingest needs a subcommand: toy, tile, filter or cache")
    cfg = RunConfig.from_dict(doc.get("run", doc) if "command" in doc else doc)
    if args.seed is not None:
        cfg = RunConfig.from_dict(dict(cfg.to_dict(), seed=args.seed))
    resolve_paths(args)
    return Context(args, cfg, Path(args.run_dir).resolve())


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        ctx = _resolve(argv)
        result = COMMANDS[ctx.args.command](ctx)
        if not ctx.args.dry_run:
            print(json.dumps({"status": "ok", "result": result}, sort_keys=True, default=str))
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        family = classify(exc)
        err = {"error": family, "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_CODES[family]


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
