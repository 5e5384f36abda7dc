"""Two-stage generation pipeline orchestration.

Stage 1 creates a full rolled ridge pattern for a new identity (procedural
by default, optionally via the diffusion model itself). Stage 2 renders
impressions: ridge silhouette -> acquisition-specific distortion -> mask ->
conditional denoising with (text, style, control). Every artifact carries
enough metadata to be regenerated bit-identically.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import (condnet, config, corpus, diffusion, evalsuite, identityops,
               masterprint, numcore, promptgrammar, styleembed)


class DataError(ValueError):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# training

def _unet_config(cfg: config.RunConfig, vocab) -> condnet.UNetConfig:
    return condnet.UNetConfig(
        image_size=cfg.corpus.resolution,
        base_channels=cfg.train.base_channels,
        lora_rank=cfg.train.lora_rank,
        style_weight=cfg.train.style_weight,
        vocab_checksum=vocab.checksum)


def _trainable(model, mode: str) -> dict:
    if mode == "adapters":
        return {**model.adapter_parameters(), **model.control_parameters()}
    return model.checkpoint_tensors()


def _save_train_checkpoint(path, model, state: numcore.AdamState, meta: dict):
    tensors = {n: p.detach().numpy() for n, p in model.checkpoint_tensors().items()}
    for n, m in state.m.items():
        tensors[f"adam.m.{n}"] = m.numpy()
        tensors[f"adam.v.{n}"] = state.v[n].numpy()
    numcore.save_checkpoint(path, tensors, meta)


def load_model(checkpoint_path, vocab=None):
    """Rebuild a CondUNet from a GPRNT1 checkpoint; returns (model, meta)."""
    tensors, meta = numcore.load_checkpoint(checkpoint_path)
    vocab = vocab or promptgrammar.default_vocabulary()
    if meta.get("vocab_checksum") and meta["vocab_checksum"] != vocab.checksum:
        raise DataError(
            f"checkpoint vocabulary checksum {meta['vocab_checksum']} does not "
            f"match the active vocabulary {vocab.checksum}")
    ucfg = condnet.UNetConfig(**meta["unet"])
    model = condnet.build_model(ucfg, seed=meta.get("seed", 0), vocab=vocab)
    model.load_tensors({n: t for n, t in tensors.items() if not n.startswith("adam.")})
    return model, meta


def cmd_train(cfg: config.RunConfig, corpus_dir, out_path, progress=None):
    """Train the denoiser on a corpus; writes checkpoint and loss log.

    Returns (model, losses). A NonFiniteLoss aborts after re-saving the last
    good periodic checkpoint.
    """
    warn = config.paper_scale_warning(cfg)
    if warn:
        _log(f"warning: {warn}")
    corpus_dir = Path(corpus_dir)
    if not (corpus_dir / "meta.jsonl").exists():
        raise DataError(f"no corpus at {corpus_dir}")
    vocab = promptgrammar.default_vocabulary()
    records = corpus.load_corpus(corpus_dir)
    images, controls, specs, tokens = corpus.corpus_tensors(corpus_dir, records, vocab)
    n = len(records)

    schedule = diffusion.make_schedule(cfg.train.schedule, cfg.train.T)
    start_step = 0
    state = numcore.AdamState()
    if cfg.train.resume:
        model, meta = load_model(cfg.train.resume, vocab)
        tensors, _ = numcore.load_checkpoint(cfg.train.resume)
        start_step = meta["step"]
        state.step = meta["adam_step"]
        params = _trainable(model, cfg.train.mode)
        for name in params:
            if f"adam.m.{name}" in tensors:
                state.m[name] = torch.from_numpy(tensors[f"adam.m.{name}"].reshape(params[name].shape))
                state.v[name] = torch.from_numpy(tensors[f"adam.v.{name}"].reshape(params[name].shape))
    else:
        model = condnet.build_model(_unet_config(cfg, vocab), seed=cfg.seed, vocab=vocab)
        params = _trainable(model, cfg.train.mode)

    x_all = torch.from_numpy(images[:, None].astype(np.float32)) * 2.0 - 1.0
    c_all = torch.from_numpy(controls[:, None].astype(np.float32))
    s_all = torch.from_numpy(tokens)

    meta = {
        "unet": asdict(model.cfg), "schedule": schedule.to_meta(),
        "vocab_checksum": vocab.checksum, "seed": cfg.seed,
        "mode": cfg.train.mode, "run_config": cfg.to_text(),
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    log_path = out_path.with_suffix(".log")
    losses = []
    snapshot_every = 500
    log_fh = open(log_path, "a" if cfg.train.resume else "w")
    try:
        for step in range(start_step, cfg.train.steps):
            # a fresh per-step generator keys randomness to (seed, step) so
            # a resumed run reproduces the original trajectory exactly
            g = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
            idx = torch.randint(0, n, (min(cfg.train.batch, n),), generator=g)
            batch = x_all[idx]
            cond = {
                "text": model.embed_specs([specs[i] for i in idx.tolist()]),
                "style": s_all[idx],
                "control": c_all[idx],
            }
            try:
                loss = diffusion.training_step(model, batch, cond, schedule,
                                               drop_prob=cfg.train.drop_prob,
                                               generator=g)
                for p in params.values():
                    p.grad = None
                loss.backward()
                lr = numcore.cosine_lr(step, cfg.train.steps, cfg.train.lr,
                                       warmup=cfg.train.warmup)
                numcore.adam_step(params, state, lr)
            except (diffusion.NonFiniteLoss, numcore.NonFiniteGradient):
                _log(f"aborting at step {step}: non-finite loss/gradient; "
                     f"last good checkpoint at {out_path}")
                raise
            losses.append(float(loss.detach()))
            if step % cfg.train.log_every == 0:
                log_fh.write(f"{step}\t{losses[-1]:.6f}\n")
            if (step + 1) % snapshot_every == 0 or step + 1 == cfg.train.steps:
                meta["step"] = step + 1
                meta["adam_step"] = state.step
                _save_train_checkpoint(out_path, model, state, meta)
                log_fh.flush()
                if progress:
                    progress(step + 1, cfg.train.steps, float(np.mean(losses[-100:])))
    finally:
        log_fh.close()
    return model, losses


# ---------------------------------------------------------------------------
# generation

def _style_tokens_for(source: str, corpus_dir, extractor=None):
    """Resolve a style source to (tokens (k,d), provenance string)."""
    if source.startswith("reference:"):
        path = source.split(":", 1)[1]
        if not Path(path).exists():
            raise DataError(f"style reference image not found: {path}")
        img = corpus.load_png(path)
        emb = styleembed.extract_style(img, extractor)
        return styleembed.style_tokens(emb).tokens, source
    style = source.split(":", 1)[1]
    if style not in corpus.STYLES:
        raise DataError(f"unknown corpus style {style!r}; have {list(corpus.STYLES)}")
    corpus_dir = Path(corpus_dir)
    if not (corpus_dir / "meta.jsonl").exists():
        raise DataError(f"style source needs a corpus at {corpus_dir}")
    records = [r for r in corpus.load_corpus(corpus_dir) if r.style == style]
    if not records:
        raise DataError(f"corpus has no images of style {style!r}")
    cache = styleembed.StyleCache(corpus_dir / "styles" / "cache.bin")
    vecs = [cache.get_or_compute(corpus.load_png(corpus_dir / r.image_path)).vector
            for r in records]
    emb = styleembed.StyleEmbedding(np.mean(vecs, 0),
                                    extractor_seed=(extractor or
                                                    styleembed._default_extractor()).seed)
    return styleembed.style_tokens(emb).tokens, source


def _stage1_silhouette(cfg, model, schedule, cls, seed, render_size):
    """Full-resolution rolled ridge pattern and its minutiae for one identity."""
    if cfg.generate.stage1 == "procedural":
        mp = masterprint.generate_masterprint(cls, seed, size=render_size)
        return mp.image, mp.minutiae
    # diffusion stage 1: class-prompted sample, null style, no control
    spec = promptgrammar.stage1_spec(cls)
    sampler = diffusion.SamplerConfig(cfg.generate.sampler, cfg.generate.steps_used,
                                      cfg.generate.guidance, style_weight=0.0)
    g = torch.Generator().manual_seed(seed)
    cond = {"text": model.embed_specs([spec]), "style": model.null_style(1),
            "control": None}
    small = diffusion.sample(model, cond, sampler, schedule, g)[0, 0].numpy()
    zoom = render_size / small.shape[0]
    img = np.clip(ndimage.zoom(small, zoom, order=3), 0.0, 1.0)
    sil = identityops.extract_ridge(img)
    skel = masterprint.skeletonize_ridges(sil.image)
    return img, masterprint.extract_minutiae(skel)


def cmd_generate(cfg: config.RunConfig, checkpoint_path, out_dir, progress=None):
    """Emit an N-identity x M-impression dataset plus manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    model, meta = load_model(checkpoint_path)
    model.eval()
    schedule = diffusion.make_schedule(meta["schedule"]["kind"], meta["schedule"]["T"])
    sampler = diffusion.SamplerConfig(cfg.generate.sampler, cfg.generate.steps_used,
                                      cfg.generate.guidance, cfg.generate.style_weight)
    sampler.validate(schedule)
    render_size = cfg.corpus.render_size
    masks = identityops.build_default_mask_bank((render_size, render_size),
                                                seed=cfg.seed + 1)
    grids = identityops.build_default_distortion_bank((render_size, render_size),
                                                      seed=cfg.seed + 2)
    tokens_np, provenance = _style_tokens_for(cfg.generate.style_source, cfg.corpus_dir)
    acqs = [a.strip() for a in cfg.generate.acquisition_mix.split(",") if a.strip()]
    quals = [q.strip() for q in cfg.generate.quality_mix.split(",") if q.strip()]
    vocab = model.vocab

    records = []
    for ident in range(cfg.generate.ids):
        cls = masterprint.CLASSES[ident % len(masterprint.CLASSES)]
        # salted so generated identities never reuse corpus masterprint seeds
        id_seed = (cfg.seed + 0x5F5E107) * 100_003 + ident
        image, minutiae = _stage1_silhouette(cfg, model, schedule, cls,
                                             id_seed, render_size)
        silhouette = identityops.extract_ridge(image).image
        for imp in range(cfg.generate.impressions):
            acq = acqs[imp % len(acqs)]
            quality = quals[(ident + imp) % len(quals)]
            rng = masterprint.make_rng(id_seed * 31 + imp)
            gi, grid = grids.sample(acq, rng)
            fld = identityops.densify_grid(grid, (render_size, render_size))
            warped = identityops.apply_distortion(silhouette.astype(float), fld,
                                                  background=0.0) > 0.5
            mi, mask = masks.sample(acq, rng)
            control_full = warped & mask
            ctl = corpus.downsample(corpus.center_crop(control_full.astype(float)))

            sensor = corpus.STYLES.get(provenance.split(":", 1)[1],
                                       (None, "ink on stock paper", None))[1] \
                if provenance.startswith("corpus:") else "smartphone"
            spec = promptgrammar.PromptSpec(
                acquisition=acq, pattern_class=cls, quality=quality,
                sensor=sensor, sensing="FTIR optical",
                sensing_omitted=(sensor == "crime scene"))
            spec.validate(vocab)

            g = torch.Generator().manual_seed(id_seed * 1_000_003 + imp)
            cond = {
                "text": model.embed_specs([spec]),
                "style": torch.from_numpy(tokens_np[None].astype(np.float32)),
                "control": torch.from_numpy(ctl[None, None].astype(np.float32)),
            }
            out = diffusion.sample(model, cond, sampler, schedule, g)[0, 0].numpy()

            mdisp = identityops.displace_minutiae(minutiae, fld,
                                                  (render_size, render_size))
            if len(mdisp):
                keep = mask[np.clip(mdisp[:, 1].astype(int), 0, render_size - 1),
                            np.clip(mdisp[:, 0].astype(int), 0, render_size - 1)]
                mdisp = mdisp[keep]

            stem = f"{ident:08x}_{imp:02d}"
            corpus.save_png(out_dir / "images" / f"{stem}.png", out)
            corpus.save_png(out_dir / "images" / f"{stem}_ctrl.png", ctl)
            records.append({
                "identity": ident, "impression": imp, "seed": id_seed,
                "pattern_class": cls,
                "prompt": promptgrammar.format_prompt(spec, vocab),
                "spec": asdict(spec),
                "style_provenance": provenance,
                "mask_id": f"{acq}/{mi:02d}", "grid_id": f"{acq}/{gi:02d}",
                "sampler": asdict(sampler),
                "stage1": cfg.generate.stage1,
                "image_path": f"images/{stem}.png",
                "control_path": f"images/{stem}_ctrl.png",
                "minutiae": np.asarray(mdisp, float).round(3).tolist(),
            })
        if progress:
            progress(ident + 1, cfg.generate.ids)

    with open(out_dir / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out_dir / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    identityops.save_banks(out_dir / "bank", masks, grids)
    return records


# ---------------------------------------------------------------------------
# evaluation

def _load_manifest(dataset_dir):
    dataset_dir = Path(dataset_dir)
    for name in ("manifest.jsonl", "meta.jsonl"):
        p = dataset_dir / name
        if p.exists():
            with open(p) as fh:
                return [json.loads(line) for line in fh if line.strip()]
    raise DataError(f"no manifest.jsonl or meta.jsonl in {dataset_dir}")


def _record_spec(rec) -> dict:
    return rec.get("spec") or rec.get("prompt")


def _representative_minutiae(manifest):
    """One minutiae set per identity (its first impression)."""
    by_id = {}
    for rec in manifest:
        if rec["identity"] not in by_id:
            by_id[rec["identity"]] = np.asarray(rec.get("minutiae", []), float)
    return by_id


def cmd_evaluate(cfg: config.RunConfig, dataset_dir, out_dir,
                 corpus_dir=None) -> evalsuite.EvalReport:
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(dataset_dir)
    report = evalsuite.EvalReport()
    image_paths = [dataset_dir / rec["image_path"] for rec in manifest]
    report.inputs = {
        "dataset": str(dataset_dir),
        "n_images": len(manifest),
        "checksum": evalsuite.dataset_checksum(image_paths),
    }

    # quality proxy per acquisition, plus bins where populated enough
    by_acq = {}
    proxies = {}
    for rec in manifest:
        img = corpus.load_png(dataset_dir / rec["image_path"])
        block = min(16, max(4, img.shape[0] // 4))
        score = evalsuite.quality_proxy(img, block=block)
        acq = _record_spec(rec)["acquisition"]
        by_acq.setdefault(acq, []).append(score)
        proxies[rec["image_path"]] = score
    bins = {}
    for acq, scores in by_acq.items():
        if len(scores) >= 30:
            bins[acq] = evalsuite.fit_quality_bins({acq: scores}).params[acq]
        else:
            bins[acq] = {"insufficient": len(scores)}
    report.quality_bins = bins

    # verification metrics over per-identity representative minutiae
    by_id = _representative_minutiae(manifest)
    idents = [by_id[k] for k in sorted(by_id) if len(by_id[k]) >= 3]
    first = {}
    for rec in manifest:
        first.setdefault(rec["identity"], rec["impression"])
    genuine, imposter = [], []
    for rec in manifest:
        ident, imp = rec["identity"], rec["impression"]
        mn = np.asarray(rec.get("minutiae", []), float)
        rep = by_id.get(ident)
        if imp != first[ident] and len(mn) >= 3 and rep is not None and len(rep) >= 3:
            genuine.append(identityops.match_minutiae(mn, rep).score)
    if len(idents) >= 2:
        mat = evalsuite.pairwise_scores(idents)
        imposter = mat[np.triu_indices(len(idents), k=1)].tolist()
        fars = [float(f) for f in cfg.eval.far.split(",") if f.strip()]
        if genuine and imposter:
            ss = evalsuite.ScoreSet(np.array(genuine), np.array(imposter))
            report.tar_at_far = {f: evalsuite.tar_at_far(ss, f) for f in fars}
        checkpoints = [int(c) for c in cfg.eval.checkpoints.split(",") if c.strip()]
        checkpoints = [c for c in checkpoints if c <= len(idents)] or [len(idents)]
        report.duplicate_curve = evalsuite.duplicate_rate(
            idents, cfg.eval.duplicate_threshold,
            checkpoints=checkpoints, score_matrix=mat)

    if corpus_dir is not None:
        train_ids = _representative_minutiae(_load_manifest(corpus_dir))
        train = [m for m in train_ids.values() if len(m) >= 3]
        if idents and train:
            leak = evalsuite.leakage_check(idents, train, cfg.eval.leakage_threshold)
            leak.pop("per_identity_max")
            report.leakage = leak

    counts = [len(rec.get("minutiae", [])) for rec in manifest]
    report.minutiae = {
        "minutiae_count": {"mu": float(np.mean(counts)), "sigma": float(np.std(counts))},
        "n_images": len(counts),
    }
    cls_counts = {}
    for rec in manifest:
        c = rec.get("pattern_class") or _record_spec(rec).get("pattern_class")
        cls_counts[c] = cls_counts.get(c, 0) + 1
    report.class_consistency = {"prompted_class_counts": cls_counts}

    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    return report


def cmd_style_extract(image_paths, out_path, cache_path=None):
    """Extract style embeddings from reference images; JSON output."""
    results = []
    cache = styleembed.StyleCache(cache_path) if cache_path else None
    for path in image_paths:
        if not Path(path).exists():
            raise DataError(f"image not found: {path}")
        img = corpus.load_png(path)
        emb = cache.get_or_compute(img) if cache else styleembed.extract_style(img)
        results.append({
            "image": str(path),
            "checksum": styleembed.image_checksum(img),
            "extractor_seed": emb.extractor_seed,
            "embedding": np.round(emb.vector, 6).tolist(),
        })
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(results, indent=2), encoding="utf-8")
    return results


def cmd_gen_corpus(cfg: config.RunConfig, out_dir, progress=None):
    out_dir = Path(out_dir)
    records = corpus.build_corpus(
        out_dir, cfg.corpus.n_identities, cfg.corpus.impressions, cfg.seed,
        size=cfg.corpus.render_size, progress=progress)
    # trim to the requested size so image count == manifest count exactly
    for rec in records[cfg.corpus.size:]:
        (out_dir / rec.image_path).unlink(missing_ok=True)
        (out_dir / rec.control_path).unlink(missing_ok=True)
    records = records[:cfg.corpus.size]
    with open(out_dir / "meta.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    (out_dir / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    return records
