"""End-to-end commands: data generation, training, inference, evaluation,
gradient checking, and export."""
import csv
import os
import time

import numpy as np

from . import gradcheck as gradcheck_mod
from . import objective
from .checkpoint import load_checkpoint, pack_state, save_checkpoint, unpack_state
from .config import Config, config_text, parse_config
from .errors import FormatError, UsageError
from .geometry import Encoder
from .numerics import AdamW, NonFiniteError, Tape, lr_schedule
from .occupancy import (PointCloud, decode_occupancy, encode_analog,
                        gen_scene, read_scene, write_scene)
from .rand import rng_for
from .refine import Decoder, progressive_infer
from .schedule import SamplerConfig, corrupt, make_schedule
from .kernels import warmup

CSV_COLUMNS = ["step", "scene", "iou", "miou", "ce", "lovasz", "scal_geo",
               "scal_sem", "depth", "total"]


def build_models(cfg):
    """Encoder + decoder with a shared deterministic init stream."""
    rng = rng_for(cfg.seed, "init")
    enc = Encoder(cfg.classes, rng, c_f=cfg.c_f, d=cfg.width,
                  d_bins=cfg.d_bins, tau=cfg.tau, mask_r=cfg.mask_r,
                  range_limit=cfg.range_limit)
    dec = Decoder(cfg.classes, cfg.decoder_config(), rng)
    params = {}
    params.update(enc.params("enc"))
    params.update(dec.params("dec"))
    return enc, dec, params


def scene_filename(seed):
    return "scene_%06d.ocgs" % seed


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(path):
        raise FormatError("no manifest.txt in %s" % data_dir)
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError("bad manifest line: %r" % line)
            entries.append((os.path.join(data_dir, parts[0]), int(parts[1])))
    return entries


def cmd_gen_data(cfg, out_dir, count):
    """Write `count` scenes with seeds cfg.seed .. cfg.seed+count-1."""
    if count < 1:
        raise UsageError("count must be >= 1")
    params = cfg.scene_params()
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(count):
        seed = cfg.seed + i
        scene = gen_scene(seed, params)
        name = scene_filename(seed)
        write_scene(os.path.join(out_dir, name), scene)
        names.append((name, seed))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        for name, seed in names:
            fh.write("%s %d\n" % (name, seed))
    return [os.path.join(out_dir, n) for n, _ in names]


def draw_train_sample(seed, gstep, slot, T, shape):
    """The (t, noise, stream) triple consumed by one training sample.

    Keyed only by (seed, optimizer step, slot-in-batch) so a resumed run
    replays the identical sequence; the returned stream then feeds the
    encoder's discrete-depth sampling.
    """
    srng = rng_for(seed, "draw", gstep, slot)
    t = int(srng.integers(1, T + 1))
    noise = srng.standard_normal(shape)
    return t, noise, srng


def _load_scenes(entries):
    scenes = []
    for path, seed in entries:
        scene = read_scene(path)
        scene.seed = seed  # provenance lives in the manifest, not the file
        scenes.append(scene)
    return scenes


def cmd_train(cfg, data_dir, out_dir, resume=None):
    """Diffusion training over the scene set: per sample draw a timestep,
    corrupt the analog target, refine once, descend the five-term loss."""
    warmup()
    entries = read_manifest(data_dir)
    if not entries:
        raise UsageError("no scenes listed in %s" % data_dir)
    scenes = _load_scenes(entries)
    encoded = [encode_analog(s.grid, cfg.scale) for s in scenes]
    n = len(scenes)
    spe = (n + cfg.batch - 1) // cfg.batch  # optimizer steps per epoch
    total_steps = cfg.epochs * spe
    if cfg.warmup > total_steps:
        raise UsageError("warmup %d exceeds total optimizer steps %d"
                         % (cfg.warmup, total_steps))

    enc, dec, params = build_models(cfg)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = make_schedule(cfg.schedule, cfg.timesteps)
    start_step, ema = 0, None
    if resume is not None:
        text, tensors = load_checkpoint(resume)
        if text != config_text(cfg):
            raise UsageError("checkpoint config does not match the run config")
        start_step = unpack_state(tensors, params, opt)
        if "opt/ema" in tensors:
            ema = float(np.asarray(tensors["opt/ema"]).reshape(-1)[0])

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    csv_mode = "a" if (resume is not None and os.path.exists(csv_path)) else "w"
    losses = []
    with open(csv_path, csv_mode, newline="") as csv_fh:
        writer = csv.writer(csv_fh)
        if csv_mode == "w":
            writer.writerow(CSV_COLUMNS)
        for gstep in range(start_step, total_steps):
            epoch = gstep // spe
            order = rng_for(cfg.seed, "order", epoch).permutation(n)
            lo = (gstep % spe) * cfg.batch
            idxs = order[lo:lo + cfg.batch]
            batch_losses = []
            last = None
            for slot, si in enumerate(idxs):
                scene, y0 = scenes[si], encoded[si]
                t, noise, srng = draw_train_sample(
                    cfg.seed, gstep, slot, cfg.timesteps, y0.values.shape)
                try:
                    with Tape() as tape:
                        fvol, depth_logits = enc(scene, train=True,
                                                 gumbel_rng=srng)
                        z_t = corrupt(y0, t, noise, sched)
                        logits, _ = dec.refine_once(z_t, t, fvol)
                        rep = objective.total_loss(logits, scene.grid,
                                                   depth_logits, scene.views,
                                                   cfg.loss_weights())
                        tape.backward(rep.total / len(idxs))
                except NonFiniteError as e:
                    raise NonFiniteError("aborting at step %d scene %d: %s"
                                         % (gstep, scene.seed, e))
                batch_losses.append(rep.total.item())
                last = (scene, rep, logits)
            opt.step(lr_mult=lr_schedule(gstep + 1, total_steps, cfg.warmup))
            opt.zero_grad()
            mean_loss = float(np.mean(batch_losses))
            losses.append(mean_loss)
            ema = mean_loss if ema is None else 0.99 * ema + 0.01 * mean_loss
            done = gstep + 1
            if done % cfg.log_every == 0 or done == total_steps:
                scene, rep, logits = last
                pred = decode_occupancy(logits, like=scene.grid)
                row = rep.floats()
                writer.writerow([done, scene.seed,
                                 repr(objective.iou(pred, scene.grid)),
                                 repr(objective.miou(pred, scene.grid))]
                                + [repr(row[k]) for k in CSV_COLUMNS[4:]])
            if done % cfg.checkpoint_every == 0 and done < total_steps:
                tensors = pack_state(params, opt, done)
                tensors["opt/ema"] = np.float64(ema)
                save_checkpoint(os.path.join(out_dir, "ckpt_%06d.ocgc" % done),
                                config_text(cfg), tensors)
    tensors = pack_state(params, opt, total_steps)
    tensors["opt/ema"] = np.float64(ema)
    final = os.path.join(out_dir, "last.ocgc")
    save_checkpoint(final, config_text(cfg), tensors)
    return {"checkpoint": final, "metrics_csv": csv_path, "losses": losses,
            "final_loss": losses[-1] if losses else None, "ema": ema}


def load_models(ckpt_path):
    """Rebuild encoder/decoder exactly as the checkpoint describes."""
    text, tensors = load_checkpoint(ckpt_path)
    cfg = parse_config(text)
    enc, dec, params = build_models(cfg)
    unpack_state(tensors, params, AdamW(params))
    return cfg, enc, dec


def _resolve_sampler(cfg, steps, strategy, td):
    return SamplerConfig(
        strategy=strategy if strategy is not None else cfg.strategy,
        steps=steps if steps is not None else cfg.steps,
        td=td if td is not None else cfg.td).validate(cfg.timesteps)


def cmd_infer(ckpt_path, scene_path, out_dir, steps=None, strategy=None,
              td=None, seed=None):
    """Progressive inference on one scene: encoder once, decoder per step,
    per-step grids + uncertainty maps + phase timings."""
    warmup()
    cfg, enc, dec = load_models(ckpt_path)
    sampler = _resolve_sampler(cfg, steps, strategy, td)
    scene = read_scene(scene_path)
    sched = make_schedule(cfg.schedule, cfg.timesteps)
    rng = rng_for(cfg.seed if seed is None else seed, "infer", scene.seed)

    t0 = time.perf_counter()
    fvol, _ = enc(scene, train=False)
    enc_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    grids, uncs = progressive_infer(dec.refine_once, fvol, sampler, sched,
                                    rng, scene.grid, cfg.scale)
    dec_seconds = time.perf_counter() - t0

    paths = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        empty = PointCloud(np.zeros((0, 3), np.float32), np.zeros(0, np.float32))
        for i, g in enumerate(grids, 1):
            p = os.path.join(out_dir, "grid_step%02d.ocgs" % i)
            write_scene(p, type(scene)(g, empty, [], seed=scene.seed))
            paths.append(p)
        for i, (umap, _) in enumerate(uncs, 2):
            p = os.path.join(out_dir, "uncertainty_step%02d.npy" % i)
            np.save(p, umap)
            paths.append(p)
        with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "seconds"])
            w.writerow(["encode", repr(enc_seconds)])
            w.writerow(["decode", repr(dec_seconds)])
            w.writerow(["decode_per_step", repr(dec_seconds / sampler.steps)])
    return {"grids": grids, "uncertainties": uncs, "paths": paths,
            "enc_calls": enc.calls, "dec_calls": dec.calls,
            "enc_seconds": enc_seconds, "dec_seconds": dec_seconds}


def cmd_eval(ckpt_path, data_dir, out_dir, steps=None, strategy=None,
             td=None, seed=None, denoise_factory=None):
    """Metrics table over a held-out set for every step count 1..K.

    denoise_factory(scene) -> denoise(y_t, t, f_m) substitutes the decoder
    (testing hook; a gt-injecting oracle must reach mIoU 1.0).
    """
    warmup()
    cfg, enc, dec = load_models(ckpt_path)
    sampler = _resolve_sampler(cfg, steps, strategy, td)
    entries = read_manifest(data_dir)
    if not entries:
        raise UsageError("empty dataset: %s lists no scenes" % data_dir)
    scenes = _load_scenes(entries)
    sched = make_schedule(cfg.schedule, cfg.timesteps)
    base_seed = cfg.seed if seed is None else seed

    rows = []
    table = {}
    totals = {k: np.zeros(3) for k in range(1, sampler.steps + 1)}
    for scene in scenes:
        fvol, depth_logits = enc(scene, train=False)
        dep = None
        for dl, view in zip(depth_logits, scene.views):
            term = objective.depth_loss(dl, view.depth_bins)
            dep = term if dep is None else dep + term
        dep_val = dep.item() / len(scene.views) if scene.views else 0.0
        model_denoise = (denoise_factory(scene) if denoise_factory is not None
                         else dec.refine_once)
        for k in range(1, sampler.steps + 1):
            captured = {}

            def denoise(y_t, t, f_m):
                logits, z0 = model_denoise(y_t, t, f_m)
                captured["logits"] = logits
                return logits, z0

            cfg_k = SamplerConfig(sampler.strategy, k, sampler.td)
            grids, _ = progressive_infer(
                denoise, fvol, cfg_k, sched,
                rng_for(base_seed, "eval", scene.seed, k), scene.grid,
                cfg.scale)
            pred = grids[-1]
            iou = objective.iou(pred, scene.grid)
            miou = objective.miou(pred, scene.grid)
            logits = captured["logits"]
            probs_rep = objective.total_loss(logits, scene.grid, depth_logits,
                                             scene.views, cfg.loss_weights())
            row = probs_rep.floats()
            rows.append([k, scene.seed, iou, miou, row["ce"], row["lovasz"],
                         row["scal_geo"], row["scal_sem"], row["depth"],
                         row["total"]])
            totals[k] += [iou, miou, 1.0]
    for k, (si, sm, cnt) in sorted(totals.items()):
        table[k] = (si / cnt, sm / cnt)

    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "eval.csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([r[0], r[1]] + [repr(v) for v in r[2:]])
    summary = ["scenes evaluated: %d" % len(scenes)]
    for k, (mi, mm) in sorted(table.items()):
        summary.append("steps=%d  mean IoU %.4f  mean mIoU %.4f" % (k, mi, mm))
    return {"table": table, "rows": rows, "csv": csv_path,
            "summary": "\n".join(summary)}


def cmd_gradcheck(cfg, perturb=None):
    """Finite-difference sweep over every registered op."""
    results = gradcheck_mod.run_all(seed=cfg.seed, perturb=perturb)
    lines = ["%-18s worst rel err %.3e  tol %.0e  %s"
             % (r.name, r.worst_rel, r.tol, "PASS" if r.passed else "FAIL")
             for r in results]
    ok = all(r.passed for r in results)
    lines.append("checked %d ops: %s" % (len(results),
                                         "all pass" if ok else "FAILURES"))
    return {"results": results, "ok": ok, "report": "\n".join(lines)}


def cmd_export(grid_file, fmt, out_path):
    """Occupied voxels as an ASCII point list or an OBJ cube-soup mesh."""
    scene = read_scene(grid_file)
    grid = scene.grid
    occ = np.argwhere(grid.labels > 0)  # row-major, deterministic order
    vs = grid.voxel_size
    org = grid.origin.astype(np.float64)
    with open(out_path, "w") as fh:
        if fmt == "points":
            fh.write("# x y z class (%d points)\n" % len(occ))
            for i, j, k in occ:
                x, y, z = org + (np.array([i, j, k]) + 0.5) * vs
                fh.write("%g %g %g %d\n" % (x, y, z, grid.labels[i, j, k]))
        elif fmt == "mesh":
            fh.write("# cube soup: %d voxels, %d vertices, %d triangles\n"
                     % (len(occ), 8 * len(occ), 12 * len(occ)))
            corners = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                                [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]])
            # each quad face split into two triangles, 1-indexed per cube
            tris = [(1, 3, 2), (2, 3, 4), (5, 6, 7), (6, 8, 7),
                    (1, 2, 5), (2, 6, 5), (3, 7, 4), (4, 7, 8),
                    (1, 5, 3), (3, 5, 7), (2, 4, 6), (4, 8, 6)]
            for n, (i, j, k) in enumerate(occ):
                fh.write("g voxel_%d_%d_%d_class%d\n"
                         % (i, j, k, grid.labels[i, j, k]))
                for c in corners:
                    x, y, z = org + (np.array([i, j, k]) + c) * vs
                    fh.write("v %g %g %g\n" % (x, y, z))
                base = 8 * n
                for a, b, c in tris:
                    fh.write("f %d %d %d\n" % (base + a, base + b, base + c))
        else:
            raise UsageError("unknown export format %r" % fmt)
    return out_path
