"""Command-line entry point: ``slat3d [globals] <command> [options]``.

Option values resolve as command-line flag > ``--config`` file > built-in
default. Every successful run writes ``<out-dir>/<command>.manifest.json``
holding the resolved options, seeds, file hashes and timing; ``slat3d replay``
re-executes a manifest and checks the outputs hash the same.

Exit codes: 0 success, 2 usage, 3 input error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


@dataclass
class Opt:
    name: str
    default: object
    help: str
    type: type = str
    nargs: object = None
    choices: tuple | None = None


@dataclass
class Command:
    name: str
    help: str
    handler: object
    inputs: list = field(default_factory=list)  # (name, nargs, help)
    options: list = field(default_factory=list)


COMMANDS: dict[str, Command] = {}


def command(name, help, inputs=(), options=()):
    def wrap(fn):
        COMMANDS[name] = Command(name, help, fn, list(inputs), list(options))
        return fn
    return wrap


@dataclass
class Run:
    """What a handler sees: resolved options, the seed and where to write."""

    command: str
    opts: dict
    inputs: dict
    seed: int
    out_dir: Path
    read: list = field(default_factory=list)
    written: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def out(self, name) -> Path:
        p = Path(name)
        p = p if p.is_absolute() else self.out_dir / p
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def src(self, name) -> Path:
        p = Path(name)
        if not p.exists():
            raise InputError(f"input file not found: {p}")
        self.read.append(p)
        return p


# -- shared helpers -------------------------------------------------------------------


def file_hash(path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(str(f.relative_to(p)).encode())
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def _sampler(run: Run):
    from .config import SamplerConfig
    return SamplerConfig(steps=run.opts["steps"], strength=run.opts["strength"], method=run.opts["method"],
                         resample=run.opts.get("resample", 1))


def _load_cond(run: Run):
    if run.opts.get("cond") is None:
        return None
    from .io import read_dense
    return read_dense(run.src(run.opts["cond"])).ravel()


def _velocity_model(path):
    """A sampler-ready model from a weight archive (tiny MLP or constant field)."""
    from .flow import ConstantField, TinyMLP
    from .io import load_archive
    tensors, meta = load_archive(path)
    kind = meta.get("config", {}).get("kind")
    if kind == "tiny_mlp":
        return TinyMLP.load(path), meta
    if kind == "constant_field":
        return ConstantField(tensors["velocity"]), meta
    raise InputError(f"{path}: archive kind {kind!r} is not a velocity model")


def _structure_parts(path):
    from .flow import StructureDecoder
    from .flow.toys import sign_decoder_config, sign_decoder_params
    model, meta = _velocity_model(path)
    try:
        shape = tuple(int(s) for s in meta["latent_shape"])
        dec = meta["decoder"]
    except KeyError as exc:
        raise InputError(f"{path}: not a structure-flow archive (missing {exc})") from exc
    if dec.get("kind") != "sign":
        raise InputError(f"{path}: unsupported structure decoder {dec.get('kind')!r}")
    levels = int(dec["levels"])
    decoder = StructureDecoder(sign_decoder_params(levels), sign_decoder_config(levels))
    return model, decoder, shape, shape[0] * 2 ** (levels - 1)


def _write_latents(run: Run, grid, structure_latent=None):
    from .io import write_dense, write_sparse
    out = run.out(run.opts["output"])
    write_sparse(out, grid)
    if structure_latent is not None:
        write_dense(run.out(Path(run.opts["output"]).with_suffix(".structure.dnse")), structure_latent)


def _read_mesh(path):
    from .decoders import TriMesh
    from .decoders.export import read_mesh_ply
    from .io import read_obj
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return TriMesh(*read_obj(path))
    if suffix == ".ply":
        return read_mesh_ply(path)
    raise InputError(f"{path}: expected an .obj or .ply mesh")


# -- commands -------------------------------------------------------------------------


@command("voxelize", "active voxels of a triangle mesh's surface",
         inputs=[("mesh", None, "OBJ or PLY mesh inside (-0.5, 0.5)^3")],
         options=[Opt("resolution", 64, "grid resolution N", int), Opt("output", "grid.slat", "SLAT output")])
def cmd_voxelize(run: Run):
    from .voxelize import voxelize_mesh
    from .io import write_sparse
    mesh = _read_mesh(run.src(run.inputs["mesh"]))
    if mesh.num_faces == 0:
        raise InputError("mesh has no faces")
    grid = voxelize_mesh(mesh.vertices, mesh.faces, run.opts["resolution"])
    write_sparse(run.out(run.opts["output"]), grid)
    print(f"{grid.num_active} active voxels at N={grid.resolution}")


@command("aggregate", "average multiview feature maps onto active voxels",
         inputs=[("grid", None, "SLAT structure"), ("views", "+", "view JSON files {camera, features}")],
         options=[Opt("interpolation", "bilinear", "feature-map lookup", choices=("bilinear", "nearest")),
                  Opt("output", "features.slat", "SLAT output")])
def cmd_aggregate(run: Run):
    from .io import read_dense, read_sparse, write_sparse
    from .multiview import Camera, FeatureView, aggregate_features
    grid = read_sparse(run.src(run.inputs["grid"]))
    views = []
    for name in run.inputs["views"]:
        p = run.src(name)
        try:
            d = json.loads(p.read_text())
            fmap = read_dense(run.src(p.parent / d["features"]))
            views.append(FeatureView(Camera.from_dict(d["camera"]), fmap))
        except (KeyError, json.JSONDecodeError) as exc:
            raise InputError(f"{p}: bad view description ({exc})") from exc
    res = aggregate_features(grid, views, run.opts["interpolation"])
    run.notes["view_order"] = list(run.inputs["views"])
    run.notes["unseen_voxels"] = int(res.unseen.sum())
    write_sparse(run.out(run.opts["output"]), res.grid)


@command("flow-train", "fit a small velocity MLP to a point dataset with the CFM objective",
         options=[Opt("dataset", "two_moons", "two_moons | point | file", choices=("two_moons", "point", "file")),
                  Opt("data_file", None, "DNSE (n, d) points for dataset=file"),
                  Opt("n_data", 20000, "points drawn for two_moons", int),
                  Opt("data_seed", 0, "seed of the dataset draw", int),
                  Opt("noise", 0.0, "std of noise added to two_moons", float),
                  Opt("point", [0.3, -0.7], "target for dataset=point", float, "+"),
                  Opt("iterations", 2000, "optimizer steps", int),
                  Opt("batch", 256, "batch size", int),
                  Opt("lr", 3e-3, "peak learning rate (cosine decay)", float),
                  Opt("timestep_mu", 0.0, "logit-normal location", float),
                  Opt("timestep_sigma", 1.0, "logit-normal scale", float),
                  Opt("hidden", [128, 128, 128], "hidden widths", int, "+"),
                  Opt("time_dim", 16, "time feature width", int),
                  Opt("init_seed", None, "weight init seed (defaults to --seed)", int),
                  Opt("output", "flow", "checkpoint directory")])
def cmd_flow_train(run: Run):
    import numpy as np
    from .config import TrainConfig
    from .flow.mlp import TinyMLP, train_toy_flow, two_moons
    from .io import read_dense, write_dense
    o = run.opts
    if o["dataset"] == "two_moons":
        data = two_moons(o["n_data"], o["data_seed"], o["noise"])
    elif o["dataset"] == "point":
        data = np.tile(np.asarray(o["point"], dtype=np.float64), (max(o["n_data"], 1), 1))
    else:
        if o["data_file"] is None:
            raise UsageError("dataset=file needs --data-file")
        data = read_dense(run.src(o["data_file"]))
        if data.ndim != 2:
            raise InputError(f"data file must hold an (n, d) array, got {data.shape}")
    cfg = TrainConfig(lr=o["lr"], iterations=o["iterations"], batch=o["batch"], seed=run.seed,
                      timestep_mu=o["timestep_mu"], timestep_sigma=o["timestep_sigma"],
                      hidden=tuple(o["hidden"]), time_features=o["time_dim"])
    init_seed = run.seed if o["init_seed"] is None else o["init_seed"]
    run.seeds.update(train=run.seed, init=init_seed, data=o["data_seed"])
    model = TinyMLP.init(init_seed, data.shape[1], cfg.hidden, o["time_dim"])
    model, trace = train_toy_flow(data, model, cfg)
    out = run.out(o["output"])
    model.save(out, {"train": cfg.to_dict()})
    write_dense(out / "trace.dnse", trace)
    print(f"final loss (mean of last 100): {float(np.mean(trace[-100:])):.5f}")


@command("flow-sample", "integrate a velocity model from Gaussian noise",
         inputs=[("checkpoint", None, "weight archive of a velocity model")],
         options=[Opt("n", 1000, "number of samples", int),
                  Opt("steps", 50, "ODE steps", int),
                  Opt("strength", 3.0, "guidance strength (used with --cond)", float),
                  Opt("method", "heun", "integrator", choices=("euler", "heun")),
                  Opt("cond", None, "DNSE condition vector"),
                  Opt("output", "samples.dnse", "DNSE output")])
def cmd_flow_sample(run: Run):
    import numpy as np
    from .flow import ode_sample
    from .io import write_dense
    model, meta = _velocity_model(run.src(run.inputs["checkpoint"]))
    dim = int(meta["config"]["dim"])
    noise = np.random.default_rng(run.seed).standard_normal((run.opts["n"], dim))
    s = _sampler(run)
    x = ode_sample(model, noise, s.steps, _load_cond(run), s.strength, s.method)
    write_dense(run.out(run.opts["output"]), x)


@command("init-weights", "write a freshly initialized weight archive",
         inputs=[("kind", None, "structure-flow | latent-flow | flow-mlp | gaussian-head | radiance-head | "
                               "mesh-upsampler | constant-field")],
         options=[Opt("channels", 8, "latent channels", int),
                  Opt("dim", 2, "state width for flow-mlp", int),
                  Opt("hidden", [64, 64], "MLP hidden widths", int, "+"),
                  Opt("time_dim", 16, "time feature width", int),
                  Opt("cond_dim", 0, "condition width", int),
                  Opt("coord_dim", 12, "voxel positional features for latent-flow (multiple of 6)", int),
                  Opt("latent_shape", [4, 4, 4, 1], "structure latent n n n c", int, "+"),
                  Opt("decoder_levels", 2, "sign-decoder levels (upsampling 2^(levels-1))", int),
                  Opt("k", 32, "Gaussians per voxel", int),
                  Opt("scale", 1.0, "init scale of head weights", float),
                  Opt("upsampler_hidden", 16, "mesh upsampler width", int),
                  Opt("velocity", [0.0], "constant-field velocity", float, "+"),
                  Opt("output", "weights", "archive directory")])
def cmd_init_weights(run: Run):
    import numpy as np
    from .decoders import GaussianHead, MeshUpsampler, RadianceHead
    from .flow import TinyMLP
    from .io import save_archive
    o, kind, seed = run.opts, run.inputs["kind"], run.seed
    out = run.out(o["output"])
    if kind in ("structure-flow", "latent-flow", "flow-mlp"):
        if kind == "structure-flow":
            shape = o["latent_shape"]
            if len(shape) != 4 or len(set(shape[:3])) != 1:
                raise UsageError("--latent-shape must be n n n c")
            m = TinyMLP.init(seed, int(np.prod(shape)), o["hidden"], o["time_dim"], o["cond_dim"])
            m.save(out, {"latent_shape": shape, "decoder": {"kind": "sign", "levels": o["decoder_levels"]}})
        elif kind == "latent-flow":
            if o["coord_dim"] % 6:
                raise UsageError("--coord-dim must be a multiple of 6")
            TinyMLP.init(seed, o["channels"], o["hidden"], o["time_dim"], o["cond_dim"], o["coord_dim"]).save(out)
        else:
            TinyMLP.init(seed, o["dim"], o["hidden"], o["time_dim"], o["cond_dim"]).save(out)
        return
    if kind == "gaussian-head":
        head = GaussianHead.init(seed, o["channels"], o["k"], o["scale"])
    elif kind == "radiance-head":
        head = RadianceHead.init(seed, o["channels"], o["scale"])
    elif kind == "mesh-upsampler":
        head = MeshUpsampler.init(seed, o["channels"], o["upsampler_hidden"], o["scale"])
    elif kind == "constant-field":
        v = np.asarray(o["velocity"], dtype=np.float64)
        save_archive(out, {"velocity": v}, {"config": {"kind": "constant_field", "dim": int(v.size)}})
        return
    else:
        raise UsageError(f"unknown weight kind {kind!r}")
    save_archive(out, head.tensors(), {"config": head.config()})


@command("generate", "two-stage generation: structure, then latents on it",
         options=[Opt("structure", None, "structure-flow archive"),
                  Opt("latent", None, "latent-flow archive"),
                  Opt("cond", None, "DNSE condition vector"),
                  Opt("steps", 50, "ODE steps per stage", int),
                  Opt("strength", 3.0, "guidance strength", float),
                  Opt("method", "heun", "integrator", choices=("euler", "heun")),
                  Opt("output", "latents.slat", "SLAT output; the stage-1 latent goes to <stem>.structure.dnse")])
def cmd_generate(run: Run):
    from .flow import two_stage_generate
    o = run.opts
    if o["structure"] is None or o["latent"] is None:
        raise UsageError("generate needs --structure and --latent archives")
    smodel, decoder, shape, _ = _structure_parts(run.src(o["structure"]))
    lmodel, lmeta = _velocity_model(run.src(o["latent"]))
    res = two_stage_generate(smodel, decoder, lmodel, int(lmeta["config"]["dim"]), shape, _load_cond(run),
                             _sampler(run), run.seed)
    run.seeds["stages"] = "SeedSequence(seed).spawn(2)"
    _write_latents(run, res.slat, res.structure_latent)
    print(f"{res.slat.num_active} active voxels at N={res.slat.resolution}")


@command("decode", "decode latents into Gaussians, a radiance field or a mesh",
         inputs=[("latents", None, "SLAT latents")],
         options=[Opt("format", None, "output representation", choices=("gs", "rf", "mesh")),
                  Opt("head", None, "decoder weight archive"),
                  Opt("output", None, "output file (default gaussians.ply / radiance.slat / mesh.obj)")])
def cmd_decode(run: Run):
    from .decoders import (GaussianHead, MeshUpsampler, RadianceHead, decode_gaussians, decode_mesh_params,
                           decode_radiance, extract_mesh)
    from .decoders.export import write_gaussians_ply, write_mesh_obj, write_radiance
    from .io import load_archive, read_sparse
    o = run.opts
    if o["format"] is None or o["head"] is None:
        raise UsageError("decode needs --format and --head")
    latents = read_sparse(run.src(run.inputs["latents"]))
    tensors, meta = load_archive(run.src(o["head"]))
    kind = meta.get("config", {}).get("kind")
    want = {"gs": "gaussian_head", "rf": "radiance_head", "mesh": "mesh_upsampler"}[o["format"]]
    if kind != want:
        raise InputError(f"format {o['format']} needs a {want} archive, got {kind!r}")
    default = {"gs": "gaussians.ply", "rf": "radiance.slat", "mesh": "mesh.obj"}[o["format"]]
    out_name = o["output"] or default
    if o["format"] == "gs":
        gs = decode_gaussians(latents, GaussianHead.load(tensors, meta["config"]))
        write_gaussians_ply(run.out(out_name), gs)
        print(f"{len(gs)} Gaussians")
    elif o["format"] == "rf":
        out = run.out(out_name)
        write_radiance(out, decode_radiance(latents, RadianceHead.load(tensors, meta["config"])))
        run.written.append(Path(str(out) + ".json"))
    else:
        mesh = extract_mesh(decode_mesh_params(latents, MeshUpsampler.load(tensors, meta["config"])))
        write_mesh_obj(run.out(out_name), mesh)
        run.notes.update(vertices=mesh.num_vertices, faces=mesh.num_faces, watertight=bool(mesh.is_watertight()))
        print(f"{mesh.num_vertices} vertices, {mesh.num_faces} faces")


def _asset_kind(path: Path) -> str:
    from .io import read_ply
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return "mesh"
    if suffix == ".slat":
        return "radiance"
    if suffix == ".ply":
        vertex, faces = read_ply(path)
        if "f_dc_0" in vertex:
            return "gaussians"
        if faces is not None:
            return "mesh"
        raise InputError(f"{path}: PLY holds neither Gaussians nor faces")
    raise InputError(f"{path}: unknown asset type {suffix!r}")


@command("render", "render a Gaussian PLY, mesh or radiance field from a camera JSON",
         inputs=[("asset", None, "gaussians .ply, mesh .obj/.ply or radiance .slat (+ .json sidecar)")],
         options=[Opt("camera", None, "camera JSON"),
                  Opt("step", 0.5 / 512, "ray-march step (radiance fields)", float),
                  Opt("background", [1.0, 1.0, 1.0], "background rgb", float, "+"),
                  Opt("output", "render", "output stem")])
def cmd_render(run: Run):
    from .decoders.export import read_gaussians_ply, read_radiance
    from .decoders import assemble_field
    from .multiview import load_camera
    from .render import rasterize_mesh, raymarch_field, splat_gaussians
    o = run.opts
    if o["camera"] is None:
        raise UsageError("render needs --camera")
    cam = load_camera(run.src(o["camera"]))
    asset = run.src(run.inputs["asset"])
    bg = tuple(o["background"])
    if len(bg) != 3:
        raise UsageError("--background takes three values")
    kind = _asset_kind(asset)
    if kind == "gaussians":
        img = splat_gaussians(read_gaussians_ply(asset), cam, bg)
    elif kind == "mesh":
        img = rasterize_mesh(_read_mesh(asset), cam, bg)
    else:
        run.src(str(asset) + ".json")
        img = raymarch_field(assemble_field(read_radiance(asset)), cam, o["step"], bg)
    stem = run.out(o["output"])
    run.written.remove(stem)
    run.written.extend(img.save(stem))
    run.notes["asset_kind"] = kind


def _bbox_mask(coords, bbox):
    import numpy as np
    lo, hi = np.asarray(bbox[:3]), np.asarray(bbox[3:])
    return np.all((coords >= lo) & (coords <= hi), axis=1)


@command("edit", "detail variation or region repaint of generated latents",
         inputs=[("latents", None, "SLAT latents")],
         options=[Opt("mode", "variation", "edit kind", choices=("variation", "repaint")),
                  Opt("latent", None, "latent-flow archive"),
                  Opt("structure", None, "structure-flow archive (repaint)"),
                  Opt("structure_latent", None, "stage-1 latent DNSE (repaint)"),
                  Opt("bbox", None, "inclusive voxel box x0 y0 z0 x1 y1 z1", int, 6),
                  Opt("cond", None, "DNSE condition vector"),
                  Opt("steps", 50, "ODE steps", int),
                  Opt("strength", 3.0, "guidance strength", float),
                  Opt("method", "heun", "integrator", choices=("euler", "heun")),
                  Opt("resample", 5, "Repaint resampling rounds per step", int),
                  Opt("output", "edited.slat", "SLAT output")])
def cmd_edit(run: Run):
    import numpy as np
    from .flow import repaint_sample
    from .flow.pipeline import occupancy_from_logits, resample_latents, stage_seeds
    from .io import read_dense, read_sparse
    from .sparse import SparseGrid
    o = run.opts
    src = run.src(run.inputs["latents"])
    slat = read_sparse(src)
    if o["latent"] is None:
        raise UsageError("edit needs --latent")
    lmodel, _ = _velocity_model(run.src(o["latent"]))
    cond, sampler = _load_cond(run), _sampler(run)
    if o["mode"] == "variation":
        _write_latents(run, resample_latents(lmodel, slat, cond, sampler, run.seed))
        return
    if o["bbox"] is None or o["structure"] is None or o["structure_latent"] is None:
        raise UsageError("repaint needs --bbox, --structure and --structure-latent")
    bbox = np.asarray(o["bbox"])
    n = slat.resolution
    if np.any(bbox[:3] > bbox[3:]) or bbox.min() < 0 or bbox.max() >= n:
        raise UsageError(f"bbox {bbox.tolist()} is not inside the {n}^3 grid")
    in_box = _bbox_mask(slat.coords, bbox)
    if not in_box.any():
        print("warning: bbox covers no active voxel; output is a copy of the input", file=sys.stderr)
        shutil.copyfile(src, run.out(o["output"]))
        run.notes["unchanged"] = True
        return
    smodel, decoder, shape, res = _structure_parts(run.src(o["structure"]))
    if res != n:
        raise InputError(f"structure model decodes to N={res}, latents are at N={n}")
    s_latent = read_dense(run.src(o["structure_latent"]))
    if s_latent.shape != shape:
        raise InputError(f"structure latent has shape {s_latent.shape}, model expects {shape}")
    rng1, rng2 = stage_seeds(run.seed)
    run.seeds["stages"] = "SeedSequence(seed).spawn(2)"
    cell = n // shape[0]
    cells = np.stack(np.meshgrid(*(np.arange(shape[0]),) * 3, indexing="ij"), -1)
    cell_hit = np.all((cells * cell <= bbox[3:]) & ((cells + 1) * cell - 1 >= bbox[:3]), axis=-1)
    s_mask = np.broadcast_to(cell_hit[..., None], shape)
    s_new = repaint_sample(smodel, s_latent, s_mask, sampler.steps, sampler.resample, cond, sampler.strength,
                           sampler.method, rng1)
    occ_new = np.zeros((n,) * 3, bool)
    occ_new[tuple(occupancy_from_logits(decoder(s_new)).coords.T)] = True
    occ = np.zeros((n,) * 3, bool)
    occ[tuple(slat.coords.T)] = True
    box = np.zeros((n,) * 3, bool)
    box[bbox[0]:bbox[3] + 1, bbox[1]:bbox[4] + 1, bbox[2]:bbox[5] + 1] = True
    # outside the box the original occupancy stands, whatever the decoder does near the boundary
    occ = np.where(box, occ_new, occ)
    structure = occupancy_from_logits(np.where(occ, 1.0, -1.0))
    row = slat.lookup(structure.coords)
    regen = (row < 0) | _bbox_mask(structure.coords, bbox)
    known = np.zeros((structure.num_active, slat.channels))
    known[~regen] = slat.features[row[~regen]]
    mask = np.broadcast_to(regen[:, None], known.shape)
    feats = repaint_sample(lmodel, known, mask, sampler.steps, sampler.resample, cond, sampler.strength,
                           sampler.method, rng2, {"structure": structure})
    run.notes.update(regenerated_voxels=int(regen.sum()), kept_voxels=int((~regen).sum()))
    _write_latents(run, SparseGrid(n, structure.coords, feats), s_new)


def _shape_kind(path: Path) -> str:
    from .io import read_ply
    if path.suffix.lower() == ".ply" and read_ply(path)[1] is None:
        return "points"
    return "mesh"


def _cloud(run: Run, path: Path, kind: str):
    """Point cloud from a PLY without faces, or a mesh sampled by the evaluation protocol."""
    from .io import read_points_ply
    from .metrics import surface_point_cloud
    if kind == "points":
        return read_points_ply(path)
    o = run.opts
    return surface_point_cloud(_read_mesh(path), o["views"], o["points"], run.seed, o["resolution"]).points


@command("metrics", "Chamfer distance and F-score between two shapes",
         inputs=[("pred", None, "predicted mesh (.obj/.ply) or point cloud (.ply)"),
                 ("ref", None, "reference of the same kind")],
         options=[Opt("which", ["chamfer", "fscore"], "metrics to report", nargs="+", choices=("chamfer", "fscore")),
                  Opt("radius", 0.05, "F-score radius", float),
                  Opt("views", 100, "depth views per mesh", int),
                  Opt("points", 100_000, "surface points per mesh", int),
                  Opt("resolution", 512, "depth-map resolution", int),
                  Opt("fps", 0, "farthest-point subsample size (0 keeps all)", int),
                  Opt("plot", None, "write a nearest-distance histogram to this image file"),
                  Opt("output", "metrics.json", "JSON report")])
def cmd_metrics(run: Run):
    from .metrics import chamfer, farthest_point_sample, fscore, nearest
    o = run.opts
    pred, ref = run.src(run.inputs["pred"]), run.src(run.inputs["ref"])
    kp, kr = _shape_kind(pred), _shape_kind(ref)
    if kp != kr:
        raise InputError(f"pred is a {kp} but ref is a {kr}; compare like with like")
    x, y = _cloud(run, pred, kp), _cloud(run, ref, kr)
    if o["fps"]:
        x = farthest_point_sample(x, o["fps"], run.seed).points
        y = farthest_point_sample(y, o["fps"], run.seed).points
    params = {"input_kind": kp, "points": [len(x), len(y)], "fps": o["fps"]}
    if kp == "mesh":
        params.update(views=o["views"], surface_points=o["points"], resolution=o["resolution"])
    report = []
    if "chamfer" in o["which"]:
        report.append({"metric": "chamfer", "value": chamfer(x, y), "params": params, "seed": run.seed})
    if "fscore" in o["which"]:
        report.append({"metric": "fscore", "value": fscore(x, y, o["radius"]),
                       "params": {**params, "radius": o["radius"]}, "seed": run.seed})
    run.out(o["output"]).write_text(json.dumps(report, indent=2) + "\n")
    if o["plot"]:
        from .plotting import plot_distance_histogram
        plot_distance_histogram({"pred to ref": nearest(y, x)[0], "ref to pred": nearest(x, y)[0]},
                                run.out(o["plot"]), o["radius"])
    for r in report:
        print(f"{r['metric']}: {r['value']:.6g}")


@command("report", "figures for a training run: loss curve and 2-D sample scatter",
         options=[Opt("trace", None, "loss trace DNSE (flow-train writes <ckpt>/trace.dnse)"),
                  Opt("samples", None, "samples DNSE"),
                  Opt("reference", None, "'two_moons' or a DNSE of reference points for the scatter"),
                  Opt("window", 100, "moving-average window", int),
                  Opt("output", "report", "figure stem; writes <stem>.loss.png and <stem>.samples.png")])
def cmd_report(run: Run):
    from .io import read_dense
    from .plotting import plot_loss_trace, plot_samples_2d
    o = run.opts
    if o["trace"] is None and o["samples"] is None:
        raise UsageError("report needs --trace and/or --samples")
    if o["trace"]:
        plot_loss_trace(read_dense(run.src(o["trace"])), run.out(f"{o['output']}.loss.png"), o["window"])
    if o["samples"]:
        ref = None
        if o["reference"] == "two_moons":
            from .flow.mlp import two_moons_reference
            ref = two_moons_reference()
        elif o["reference"]:
            ref = read_dense(run.src(o["reference"]))
        plot_samples_2d(read_dense(run.src(o["samples"])), run.out(f"{o['output']}.samples.png"), ref)


# -- plumbing -------------------------------------------------------------------------


def _flags(name: str) -> list:
    if name == "output":
        return ["-o", "--output"]
    return ["-" + name] if len(name) == 1 else ["--" + name.replace("_", "-")]


def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    glob.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS/OpenMP threads")
    glob.add_argument("--config", default=argparse.SUPPRESS, help="JSON config (or a run manifest)")
    glob.add_argument("--out-dir", dest="out_dir", default=argparse.SUPPRESS, help="output directory (default .)")
    parser = argparse.ArgumentParser(prog="slat3d", parents=[glob], description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"slat3d {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for cmd in COMMANDS.values():
        p = sub.add_parser(cmd.name, help=cmd.help, parents=[glob], description=cmd.help)
        for name, nargs, help_ in cmd.inputs:
            p.add_argument(name, nargs=nargs, help=help_)
        for opt in cmd.options:
            kw = {"dest": opt.name, "default": argparse.SUPPRESS, "help": f"{opt.help} (default {opt.default})"}
            if opt.nargs is not None:
                kw["nargs"] = opt.nargs
            if opt.choices is not None:
                kw["choices"] = opt.choices
            if opt.type is not str:
                kw["type"] = opt.type
            p.add_argument(*_flags(opt.name), **kw)
    rp = sub.add_parser("replay", help="re-run a manifest and verify its output hashes", parents=[glob])
    rp.add_argument("manifest")
    return parser


def resolve(cmd: Command, ns: dict, config: dict) -> dict:
    """Flag > config file section > default, with type checks on config values."""
    section = config.get(cmd.name, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {cmd.name!r} must be an object")
    known = {o.name for o in cmd.options}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {cmd.name} config keys: {sorted(unknown)}")
    out = {}
    for opt in cmd.options:
        if opt.name in ns:
            v = ns[opt.name]
        elif opt.name in section:
            v = section[opt.name]
            try:
                v = [opt.type(x) for x in v] if isinstance(v, list) else (None if v is None else opt.type(v))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config {cmd.name}.{opt.name}: {exc}") from exc
            if opt.choices and any(x not in opt.choices for x in (v if isinstance(v, list) else [v])):
                raise UsageError(f"config {cmd.name}.{opt.name}={v!r} not in {opt.choices}")
        else:
            v = opt.default
        out[opt.name] = list(v) if isinstance(v, (list, tuple)) else v
    return out


GLOBAL_KEYS = {"seed", "threads", "out_dir"}


def _load_config(path) -> tuple[dict, list | None]:
    """A config dict, or for a manifest its recorded options and argv."""
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: config is not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if "manifest_version" in d:
        return {d["command"]: d["options"], "seed": d["seed"]}, d.get("argv")
    bad = set(d) - GLOBAL_KEYS - set(COMMANDS)
    if bad:
        raise UsageError(f"{path}: unknown top-level config keys {sorted(bad)}")
    return d, None


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def execute(argv: list) -> int:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    name = ns.pop("command", None)
    if name is None:
        parser.print_help()
        return EXIT_USAGE
    config = {}
    if "config" in ns:
        config, _ = _load_config(ns["config"])
    _set_threads(ns.get("threads", config.get("threads")))
    if name == "replay":
        return replay(ns["manifest"])
    cmd = COMMANDS[name]
    seed = int(ns.get("seed", config.get("seed", 0)))
    out_dir = Path(ns.get("out_dir", config.get("out_dir", ".")))
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = {k: ns[k] for k, _, _ in cmd.inputs}
    run = Run(name, resolve(cmd, ns, config), inputs, seed, out_dir)
    start = time.perf_counter()
    cmd.handler(run)
    wall = time.perf_counter() - start
    write_manifest(run, argv, wall, ns.get("threads", config.get("threads")))
    return EXIT_OK


def write_manifest(run: Run, argv, wall: float, threads) -> Path:
    manifest = {
        "manifest_version": 1,
        "command": run.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "seed": run.seed,
        "seeds": {"seed": run.seed, **run.seeds},
        "threads": threads,
        "options": run.opts,
        "inputs": {str(p): file_hash(p) for p in run.read},
        "outputs": {str(p): file_hash(p) for p in run.written if p.exists()},
        "notes": run.notes,
        "wall_time_s": round(wall, 6),
        "library_version": __version__,
    }
    path = run.out_dir / f"{run.command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def replay(path) -> int:
    try:
        m = json.loads(Path(path).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    if "manifest_version" not in m:
        raise InputError(f"{path} is not a run manifest")
    here = os.getcwd()
    os.chdir(m["cwd"])
    try:
        code = execute(m["argv"])
    finally:
        os.chdir(here)
    if code != EXIT_OK:
        return code
    out = Path(m["cwd"])
    changed = [p for p, h in m["outputs"].items() if file_hash(out / p) != h]
    for p in changed:
        print(f"replay mismatch: {p}", file=sys.stderr)
    print("replay: outputs identical" if not changed else f"replay: {len(changed)} outputs differ")
    return EXIT_OK if not changed else EXIT_NUMERIC


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    from .flow.core import NumericalError
    from .flow.pipeline import EmptyStructureError
    from .decoders.mesh import EmptyMeshError
    try:
        return execute(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0) if isinstance(exc.code, int) or exc.code is None else EXIT_USAGE
    except UsageError as exc:
        print(f"slat3d: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, EmptyStructureError, EmptyMeshError) as exc:
        print(f"slat3d: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"slat3d: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
