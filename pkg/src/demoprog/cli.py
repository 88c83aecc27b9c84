"""Command-line driver: data generation, training, evaluation and demo-to-execution runs.

Every subcommand takes ``--config`` (one JSON document), ``--seed`` (overrides the
config's seed) and ``--out`` (output directory), writes its artifacts there and
prints a JSON summary on stdout.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import sys
import zipfile
from pathlib import Path

import numpy as np

from . import __version__
from .beliefmap import DetectorNoise, decode_maps, detection_confidence, is_detected, synthetic_final_stage
from .errors import ConfigError, DemoProgError, FormatError, InvalidGoal
from .executor import (
    FaultConfig,
    Perturbation,
    World,
    enumerate_exec_dataset,
    evaluate_exec_net,
    flat_scene,
    learned_policy,
    oracle_policy,
    run_closed_loop,
)
from .geometry import EDGE, PALETTE, CameraModel, CuboidPose, Scene, SceneGenConfig, load_scene, project_scene, randomize_scene, save_scene
from .metrics import MetricSample, aggregate
from .neural import TrainConfig, load_params, save_params
from .program import (
    enumerate_goals,
    evaluate_program_net,
    predict_programs,
    program_dataset,
    program_to_tensor,
    render_text,
    save_program,
    load_program,
    synthesize_program,
    train_program_net,
)
from .relationship import (
    NO_AUG,
    OCCLUSION_HEAVY,
    AugConfig,
    PairDataset,
    build_state,
    eval_rel,
    generate_pair_dataset,
    net_scorer,
    occlusion_test_config,
    oracle_scorer,
    pair_accuracy,
    rel_probabilities,
    threshold_state,
    train_rel_net,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NOT_REACHED = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "sceneGen": {"n_min": 2, "n_max": 5},
    "count": 10,
    "preset": None,
    "pairs": 12000,
    "aug": {},
    "train": {},
    "n": 5,
    "includePyramids": True,
    "hiddenLayers": None,
    "width": None,
    "nRange": [2, 6],
    "budgetSteps": 25000,
    "faults": {},
    "maxSteps": None,
    "scene": None,
    "program": None,
    "relWeights": None,
    "progWeights": None,
    "execWeights": None,
    "data": None,
    "evaluate": "keypoints",
    "threshold": 0.5,
}


def load_config(path, seed=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def _train_config(cfg, **defaults) -> TrainConfig:
    kw = {**defaults, **cfg["train"]}
    kw.setdefault("seed", cfg["seed"])
    try:
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        tc = TrainConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc
    tc.validate()
    return tc


def _scene_gen(cfg) -> SceneGenConfig:
    try:
        sg = SceneGenConfig(**cfg["sceneGen"])
    except TypeError as exc:
        raise ConfigError(f"bad sceneGen config: {exc}") from exc
    sg.validate()
    return sg


def _aug(cfg) -> AugConfig:
    if not cfg["aug"]:
        return NO_AUG
    try:
        return AugConfig(**cfg["aug"])
    except TypeError as exc:
        raise ConfigError(f"bad aug config: {exc}") from exc


def _weights(path):
    try:
        return load_params(path)[0]
    except OSError as exc:
        raise FormatError(f"cannot read weights {path}: {exc}") from exc


def _save_npz(path: Path, **arrays):
    """Like np.savez_compressed but with fixed member timestamps, so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, a in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(a), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def tower_example_scene():
    """Green on the table, red on green, blue on red, yellow alone; fixed camera."""
    ids = [PALETTE.index(c) for c in ("red", "green", "blue", "yellow")]
    e = EDGE
    cubes = (
        CuboidPose((0.0, 0.0, 1.5 * e), 0.0, e, ids[0]),
        CuboidPose((0.0, 0.0, 0.5 * e), 0.0, e, ids[1]),
        CuboidPose((0.0, 0.0, 2.5 * e), 0.0, e, ids[2]),
        CuboidPose((0.12, 0.04, 0.5 * e), 0.3, e, ids[3]),
    )
    scene = Scene(cubes, e, PALETTE)
    camera = CameraModel.look_at((0.1, -0.65, 0.45), (0.04, 0.0, 0.06))
    return scene, camera


def flat_example_scene(n=3):
    scene = flat_scene(n)
    camera = CameraModel.look_at((0.0, -0.7, 0.45), (0.0, 0.0, 0.02))
    return scene, camera


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scenes(cfg, out: Path):
    files = []
    if cfg["preset"] in ("tower-example", "flat"):
        scene, cam = tower_example_scene() if cfg["preset"] == "tower-example" else flat_example_scene()
        p = out / f"{cfg['preset']}.json"
        save_scene(p, scene, cam)
        files.append(p.name)
    elif cfg["preset"] is not None:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    else:
        sg = _scene_gen(cfg)
        for k in range(int(cfg["count"])):
            scene, cam = randomize_scene(np.random.default_rng([cfg["seed"], k]), sg)
            p = out / f"scene_{k:05d}.json"
            save_scene(p, scene, cam)
            files.append(p.name)
    return {"command": "gen-scenes", "count": len(files), "files": files}


def cmd_gen_rel_data(cfg, out: Path):
    aug = _aug(cfg)
    ds = generate_pair_dataset(int(cfg["pairs"]), cfg["seed"], aug, _scene_gen(cfg))
    (out / "rel_pairs.jsonl").write_text(ds.to_jsonl())
    counts = np.bincount(ds.y, minlength=3).tolist()
    return {"command": "gen-rel-data", "count": len(ds), "labelCounts": counts, "augTag": ds.aug_tag, "file": "rel_pairs.jsonl"}


def _load_pairs(cfg) -> PairDataset:
    if cfg["data"]:
        try:
            return PairDataset.from_jsonl(Path(cfg["data"]).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read {cfg['data']}: {exc}") from exc
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise FormatError(f"malformed pair dataset: {exc}") from exc
    return generate_pair_dataset(int(cfg["pairs"]), cfg["seed"], _aug(cfg), _scene_gen(cfg))


def cmd_train_rel(cfg, out: Path):
    ds = _load_pairs(cfg)
    tc = _train_config(cfg, epochs=60, batch_size=64, learning_rate=3e-4)
    params, hist, _ = train_rel_net(ds, tc, cfg["hiddenLayers"] or 3, cfg["width"] or 100)
    save_params(out / "rel.dnet", params, {"kind": "relationship", "augTag": ds.aug_tag})
    acc = pair_accuracy(rel_probabilities(params, ds.X), ds.y)
    return {"command": "train-rel", "pairs": len(ds), "finalLoss": hist.epochs[-1]["loss"], "accuracy": acc, "weights": "rel.dnet"}


def cmd_enum_programs(cfg, out: Path):
    pairs = enumerate_goals(int(cfg["n"]), bool(cfg["includePyramids"]))
    lines = []
    for goal, prog in pairs:
        pp, rel = program_to_tensor(prog)
        lines.append(json.dumps({"goalTensor": goal.tolist(), "programTensor": {"pickPlace": pp.astype(int).tolist(), "rel": rel.astype(int).tolist()}}))
    (out / "programs.jsonl").write_text("\n".join(lines) + "\n")
    return {"command": "enum-programs", "n": cfg["n"], "includePyramids": cfg["includePyramids"], "count": len(pairs), "file": "programs.jsonl"}


def cmd_train_prog(cfg, out: Path):
    n = int(cfg["n"])
    pairs = enumerate_goals(n, bool(cfg["includePyramids"]))
    tc = _train_config(cfg, epochs=20, batch_size=64, learning_rate=1e-3, train_fraction=0.8)
    h, w = cfg["hiddenLayers"] or 4, cfg["width"] or 1024
    params, hist, (_, held) = train_program_net(pairs, n, h, w, tc, eval_every=tc.epochs or 1)
    save_params(out / "prog.dnet", params, {"kind": "program", "n": n, "includePyramids": cfg["includePyramids"]})
    X, T = program_dataset(pairs)
    full = evaluate_program_net(params, X, T, n)
    report = {"command": "train-prog", "goals": len(pairs), "trainFraction": tc.train_fraction, "accuracy": full["accuracy"], "weights": "prog.dnet"}
    if len(held):
        report["heldOutAccuracy"] = evaluate_program_net(params, X[held], [t[held] for t in T], n)["accuracy"]
    return report


def cmd_gen_exec_data(cfg, out: Path):
    lo, hi = cfg["nRange"]
    ds = enumerate_exec_dataset((int(lo), int(hi)), cfg["seed"])
    _save_npz(out / "exec_data.npz", X=ds.X, Y=ds.Y, n_objects=ds.n_objects, kind=ds.kind)
    return {"command": "gen-exec-data", "count": len(ds), "onPath": int((ds.kind == 0).sum()), "displaced": int((ds.kind == 1).sum()), "digest": ds.digest(), "file": "exec_data.npz"}


def exec_epochs(n_records, train_fraction, batch_size, budget_steps, min_epochs=10):
    """Epochs giving every train fraction the same number of optimizer steps."""
    per_epoch = math.ceil(max(1, round(train_fraction * n_records)) / batch_size)
    return max(min_epochs, math.ceil(budget_steps / per_epoch))


def cmd_train_exec(cfg, out: Path):
    from .executor import train_exec_net

    lo, hi = cfg["nRange"]
    ds = enumerate_exec_dataset((int(lo), int(hi)), cfg["seed"])
    base = _train_config(cfg, batch_size=32, learning_rate=1e-3, weight_decay=0.1, train_fraction=0.95)
    epochs = cfg["train"].get("epochs") or exec_epochs(len(ds), base.train_fraction, base.batch_size, cfg["budgetSteps"])
    tc = TrainConfig(**{**base.__dict__, "epochs": epochs})
    params, hist, _ = train_exec_net(ds, tc, cfg["hiddenLayers"] or 5, cfg["width"] or 128, eval_epochs=set(range(epochs - 4, epochs + 1)))
    save_params(out / "exec.dnet", params, {"kind": "exec"})
    last = [r["accuracy"] for r in hist.epochs if "accuracy" in r]
    return {"command": "train-exec", "records": len(ds), "epochs": epochs, "trainFraction": tc.train_fraction, "accuracyLast5": float(np.mean(last)), "weights": "exec.dnet"}


def _read_scene(cfg):
    if not cfg["scene"]:
        raise ConfigError("no scene file given (--scene or config 'scene')")
    scene, camera = load_scene(cfg["scene"])
    if camera is None:
        raise FormatError("scene file has no camera; cannot observe it")
    return scene, camera


def infer(scene, camera, cfg):
    proj = project_scene(scene, camera)
    if cfg["relWeights"]:
        scorer = net_scorer(_weights(cfg["relWeights"]))
    else:
        scorer = oracle_scorer(scene)
    scores = build_state(proj, scorer)
    goal = threshold_state(scores, float(cfg["threshold"]))
    if cfg["progWeights"]:
        params = _weights(cfg["progWeights"])
        if params.spec.input_dim != goal.size:
            raise FormatError("program weights were trained for a different object count")
        program = predict_programs(params, [goal])[0]
    else:
        program = synthesize_program(goal)
    return goal, program


def cmd_infer(cfg, out: Path):
    scene, camera = _read_scene(cfg)
    goal, program = infer(scene, camera, cfg)
    names = scene.color_names()
    save_program(out / "program.json", program, names)
    sentence = render_text(program, names)
    print(sentence, file=sys.stderr)
    return {"command": "infer", "goalTensor": goal.tolist(), "program": program.to_dict(names), "sentence": sentence, "file": "program.json"}


def _faults(cfg) -> FaultConfig:
    f = dict(cfg["faults"])
    try:
        perts = tuple(Perturbation(int(p["step"]), int(p["object"])) for p in f.pop("perturbations", []))
        return FaultConfig(float(f.pop("actionFailureProb", 0.0)), tuple(int(s) for s in f.pop("failAtSteps", [])), perts)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad fault config: {exc}") from exc
    finally:
        if f:
            raise ConfigError(f"unknown fault keys: {sorted(f)}")


def execute(program, color_ids, palette, cfg, out: Path):
    world = World(flat_scene(program.n, palette, color_ids))
    policy = learned_policy(_weights(cfg["execWeights"])) if cfg["execWeights"] else oracle_policy
    max_steps = cfg["maxSteps"] or 2 * program.n * program.n
    rng = np.random.default_rng([cfg["seed"], 0xE7EC])
    trace = run_closed_loop(program, world, policy, _faults(cfg), int(max_steps), rng)
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    names = [palette[c] for c in color_ids]
    print(trace.timeline(names), file=sys.stderr)
    return trace


def cmd_execute(cfg, out: Path):
    if not cfg["program"]:
        raise ConfigError("no program file given (--program or config 'program')")
    data = _read_json(cfg["program"])
    program = load_program(cfg["program"])
    names = data.get("palette") or list(PALETTE[: program.n])
    palette = tuple(dict.fromkeys(list(names) + list(PALETTE)))
    ids = [palette.index(c) for c in names[: program.n]]
    trace = execute(program, ids, palette, cfg, out)
    return {"command": "execute", "success": trace.success, "steps": len(trace.entries), "file": "trace.jsonl"}


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not JSON") from exc


def cmd_pipeline(cfg, out: Path):
    scene, camera = _read_scene(cfg)
    goal, program = infer(scene, camera, cfg)
    names = scene.color_names()
    save_program(out / "program.json", program, names)
    sentence = render_text(program, names)
    print(sentence, file=sys.stderr)
    trace = execute(program, [c.color_id for c in scene.cuboids], scene.palette, cfg, out)
    return {"command": "pipeline", "sentence": sentence, "program": program.to_dict(names), "success": trace.success, "steps": len(trace.entries)}


def cmd_evaluate(cfg, out: Path):
    what = cfg["evaluate"]
    if what == "keypoints":
        sg = _scene_gen(cfg)
        samples, detections = [], []
        for k in range(int(cfg["count"])):
            rng = np.random.default_rng([cfg["seed"], k])
            scene, cam = randomize_scene(rng, sg)
            for p in project_scene(scene, cam):
                maps = synthetic_final_stage(p, rng, DetectorNoise())
                found = is_detected(detection_confidence(maps))
                detections.append(found)
                if found:
                    pred = decode_maps(maps)
                    truth = p.visible_vertices()
                    samples += [MetricSample.from_points(a, b, p.hull_area) for a, b in zip(pred, truth)]
        report = aggregate(samples, detections).to_dict()
    elif what == "relationship":
        if not cfg["relWeights"]:
            raise ConfigError("relationship evaluation needs relWeights")
        params = _weights(cfg["relWeights"])
        test = generate_pair_dataset(int(cfg["pairs"]), cfg["seed"] + 1_000_003, OCCLUSION_HEAVY, occlusion_test_config())
        probs = rel_probabilities(params, test.X)
        fpr, fnr = eval_rel(probs, test.y)
        report = {"fpr": fpr, "fnr": fnr, "accuracy": pair_accuracy(probs, test.y), "pairs": len(test)}
    elif what == "program":
        if not cfg["progWeights"]:
            raise ConfigError("program evaluation needs progWeights")
        params = _weights(cfg["progWeights"])
        n = int(cfg["n"])
        X, T = program_dataset(enumerate_goals(n, bool(cfg["includePyramids"])))
        if params.spec.input_dim != X.shape[1]:
            raise FormatError("program weights do not match the configured object count")
        report = evaluate_program_net(params, X, T, n)
    elif what == "exec":
        if not cfg["execWeights"]:
            raise ConfigError("exec evaluation needs execWeights")
        lo, hi = cfg["nRange"]
        ds = enumerate_exec_dataset((int(lo), int(hi)), cfg["seed"])
        report = {"accuracy": evaluate_exec_net(_weights(cfg["execWeights"]), ds), "records": len(ds)}
    else:
        raise ConfigError(f"unknown evaluation {what!r}")
    _dump(out / f"report_{what}.json", report)
    return {"command": "evaluate", "evaluate": what, "report": report, "file": f"report_{what}.json"}


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "gen-rel-data": cmd_gen_rel_data,
    "train-rel": cmd_train_rel,
    "enum-programs": cmd_enum_programs,
    "train-prog": cmd_train_prog,
    "gen-exec-data": cmd_gen_exec_data,
    "train-exec": cmd_train_exec,
    "infer": cmd_infer,
    "execute": cmd_execute,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="demoprog", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default=".", help="output directory")
        if name in ("infer", "pipeline"):
            p.add_argument("--scene", help="scene JSON file")
        if name == "execute":
            p.add_argument("--program", help="program JSON file")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        for key in ("scene", "program"):
            if getattr(args, key, None):
                cfg[key] = getattr(args, key)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](cfg, out)
    except (ConfigError, InvalidGoal) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DemoProgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    if summary.get("success") is False:
        return EXIT_NOT_REACHED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
