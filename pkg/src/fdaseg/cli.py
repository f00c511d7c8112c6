"""Command-line entry point wiring all modules into reproducible commands.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
Heavy imports happen after thread-count env vars are set, so --threads (or
FDA_THREADS) reaches the BLAS threadpool before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

TOOL = "fdaseg"
USAGE_EXIT, VALIDATION_EXIT, RUNTIME_EXIT = 1, 2, 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _set_threads(n: int):
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _config_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _write_manifest(out_dir_or_file: str, command: str, config,
                    seeds, inputs, outputs, t0: float):
    from . import __version__

    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seeds": seeds,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_time_s": round(time.monotonic() - t0, 3),
    }
    if os.path.isdir(out_dir_or_file):
        path = os.path.join(out_dir_or_file, "run_manifest.json")
    else:
        path = out_dir_or_file + ".manifest.json"
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ValueError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed JSON: {e}")


# --------------------------------------------------------------------------
# subcommand handlers
# --------------------------------------------------------------------------

def _cmd_phantom_gen(args) -> int:
    from .phantom import (NoiseSpec, PhantomSpec, corrupt_to_noisy,
                          generate_phantom, save_sample)

    t0 = time.monotonic()
    spec_dict = _load_json(args.spec)
    spec = PhantomSpec.from_dict(spec_dict)
    sample = generate_phantom(spec)
    noise_dict = None
    if args.noise:
        noise_dict = _load_json(args.noise)
        sample = corrupt_to_noisy(sample, NoiseSpec.from_dict(noise_dict))
    save_sample(sample, args.out)
    _write_manifest(args.out, "phantom gen", {"spec": spec_dict, "noise": noise_dict},
                    {"phantom": spec.seed}, [args.spec], [args.out], t0)
    print(f"wrote phantom ({int(sample.mask.data.sum())} airway voxels, "
          f"{len(sample.centerline)} branches) to {args.out}")
    return 0


def _cmd_sdm_compute(args) -> int:
    from .sdm import sdm_compute
    from .volcore import load_volume, save_volume

    t0 = time.monotonic()
    mask = load_volume(args.mask)
    result = sdm_compute(mask, spacing_aware=args.spacing_aware, mode=args.mode)
    save_volume(result.volume, args.out)
    _write_manifest(args.out, "sdm compute",
                    {"spacing_aware": args.spacing_aware, "mode": args.mode},
                    {}, [args.mask], [args.out], t0)
    print(f"sdm written to {args.out} (max_in={result.max_in:.3f}, "
          f"max_out={result.max_out:.3f})")
    return 0


def _parse_train_config(path: str | None):
    from .losses import LossConfig
    from .model import FdaConfig
    from .train import TrainConfig

    raw = _load_json(path) if path else {}
    unknown = set(raw) - {"model", "train", "loss", "infer"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return (FdaConfig.from_dict(raw.get("model", {})),
            TrainConfig.from_dict(raw.get("train", {})),
            LossConfig.from_dict(raw.get("loss", {})),
            raw)


def _cmd_train(args) -> int:
    from .model import FdaModel
    from .train import fit, load_dataset

    t0 = time.monotonic()
    model_cfg, train_cfg, loss_cfg, raw = _parse_train_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    clean = load_dataset(args.clean)
    noisy = load_dataset(args.noisy)
    model = FdaModel(model_cfg, init_seed=train_cfg.seed)
    final = fit(model, clean, noisy, train_cfg, loss_cfg, args.out)
    _write_manifest(args.out, "train", raw, {"train": train_cfg.seed},
                    [args.clean, args.noisy], [final], t0)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_infer(args) -> int:
    from .infer import InferConfig, postprocess, sliding_window_predict
    from .model import model_from_checkpoint
    from .volcore import clamp_normalize, load_volume, save_volume

    t0 = time.monotonic()
    raw = _load_json(args.config) if args.config else {}
    infer_cfg = InferConfig.from_dict(raw.get("infer", raw) or {})
    model, _ = model_from_checkpoint(args.ckpt)
    image = clamp_normalize(load_volume(args.image))
    prob = sliding_window_predict(model, image, infer_cfg)
    mask = postprocess(prob, infer_cfg)
    save_volume(mask, args.out)
    outputs = [args.out]
    if args.prob_out:
        save_volume(prob, args.prob_out)
        outputs.append(args.prob_out)
    _write_manifest(args.out, "infer", raw, {}, [args.ckpt, args.image],
                    outputs, t0)
    print(f"prediction written to {args.out} "
          f"({int(mask.data.sum())} foreground voxels)")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate
    from .phantom import load_centerline
    from .report import write_metrics_json, write_report_bundle
    from .volcore import load_volume

    t0 = time.monotonic()
    pred = load_volume(args.pred)
    gt = load_volume(args.gt)
    centerline = load_centerline(args.centerline) if args.centerline else None
    report = evaluate(pred, gt, centerline=centerline, frac=args.branch_frac,
                      connectivity=args.connectivity)
    payload = report.to_dict()
    write_metrics_json(args.out, payload)
    if args.report_dir:
        rows = [{"volume": os.path.basename(args.pred),
                 "length_rate": report.length_rate,
                 "branch_rate": report.branch_rate, "dsc": report.dsc}]
        write_report_bundle(args.report_dir, payload, rows,
                            montage=(gt, gt, pred))
    _write_manifest(args.out, "eval",
                    {"branch_frac": args.branch_frac,
                     "connectivity": args.connectivity},
                    {}, [args.pred, args.gt], [args.out], t0)
    print(f"Length {report.length_rate:.1f}%  Branch {report.branch_rate:.1f}%  "
          f"DSC {report.dsc:.1f}%  -> {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradsuite import composed_checks, primitive_checks, run_all

    if args.op:
        results = [(n, r) for n, r in primitive_checks(args.seed, args.samples)
                   if n == args.op]
        results += [(n, r) for n, r in composed_checks(args.seed, args.samples)
                    if n == args.op]
        if not results:
            raise ValueError(f"no registered check named {args.op!r}")
        ok = all(r["passed"] for _, r in results)
    else:
        results, ok = run_all(args.seed, args.samples)
    print(f"{'check':30s} {'max_rel_err':>12s} {'tol':>8s}  status")
    for name, rep in results:
        worst = max(v["max_rel_err"] for v in rep["tensors"].values())
        print(f"{name:30s} {worst:12.2e} {rep['tol']:8.0e}  "
              f"{'PASS' if rep['passed'] else 'FAIL'}")
    print(f"{'ALL PASS' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else RUNTIME_EXIT


# --------------------------------------------------------------------------
# pipeline presets
# --------------------------------------------------------------------------

def _phantom_bank(seed: int, shape, depth, n_clean, n_noisy, n_eval, out_dir,
                  noise_kwargs=None):
    """Generate and save the clean/noisy/eval phantom sets for a pipeline run."""
    from .phantom import NoiseSpec, PhantomSpec, corrupt_to_noisy, \
        generate_phantom, save_sample

    dirs = {k: os.path.join(out_dir, "phantoms", k)
            for k in ("clean", "noisy", "eval")}
    specs = {"clean": [], "noisy": [], "eval": []}
    for i in range(n_clean):
        spec = PhantomSpec(shape=shape, depth=depth, seed=seed * 1000 + 101 + i)
        save_sample(generate_phantom(spec), os.path.join(dirs["clean"], f"s{i}"))
        specs["clean"].append(spec.seed)
    for kind, count, base in (("noisy", n_noisy, 201), ("eval", n_eval, 401)):
        for i in range(count):
            spec = PhantomSpec(shape=shape, depth=depth,
                               seed=seed * 1000 + base + i)
            noise = NoiseSpec(seed=seed * 1000 + base + 100 + i,
                              **(noise_kwargs or {}))
            sample = corrupt_to_noisy(generate_phantom(spec), noise)
            save_sample(sample, os.path.join(dirs[kind], f"s{i}"))
            specs[kind].append(spec.seed)
    return dirs, specs


def _evaluate_dir(model, eval_dir, infer_cfg):
    """Infer + score every sample under eval_dir; returns per-volume rows."""
    from .infer import postprocess, sliding_window_predict
    from .metrics import evaluate
    from .phantom import load_sample
    from .volcore import clamp_normalize

    rows = []
    extras = []
    for name in sorted(os.listdir(eval_dir)):
        sdir = os.path.join(eval_dir, name)
        if not os.path.isdir(sdir):
            continue
        sample = load_sample(sdir)
        image = clamp_normalize(sample.image)
        prob = sliding_window_predict(model, image, infer_cfg)
        pred = postprocess(prob, infer_cfg)
        rep = evaluate(pred, sample.mask, centerline=sample.centerline)
        rows.append({"volume": name, "length_rate": rep.length_rate,
                     "branch_rate": rep.branch_rate, "dsc": rep.dsc})
        extras.append((sample, pred))
    if not rows:
        raise ValueError(f"no evaluation samples under {eval_dir}")
    return rows, extras


def _mean_metrics(rows: list[dict]) -> dict:
    return {k: sum(r[k] for r in rows) / len(rows)
            for k in ("length_rate", "branch_rate", "dsc")}


PIPELINE_PRESETS = {
    "toy": {
        "shape": (32, 32, 32), "depth": 3, "n_clean": 2, "n_noisy": 1,
        "n_eval": 1, "epochs": 2, "steps_per_epoch": 10,
        "patch": (24, 24, 24), "arms": ("full",), "n_seeds": 1,
        "noise": {},
    },
    "trend": {
        "shape": (32, 32, 32), "depth": 3, "n_clean": 4, "n_noisy": 2,
        "n_eval": 4, "epochs": 8, "steps_per_epoch": 30,
        "patch": (24, 24, 24), "arms": ("full", "single_stream"), "n_seeds": 3,
        # corruption strong enough that the tree metrics stay off the
        # 100% ceiling, so the two arms can actually be told apart
        "noise": {"n_patches": 10, "patch_intensity_range": (250.0, 650.0),
                  "gaussian_noise_sigma": 55.0, "blur_sigma": 1.5},
    },
}


def run_pipeline(preset: str, seed: int, out_dir: str,
                 steps_override: int | None = None) -> dict:
    """Generate phantoms, train, infer held-out volumes, evaluate, report."""
    from .infer import InferConfig
    from .losses import LossConfig
    from .model import FdaConfig, FdaModel
    from .report import write_report_bundle
    from .train import TrainConfig, fit, load_dataset

    if preset not in PIPELINE_PRESETS:
        raise ValueError(f"unknown preset {preset!r}; "
                         f"choose from {sorted(PIPELINE_PRESETS)}")
    p = PIPELINE_PRESETS[preset]
    os.makedirs(out_dir, exist_ok=True)
    dirs, phantom_seeds = _phantom_bank(
        seed, p["shape"], p["depth"], p["n_clean"], p["n_noisy"], p["n_eval"],
        out_dir, noise_kwargs=p["noise"])
    clean = load_dataset(dirs["clean"])
    noisy = load_dataset(dirs["noisy"])
    infer_cfg = InferConfig(patch_shape=p["patch"])
    loss_cfg = LossConfig()
    epochs = p["epochs"]
    steps = p["steps_per_epoch"]
    if steps_override:
        epochs, steps = 1, steps_override

    arm_rows: dict[str, list[dict]] = {}
    arm_seed_means: dict[str, list[dict]] = {}
    log_paths = []
    montage = None
    final_ckpt = None
    for arm in p["arms"]:
        arm_rows[arm] = []
        arm_seed_means[arm] = []
        for si in range(p["n_seeds"]):
            run_seed = seed + si
            model_cfg = FdaConfig.toy(use_noisy_stream=(arm == "full"))
            model = FdaModel(model_cfg, init_seed=run_seed)
            train_cfg = TrainConfig(
                epochs=epochs, steps_per_epoch=steps, patch_shape=p["patch"],
                seed=run_seed, checkpoint_every=max(1, epochs))
            run_dir = os.path.join(out_dir, "train", f"{arm}_seed{si}")
            ckpt = fit(model, clean, noisy, train_cfg, loss_cfg, run_dir)
            final_ckpt = ckpt
            if si == 0:
                log_paths.append(os.path.join(run_dir, "log.jsonl"))
            rows, extras = _evaluate_dir(model, dirs["eval"], infer_cfg)
            for r in rows:
                r.update({"arm": arm, "seed": run_seed})
            arm_rows[arm].extend(rows)
            arm_seed_means[arm].append(_mean_metrics(rows))
            if montage is None:
                sample, pred = extras[0]
                montage = (sample.image, sample.mask, pred)

    arm_means = {arm: _mean_metrics(rows) for arm, rows in arm_rows.items()}
    payload: dict = {
        "preset": preset,
        "seed": seed,
        "phantom_seeds": phantom_seeds,
        "arm_means": arm_means,
        "per_seed": arm_seed_means,
    }
    if "single_stream" in arm_means:
        full, single = arm_means["full"], arm_means["single_stream"]
        payload["trend_ok"] = {
            "length": full["length_rate"] >= single["length_rate"],
            "branch": full["branch_rate"] >= single["branch_rate"],
        }
    all_rows = [r for rows in arm_rows.values() for r in rows]
    report_dir = os.path.join(out_dir, "report")
    paths = write_report_bundle(report_dir, payload, all_rows,
                                log_paths=log_paths, montage=montage)
    payload["report_paths"] = paths
    payload["final_checkpoint"] = final_ckpt
    return payload


def _cmd_pipeline(args) -> int:
    t0 = time.monotonic()
    payload = run_pipeline(args.preset, args.seed, args.out, args.steps)
    _write_manifest(args.out, "pipeline",
                    {"preset": args.preset, "steps": args.steps},
                    {"seed": args.seed}, [], [args.out], t0)
    for arm, means in payload["arm_means"].items():
        print(f"{arm:14s} Length {means['length_rate']:.1f}%  "
              f"Branch {means['branch_rate']:.1f}%  DSC {means['dsc']:.1f}%")
    if "trend_ok" in payload:
        print(f"trend_ok: {payload['trend_ok']}")
    print(f"report: {payload['report_paths']['metrics_json']}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=TOOL, description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OMP thread count (default 1; env FDA_THREADS)")
    # accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic phantom commands")
    ph_sub = ph.add_subparsers(dest="phantom_command", parser_class=_Parser)
    gen = ph_sub.add_parser("gen", parents=[common],
                            help="generate a phantom sample directory")
    gen.add_argument("--spec", required=True, help="PhantomSpec JSON file")
    gen.add_argument("--out", required=True, help="output sample directory")
    gen.add_argument("--noise", help="optional NoiseSpec JSON to corrupt the image")
    gen.set_defaults(func=_cmd_phantom_gen)

    sd = sub.add_parser("sdm", help="signed distance map commands")
    sd_sub = sd.add_subparsers(dest="sdm_command", parser_class=_Parser)
    comp = sd_sub.add_parser("compute", parents=[common],
                             help="signed distance map of a mask volume")
    comp.add_argument("--mask", required=True)
    comp.add_argument("--out", required=True)
    comp.add_argument("--spacing-aware", action="store_true")
    comp.add_argument("--mode", choices=("two_sided", "single"), default="two_sided")
    comp.set_defaults(func=_cmd_sdm_compute)

    tr = sub.add_parser("train", parents=[common],
                        help="train the dual-stream model")
    tr.add_argument("--config", help="JSON with model/train/loss sections")
    tr.add_argument("--clean", required=True, help="clean-domain dataset dir")
    tr.add_argument("--noisy", required=True, help="noisy-domain dataset dir")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.set_defaults(func=_cmd_train)

    inf = sub.add_parser("infer", parents=[common],
                         help="sliding-window prediction")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--image", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--prob-out")
    inf.add_argument("--config")
    inf.set_defaults(func=_cmd_infer)

    ev = sub.add_parser("eval", parents=[common],
                        help="tree metrics of a prediction")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--centerline")
    ev.add_argument("--out", required=True)
    ev.add_argument("--report-dir", help="also write csv + figures here")
    ev.add_argument("--branch-frac", type=float, default=0.8)
    ev.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("gradcheck", parents=[common],
                        help="finite-difference gradient suite")
    gc.add_argument("--all", action="store_true", help="run every check (default)")
    gc.add_argument("--op", help="run one named check")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--samples", type=int, default=64)
    gc.set_defaults(func=_cmd_gradcheck)

    pl = sub.add_parser("pipeline", parents=[common],
                        help="full generate/train/infer/eval flow")
    pl.add_argument("--preset", default="toy", choices=sorted(PIPELINE_PRESETS))
    pl.add_argument("--seed", type=int, default=1)
    pl.add_argument("--out", required=True)
    pl.add_argument("--steps", type=int, default=None,
                    help="override: single epoch with this many steps")
    pl.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    if args.command == "phantom" and getattr(args, "phantom_command", None) is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    if args.command == "sdm" and getattr(args, "sdm_command", None) is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT

    threads = getattr(args, "threads", None)
    if threads is None:
        try:
            threads = int(os.environ.get("FDA_THREADS", "1"))
        except ValueError:
            sys.stderr.write("FDA_THREADS must be an integer\n")
            return USAGE_EXIT
    if threads < 1:
        sys.stderr.write("thread count must be >= 1\n")
        return USAGE_EXIT
    _set_threads(threads)

    try:
        return args.func(args)
    except (ValueError, KeyError) as e:
        sys.stderr.write(f"{TOOL}: validation error: {e}\n")
        return VALIDATION_EXIT
    except (OSError, RuntimeError) as e:
        sys.stderr.write(f"{TOOL}: runtime failure: {e}\n")
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
