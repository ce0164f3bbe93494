"""Command-line pipeline: data generation, training, editing, evaluation,
spectra and report merging.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures. All
randomness comes from seed flags; reports leave out file paths so two runs
with the same flags produce byte-identical artifacts wherever they live.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import ConfigHashError, ModelBundle, load_bundle, save_bundle
from .config import SolverConfig, TrainConfig, config_hash
from .flow import edit_latent, forward_map, reverse_map, train_mapper
from .io import (load_world_config, montage, quantize, read_dataset, read_pgm, save_world_config,
                 write_dataset, write_pgm)
from .metrics import FeaturePyramid, GaussianStats, adjacent_pair_eval, frechet_distance
from .predictor import predict_score, r_squared, train_regressor
from .spectrum import (bias_correlation_report, build_spectrum, diff_vectors, export_spectrum,
                       image_identity, parse_range, render_diff, score_histogram)
from .toyworld.encoder import (encode, invert_with_restoration, load_encoder, save_encoder,
                               train_encoder)
from .toyworld.world import (AttributeKind, WorldConfig, cosine, foreground_energy,
                             quality_filter, sample_dataset, truth_score)

log = logging.getLogger("scoreflow")

# flags that name files; excluded from the run-config hash
PATH_FLAGS = {"out", "data", "bundle", "image", "set", "report", "inputs", "encoder", "init", "func"}
IDENTITY_FLOOR = 0.85


def _json_dump(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def run_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in PATH_FLAGS}


def _stamp(args, bundle: ModelBundle | None = None) -> dict:
    cfg = run_config(args)
    out = {"run_config": cfg, "run_config_hash": config_hash(cfg),
           "versions": bundle.versions() if bundle else {"package": __version__}}
    if bundle is not None:
        out["world_hash"] = bundle.world_hash
    return out


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(iterations=args.iters, batch_size=args.batch_size, learning_rate=args.lr,
                       seed=args.seed, lr_schedule=args.schedule)


def _load_data(path):
    root = Path(path)
    world, _ = load_world_config(root / "world.cfg")
    return root, world, read_dataset(root)


def _check_world(bundle: ModelBundle, world: WorldConfig):
    if bundle.world_hash != world.world_hash():
        raise ConfigHashError(f"data world hash {world.world_hash()} does not match bundle world "
                              f"hash {bundle.world_hash}")


# gen-data

def cmd_gen_data(args) -> int:
    world = WorldConfig(seed=args.world_seed, n=args.n, adult_only=args.adult_only,
                        covariate_scale=args.covariate_scale, energy_threshold=args.energy_threshold,
                        identity_threshold=args.identity_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = sample_dataset(args.n, args.seed, args.adult_only, args.covariate_scale)
    data.images = quantize(data.images)

    encoder = None
    if args.encoder:
        encoder = load_encoder(args.encoder)
        if not np.array_equal(encoder.mixing.M, world.mixing().M):
            raise ConfigHashError("encoder was trained for a different world")
    elif args.encoder_iters > 0:
        log.info("training encoder on %d faces", args.encoder_pool)
        pool = sample_dataset(args.encoder_pool, args.encoder_seed, args.adult_only)
        pool.images = quantize(pool.images)
        encoder = train_encoder(
            pool, TrainConfig(iterations=args.encoder_iters, batch_size=64, seed=args.seed,
                              lr_schedule="cosine"),
            world.mixing(),
            corrector_cfg=TrainConfig(iterations=args.corrector_iters, batch_size=32, learning_rate=3e-3,
                                      seed=args.seed, lr_schedule="cosine"))

    if encoder is not None:
        w = encode(encoder, data.images)
        restored = invert_with_restoration(encoder, w, data.images)
        sims = cosine(image_identity(encoder, data.images), image_identity(encoder, restored))
        energy = foreground_energy(data.images)
        records = [(i, {"energy": float(energy[i]), "identity_similarity": float(sims[i])})
                   for i in range(len(data))]
        kept, report = quality_filter(records, world.energy_threshold, world.identity_threshold)
        data = data.subset([i for i, _ in kept])
        save_encoder(encoder, out / "encoder.bin")
    else:
        report = {"total": len(data), "passed": len(data), "skipped": "no encoder available"}

    write_dataset(out, data)
    save_world_config(out / "world.cfg", world, sample_seed=args.seed)
    _json_dump({**report, **_stamp(args)}, out / "quality.json")
    print(_json_dump({"written": len(data), "quality": report}), end="")
    return 0


# training

def cmd_train_attr(args) -> int:
    root, world, data = _load_data(args.data)
    attr = AttributeKind.parse(args.attr)
    out = Path(args.out)
    if out.exists():
        bundle = load_bundle(out)
        _check_world(bundle, world)
    else:
        if not (root / "encoder.bin").exists():
            raise FileNotFoundError(f"{root / 'encoder.bin'} is missing; generate data with an encoder")
        bundle = ModelBundle(world, load_encoder(root / "encoder.bin"))
    init = load_bundle(args.init).regressor(attr) if args.init else None
    scores = data.scores[attr]
    n_hold = int(round(len(data) * args.holdout))
    n_fit = len(data) - n_hold
    model = train_regressor(data.images[:n_fit], scores[:n_fit], init=init, cfg=_train_cfg(args),
                            attribute=attr.value)
    summary = {"attribute": attr.value, "final_loss": model.loss_curve[-1] if model.loss_curve else None}
    if n_hold > 1:
        pred = predict_score(model, data.images[n_fit:])
        summary["holdout_r2"] = r_squared(pred, scores[n_fit:])
        summary["holdout_mae"] = float(np.abs(pred - scores[n_fit:]).mean())
    bundle.set_regressor(attr, model)
    save_bundle(bundle, out)
    print(_json_dump(summary), end="")
    return 0


def cmd_train_mapper(args) -> int:
    _, world, data = _load_data(args.data)
    attr = AttributeKind.parse(args.attr)
    bundle = load_bundle(args.out)
    _check_world(bundle, world)
    w = encode(bundle.encoder, data.images)
    if args.score_source == "truth":
        s = data.scores[attr]
    else:
        s = predict_score(bundle.regressor(attr), data.images)
    model = train_mapper((w, s), _train_cfg(args), num_blocks=args.blocks, hidden=(args.hidden,),
                         attribute=attr.value, solver=SolverConfig(steps=args.steps))
    z = np.random.default_rng(args.seed).normal(size=(100, w.shape[1]))
    err = float(np.abs(reverse_map(model, forward_map(model, z, 0.5), 0.5) - z).max())
    bundle.set_flow(attr, model)
    save_bundle(bundle, args.out)
    print(_json_dump({"attribute": attr.value, "final_nll": model.loss_curve[-1] if model.loss_curve else None,
                      "roundtrip_error": err}), end="")
    return 0


# editing

def cmd_edit(args) -> int:
    bundle = load_bundle(args.bundle)
    attr = AttributeKind.parse(args.attr)
    x = read_pgm(args.image)
    w = encode(bundle.encoder, x)
    s_o = predict_score(bundle.regressor(attr), x)
    w_edit, s_t = edit_latent(bundle.flow(attr), w, s_o, args.delta)
    out = invert_with_restoration(bundle.encoder, w_edit, x)
    write_pgm(args.out, out)
    print(_json_dump({"attribute": attr.value, "delta": args.delta, "original_score": s_o,
                      "target_score": s_t, "edited_score": predict_score(bundle.regressor(attr), out)}), end="")
    return 0


def edit_set(bundle: ModelBundle, attr, images, lambdas):
    """Edit every face at every lambda. Returns ``(w, s_o, edits)`` where
    edits maps lambda -> (latents, targets, restored images)."""
    attr = AttributeKind.parse(attr)
    w = encode(bundle.encoder, images)
    s_o = predict_score(bundle.regressor(attr), images)
    edits = {}
    for lam in lambdas:
        w_e, s_t = edit_latent(bundle.flow(attr), w, s_o, lam)
        edits[lam] = (w_e, np.asarray(s_t), invert_with_restoration(bundle.encoder, w_e, images))
    return w, s_o, edits


def evaluate_attribute(bundle: ModelBundle, attr, images, deltas, feature_seed: int = 0) -> dict:
    attr = AttributeKind.parse(attr)
    lambdas = sorted(set(float(d) for d in deltas) | {0.0})
    w, s_o, edits = edit_set(bundle, attr, images, lambdas)
    mixing = bundle.encoder.mixing
    regressor = bundle.regressor(attr)
    pyramid = FeaturePyramid(feature_seed)
    report = adjacent_pair_eval({lam: edits[lam][2] for lam in lambdas},
                                lambda x: image_identity(bundle.encoder, x), pyramid,
                                scores=lambda x: predict_score(regressor, x), original_scores=s_o)
    # oracle-side checks
    p0 = mixing.to_params(w)
    t0 = truth_score(np.clip(p0, -1.0, 1.0), attr)
    id0 = image_identity(bundle.encoder, images)
    adas_truth, direction, retained, bias_rows = [], [], [], []
    per_lambda = []
    for lam in lambdas:
        if lam == 0.0:
            continue
        w_e, s_t, img = edits[lam]
        p_e = mixing.to_params(w_e)
        t_e = truth_score(np.clip(p_e, -1.0, 1.0), attr)
        sims = cosine(id0, image_identity(bundle.encoder, img))
        adas_truth.append(np.abs(t_e - s_t))
        if abs(lam) >= 0.1 - 1e-12:
            direction.append(np.sign(t_e - t0) == np.sign(lam))
        if abs(lam) <= 0.2 + 1e-12:
            retained.append(sims >= IDENTITY_FLOOR)
        bias_rows += [(w[i], w_e[i], lam, attr) for i in range(len(w))]
        per_lambda.append({"lambda": lam, "adas_truth": float(np.abs(t_e - s_t).mean()),
                           "identity_mean": float(sims.mean()),
                           "truth_shift_mean": float((t_e - t0).mean())})
    fid_sqrt = [frechet_distance(GaussianStats.from_samples(pyramid.pooled(edits[p["lo"]][2])),
                                 GaussianStats.from_samples(pyramid.pooled(edits[p["hi"]][2])), variant="sqrt")
                for p in report.pairs]
    report.extra = {
        "attribute": attr.value,
        "n_faces": int(len(images)),
        "adas_truth": float(np.concatenate(adas_truth).mean()) if adas_truth else None,
        "direction_rate": float(np.concatenate(direction).mean()) if direction else None,
        "identity_retention": float(np.concatenate(retained).mean()) if retained else None,
        "fid_sqrt_mean": float(np.mean(fid_sqrt)),
        "per_lambda": per_lambda,
        "bias": bias_correlation_report(bias_rows, mixing)[attr.value] if len(bias_rows) >= 30 else None,
        "score_histogram": score_histogram(s_o),
    }
    return report.to_dict()


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    root = Path(args.set)
    world, _ = load_world_config(root / "world.cfg")
    data = read_dataset(root)
    warnings = []
    if world.world_hash() != bundle.world_hash:
        warnings.append(f"world hash mismatch: set {world.world_hash()} vs bundle {bundle.world_hash}")
    deltas = _parse_deltas(args.deltas)
    attrs = [AttributeKind.parse(a).value for a in args.attr] if args.attr else sorted(bundle.flows)
    if not attrs:
        raise KeyError("bundle has no trained flows")
    results = {a: evaluate_attribute(bundle, a, data.images, deltas, args.feature_seed) for a in attrs}
    report = {**_stamp(args, bundle), "dataset_world_hash": world.world_hash(), "warnings": warnings,
              "deltas": deltas, "attributes": results}
    _json_dump(report, args.report)
    summary = {a: {k: r[k] for k in ("is", "pd", "fid", "adas")} for a, r in results.items()}
    print(_json_dump({"warnings": warnings, "summary": summary}), end="")
    return 0


def _parse_deltas(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValueError(f"bad delta list {text!r}") from None
    if not vals:
        raise ValueError("empty delta list")
    return vals


# spectrum

def cmd_spectrum(args) -> int:
    bundle = load_bundle(args.bundle)
    attr = AttributeKind.parse(args.attr)
    x = read_pgm(args.image)
    result = build_spectrum(x, attr, parse_range(args.range), bundle.flow(attr), bundle.regressor(attr),
                            bundle.encoder)
    prefix = Path(args.out)
    export_spectrum(result, prefix)
    sidecar = result.sidecar()
    if len(result.points) > 1:
        base = encode(bundle.encoder, x)
        renders, diffs = [], []
        for d in diff_vectors(result):
            af, rf = render_diff(d, base, x, bundle.encoder)
            renders += [af, rf]
            diffs.append({"hi": d.hi, "lo": d.lo, "af_norm": float(np.linalg.norm(d.af))})
        write_pgm(prefix.with_name(prefix.name + "_diff.pgm"), montage(renders))
        sidecar["diffs"] = diffs
    sidecar.update(_stamp(args, bundle))
    _json_dump(sidecar, prefix.with_suffix(".json"))
    print(_json_dump({"points": len(result.points), "attribute": attr.value}), end="")
    return 0


# report

def cmd_report(args) -> int:
    rows, hashes = {}, []
    for path in args.inputs:
        rep = json.loads(Path(path).read_text())
        hashes.append(rep.get("run_config_hash"))
        for attr, r in rep.get("attributes", {}).items():
            rows.setdefault(attr, []).append({k: r.get(k) for k in ("is", "pd", "fid", "adas", "adas_truth")})
    summary = {}
    for attr, items in sorted(rows.items()):
        summary[attr] = {k: float(np.mean([i[k] for i in items if i[k] is not None]))
                         for k in items[0] if any(i[k] is not None for i in items)}
    out = {**_stamp(args), "inputs": hashes, "summary": summary}
    _json_dump(out, args.out)
    print(_json_dump(summary), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoreflow", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def train_flags(q, iters, batch, lr):
        q.add_argument("--iters", type=int, default=iters)
        q.add_argument("--batch-size", type=int, default=batch)
        q.add_argument("--lr", type=float, default=lr)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--schedule", choices=["constant", "cosine"], default="cosine")

    q = sub.add_parser("gen-data", help="sample, render, invert and filter a toy dataset")
    q.add_argument("--n", type=int, default=5000)
    q.add_argument("--seed", type=int, default=0, help="sampling seed")
    q.add_argument("--world-seed", type=int, default=0, help="seed of the latent mixing matrix")
    q.add_argument("--adult-only", action="store_true")
    q.add_argument("--covariate-scale", type=float, default=1.0)
    q.add_argument("--energy-threshold", type=float, default=0.2)
    q.add_argument("--identity-threshold", type=float, default=0.85)
    q.add_argument("--encoder", help="reuse a trained encoder file instead of training one")
    q.add_argument("--encoder-iters", type=int, default=12000)
    q.add_argument("--encoder-pool", type=int, default=16000)
    q.add_argument("--encoder-seed", type=int, default=7919)
    q.add_argument("--corrector-iters", type=int, default=1500)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("train-attr", help="train or fine-tune an attribute regressor")
    q.add_argument("--attr", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--init", help="bundle whose regressor is the starting point")
    q.add_argument("--holdout", type=float, default=0.1)
    train_flags(q, 4000, 64, 1e-3)
    q.add_argument("--out", required=True, help="bundle file, created or updated")
    q.set_defaults(func=cmd_train_attr)

    q = sub.add_parser("train-mapper", help="train the conditional flow for one attribute")
    q.add_argument("--attr", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--score-source", choices=["predicted", "truth"], default="predicted")
    q.add_argument("--blocks", type=int, default=4)
    q.add_argument("--hidden", type=int, default=64)
    q.add_argument("--steps", type=int, default=16)
    train_flags(q, 4000, 50, 1e-3)
    q.add_argument("--out", required=True, help="bundle file to update")
    q.set_defaults(func=cmd_train_mapper)

    q = sub.add_parser("edit", help="edit one face image")
    q.add_argument("--image", required=True)
    q.add_argument("--attr", required=True)
    q.add_argument("--delta", type=float, required=True)
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_edit)

    q = sub.add_parser("eval", help="adjacent-pair evaluation of an image set")
    q.add_argument("--set", required=True)
    q.add_argument("--deltas", default="-0.2,-0.1,0.1,0.2", help="comma list; write --deltas=-0.2,...")
    q.add_argument("--attr", action="append", help="repeatable; default: every attribute in the bundle")
    q.add_argument("--feature-seed", type=int, default=0)
    q.add_argument("--bundle", required=True)
    q.add_argument("--report", required=True)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("spectrum", help="edit one face across a lambda grid")
    q.add_argument("--image", required=True)
    q.add_argument("--attr", required=True)
    q.add_argument("--range", default="-0.4:0.4:0.1", help="lo:hi:step; write --range=-0.4:0.4:0.1")
    q.add_argument("--bundle", required=True)
    q.add_argument("--out", required=True, help="output prefix for .pgm and .json")
    q.set_defaults(func=cmd_spectrum)

    q = sub.add_parser("report", help="merge evaluation reports")
    q.add_argument("--inputs", nargs="+", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    cmd_args = argparse.Namespace(**{k: v for k, v in vars(args).items() if k not in ("verbose", "command")})
    cmd_args.command = args.command
    try:
        return args.func(cmd_args)
    except (OSError, ValueError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"scoreflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
