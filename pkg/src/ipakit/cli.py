"""Command-line entry point: ``ipakit <command> ...``.

Every command is determined by its config file plus flags, writes outputs
atomically, and leaves a manifest (resolved config, seeds, output digests)
beside them. Errors exit with status 1.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, config, io
from .adapters import merge
from .errors import BindingError, IpaError
from .nanomodel import TinyTransformer, attach_adapters, collect_features, evaluate, pretrain_host
from .pipeline import ProjectorSettings, settings_from_config
from .projector import fit_projector, reconstruction_error
from .trainer import train


def _fmt(x):
    return repr(float(x))


def _resolved(args):
    return config.resolve(args.config)


def _analysis_model(args, cfg):
    """Host for ``analyze``: loaded or pretrained, adapters placed per the config."""
    if args.model:
        model = io.model_from_bytes(io.load(args.model))
    else:
        model = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
    target_set = cfg["model"]["target_set"]
    if model.config.target_set != target_set:
        # placement does not change the weights, so the model hash is unchanged
        model = TinyTransformer(replace(model.config, target_set=target_set), model.params())
    return model


def _manifest_for_file(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


# -- commands ---------------------------------------------------------------------


def cmd_pretrain_host(args):
    cfg = _resolved(args)
    model = pretrain_host(config.model_config(cfg), train=config.host_train_config(cfg))
    out = Path(args.out)
    with io.output_lock(out.parent):
        io.save(out, io.model_to_bytes(model))
        log_path = out.with_name(out.name + ".pretrain.csv")
        io.atomic_write(log_path, model.pretrain_log.to_csv())
        io.write_manifest(_manifest_for_file(out), cfg, model.seeds, [out, log_path],
                          {"model_hash": model.model_hash})
    print(model.model_hash)


def cmd_collect(args):
    cfg = _resolved(args)
    model = io.model_from_bytes(io.load(args.model))
    task = config.task_spec(cfg)
    seed = args.seed if args.seed is not None else cfg["projector"]["seed"]
    feats = collect_features(model, task, args.fraction, seed)
    out = Path(args.out)
    with io.output_lock(out):
        paths = []
        for name, fs in feats.items():
            paths.append(io.save(out / f"{name}.features.ipa", io.features_to_bytes(fs)))
        io.write_manifest(out / "manifest.json", cfg, {"subset": seed, "task": task.seed}, paths,
                          {"fraction": args.fraction, "model_hash": model.model_hash})
    for name, fs in feats.items():
        print(f"{name}: {fs.n} rows x {fs.d_in}")


def cmd_pretrain_projector(args):
    out = Path(args.out)
    rows, paths, fitted = [], [], []
    for fpath in args.features:
        fs = io.features_from_bytes(io.load(fpath))
        p = fit_projector(fs, args.dh, args.algo, centered=args.centered, batch_size=args.batch,
                          epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                          complete_basis=args.complete_basis)
        fitted.append((fs.weight_name or Path(fpath).name.split(".")[0], fs, p))
    with io.output_lock(out):
        for name, fs, p in fitted:
            err = reconstruction_error(p, fs)
            paths.append(io.save(out / f"{name}.projector.ipa", io.projector_to_bytes(p)))
            rows.append(f"{name},{p.algorithm},{p.d_h},{p.seen},{_fmt(err)}")
        summary = out / "summary.csv"
        io.atomic_write(summary, "weight,algorithm,d_h,seen,reconstruction_error\n"
                        + "\n".join(rows) + "\n")
        flags = {k: v for k, v in vars(args).items() if k not in ("func", "features", "out")}
        io.write_manifest(out / "manifest.json", flags, {"projector": args.seed},
                          paths + [summary])
    print(summary.read_text(), end="")


def _load_projectors(directory):
    projs = {}
    for path in sorted(Path(directory).glob("*.projector.ipa")):
        p = io.projector_from_bytes(io.load(path))
        projs[p.weight_name or path.name.split(".projector")[0]] = p
    if not projs:
        raise BindingError(f"no projector containers found in {directory}")
    return projs


def cmd_adapt(args):
    cfg = _resolved(args)
    model = io.model_from_bytes(io.load(args.model))
    task = config.task_spec(cfg)
    variant = args.variant or cfg["adapter"]["variant"]
    adapter, _ = settings_from_config(cfg, variant)
    if args.rank is not None:
        adapter = replace(adapter, rank=args.rank)
    if args.seed is not None:
        adapter = replace(adapter, seed=args.seed)
    proj_ft = {"on": True, "off": False, None: adapter.proj_ft}[args.proj_ft]
    projectors = None
    if variant == "ipa":
        if not args.projectors:
            raise BindingError("--variant ipa needs --projectors")
        projectors = _load_projectors(args.projectors)
        ranks = {p.d_h for p in projectors.values()}
        if len(ranks) != 1:
            raise BindingError(f"projectors disagree on d_h: {sorted(ranks)}")
        if args.rank is None:
            adapter = replace(adapter, rank=ranks.pop())
    overrides = {k: v for k, v in (("steps", args.steps), ("base_lr", args.lr),
                                   ("batch_size", args.batch), ("seed", args.seed))
                 if v is not None}
    tc = config.train_config(cfg, variant, **overrides)
    ad = attach_adapters(model, variant, adapter.rank, adapter.alpha, projectors, proj_ft,
                         adapter.seed)
    ad.seeds = {"adapter": adapter.seed, "train": tc.seed, "task": task.seed}
    out_ad, log = train(ad, task, tc)
    acc = evaluate(out_ad, task)
    out = Path(args.out)
    with io.output_lock(out):
        paths = [io.save(out / "adapter.ipa", io.adapters_to_bytes(out_ad)),
                 io.save(out / "adam_state.ipa",
                         io.adam_state_to_bytes(out_ad.adam_state, model.model_hash)),
                 io.atomic_write(out / "metrics.csv", log.to_csv())]
        if variant == "ipa":
            for name, a in out_ad.adapters.items():
                paths.append(io.save(out / "projectors" / f"{name}.projector.ipa",
                                     io.projector_to_bytes(a.proj)))
        resolved = {**cfg, "adapter": {**cfg["adapter"], "variant": variant,
                                       "rank": adapter.rank, "proj_ft": proj_ft},
                    "train": tc.to_dict()}
        io.write_manifest(out / "manifest.json", resolved, ad.seeds, paths,
                          {"model_hash": model.model_hash, "eval_acc": acc,
                           "final_loss": log.losses[-1]})
    print(f"eval_acc {acc:.4f}  final_loss {log.losses[-1]:.4f}")


def cmd_merge(args):
    model = io.model_from_bytes(io.load(args.model))
    adapted = io.bind_adapters(model, io.load(args.adapter))
    merged = model.with_weights({name: merge(ad, model.linears[name])
                                 for name, ad in adapted.adapters.items()})
    out = Path(args.out)
    with io.output_lock(out.parent):
        io.save(out, io.model_to_bytes(merged, seeds=model.seeds))
        io.write_manifest(_manifest_for_file(out), {"model": str(args.model),
                                                    "adapter": str(args.adapter)},
                          {**model.seeds, **adapted.seeds}, [out],
                          {"source_hash": model.model_hash, "model_hash": merged.model_hash})
    print(merged.model_hash)


def cmd_analyze(args):
    cfg = _resolved(args)
    model = _analysis_model(args, cfg)
    out = Path(args.out)
    seeds = cfg["analysis"]["seeds"]
    variant = args.variant or cfg["adapter"]["variant"]
    adapter, projector = settings_from_config(cfg, variant)
    task = config.task_spec(cfg)
    with io.output_lock(out):
        if args.what == "similarity":
            paths = _analyze_similarity(cfg, model, task, adapter, projector, out)
        elif args.what == "sweep":
            paths = _analyze_sweep(cfg, model, task, adapter, projector, seeds, out)
        else:
            paths = _analyze_fixed(cfg, model, task, projector, seeds, out)
        io.write_manifest(out / "manifest.json", cfg, {"seeds": seeds}, paths,
                          {"model_hash": model.model_hash})
    print((out / "summary.txt").read_text(), end="")


def _analyze_similarity(cfg, model, task, adapter, projector, out):
    if cfg.get("tasks"):
        tasks = [config.task_spec(cfg, j) for j in range(len(cfg["tasks"]))]
    else:
        tasks = analysis.task_family(task, cfg["analysis"]["n_tasks"])
    tc = config.train_config(cfg, adapter.variant)
    ft = None
    if cfg["analysis"]["full_ft"]:
        ft = replace(tc, base_lr=cfg["analysis"]["full_ft_lr"])
    rep = analysis.asymmetry_study(model, tasks, adapter, projector, tc, ft)
    ids = rep.task_ids
    files = {
        "task_init_a.csv": "task,cos\n" + "".join(f"{t},{_fmt(c)}\n"
                                                  for t, c in zip(ids, rep.task_init_a)),
        "task_task_a.csv": analysis.matrix_csv(rep.task_task_a, ids),
        "task_task_b.csv": analysis.matrix_csv(rep.task_task_b, ids),
        "summary.txt": rep.summary(),
    }
    if rep.task_task_w is not None:
        files["task_task_w.csv"] = analysis.matrix_csv(rep.task_task_w, ids)
    return [io.atomic_write(out / name, text) for name, text in files.items()]


def _analyze_sweep(cfg, model, task, adapter, projector, seeds, out):
    a = cfg["analysis"]
    rep = analysis.run_sweep(a["axis"], a["settings"], model, task, adapter, projector,
                             config.train_config(cfg, adapter.variant), seeds)
    return [io.atomic_write(out / "sweep.csv", rep.to_csv()),
            io.atomic_write(out / "summary.txt", rep.summary())]


def _analyze_fixed(cfg, model, task, projector, seeds, out):
    ads = {v: settings_from_config(cfg, v)[0] for v in ("lora", "ipa")}
    tcs = {v: config.train_config(cfg, v) for v in ("lora", "ipa")}
    rep = analysis.compare_fixed_projector(model, task, seeds, cfg["adapter"]["rank"], ads,
                                           projector, tcs, cfg["analysis"]["control_rank"],
                                           cell_lr=cfg["analysis"].get("cell_lr"))
    return [io.atomic_write(out / "fixed_proj.csv", rep.to_csv()),
            io.atomic_write(out / "summary.txt", rep.summary())]


# -- parser -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="ipakit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-host", help="pretrain the tiny transformer host")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_host)

    s = sub.add_parser("collect", help="capture target-layer input features")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--fraction", type=float, default=ProjectorSettings.fraction)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_collect)

    s = sub.add_parser("pretrain-projector", help="fit projectors on feature containers")
    s.add_argument("--features", nargs="+", required=True)
    s.add_argument("--algo", choices=("exact", "ipca", "gha", "random"), default="ipca")
    s.add_argument("--dh", type=int, required=True)
    s.add_argument("--batch", type=int, default=ProjectorSettings.batch_size)
    s.add_argument("--centered", action="store_true")
    s.add_argument("--epochs", type=int, default=ProjectorSettings.epochs)
    s.add_argument("--lr", type=float, default=ProjectorSettings.lr)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--complete-basis", action="store_true",
                   help="pad rank-deficient IPCA results with an orthonormal complement")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_projector)

    s = sub.add_parser("adapt", help="train adapters on a task")
    s.add_argument("--model", required=True)
    s.add_argument("--config")
    s.add_argument("--variant", choices=("lora", "dora", "ipa"))
    s.add_argument("--rank", type=int)
    s.add_argument("--projectors")
    s.add_argument("--proj-ft", choices=("on", "off"))
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("merge", help="fold adapters into the host weights")
    s.add_argument("--model", required=True)
    s.add_argument("--adapter", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("analyze", help="similarity matrices, sweeps, fixed-projector study")
    s.add_argument("what", choices=("similarity", "sweep", "fixed-proj"))
    s.add_argument("--config")
    s.add_argument("--model")
    s.add_argument("--variant", choices=("lora", "dora", "ipa"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (IpaError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
