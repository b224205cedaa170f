"""``tissue-vocab``: run the pipeline stage by stage from one config file.

Stages and their outputs (under ``out_dir``)::

    synth        cohort volumes + manifest (at the configured manifest path)
    sample       patches/<unit>.vvol
    pretrain     models/<unit>.pre.dcnw, pretrain_history.csv
    train        models/<unit>.dcnw, models/<unit>.dcnc, train_history.csv
    encode       maps/<subject>_<visit>_<unit>.csv, signatures.csv
    predict      grades.csv, grade_predictions.csv
    respond      response.csv, response_predictions.csv, response_density.csv
    transitions  transforms.json, transitions.csv
    phenotypes   phenotypes.csv, associations.csv
    gradcheck    gradcheck.csv
    report       report.md

Every stage also writes ``stages/<stage>.json`` with the config hash, seed,
library versions and the list of files it produced.

Exit codes: 0 success, 1 user error (bad config, missing input, corrupt file), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, dcn, gradcheck, nn, pipeline, synth
from .config import THREADS_ENV, RunConfig, dump_config, load_config, parse_overrides
from .errors import ConfigInvalid, MissingArtifact, TissueVocabError
from .evaluation import predicted_density
from .patches import load_patchset, save_patchset
from .registration import RigidTransform
from .signatures import read_signatures, write_cluster_map, write_signatures
from .volume_store import load_manifest, write_table

log = logging.getLogger("tissuevocab")

STAGES = ("synth", "sample", "pretrain", "train", "encode", "predict", "respond",
          "transitions", "phenotypes", "gradcheck", "report")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors are user errors (exit 1)
        self.print_usage(sys.stderr)
        raise UserError(message)


# -- run records ------------------------------------------------------------

class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.hash = cfg.hash()

    def file(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def record(self, stage: str, outputs: Sequence[Path]) -> None:
        import scipy

        doc = {
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "versions": {"tissuevocab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "outputs": sorted(os.path.relpath(p, self.out) for p in outputs),
        }
        path = self.file("stages", f"{stage}.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        (self.out / "config.toml").write_text(dump_config(self.cfg))

    def stage_record(self, stage: str) -> dict | None:
        path = self.file("stages", f"{stage}.json")
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"missing {path} (output of stage '{stage}'); run `tissue-vocab {stage}` first")
        rec = self.stage_record(stage)
        if rec is not None and rec["config_hash"] != self.hash:
            log.warning("%s was produced by config %s, current config is %s", path, rec["config_hash"], self.hash)
        return path

    def subjects(self):
        manifest = Path(self.cfg.manifest)
        if not manifest.exists():
            raise MissingArtifact(f"missing cohort manifest {manifest}; run `tissue-vocab synth` or fix `manifest`")
        return load_manifest(manifest)


# -- stages -----------------------------------------------------------------

def stage_synth(run: Run) -> list[Path]:
    cfg = run.cfg
    spec = synth.default_spec(cfg.synth_per_arm, tuple(cfg.synth_dims), cfg.seed, cfg.synth_regions)
    names = [s.name for s in spec.sequences]
    if sorted(names) != sorted(cfg.sequences):
        raise ConfigInvalid(f"synthetic cohort provides sequences {names}, config asks for {list(cfg.sequences)}")
    manifest = synth.write_cohort(spec, Path(cfg.manifest).parent)
    if manifest != Path(cfg.manifest):
        manifest.replace(cfg.manifest)
    return [Path(cfg.manifest)]


def stage_sample(run: Run) -> list[Path]:
    subjects = run.subjects()
    outs = []
    for unit in pipeline.units(run.cfg):
        ps = pipeline.sample_unit(subjects, unit, run.cfg)
        path = run.file("patches", f"{unit.name}.vvol")
        save_patchset(ps, path)
        outs += [path, Path(str(path) + ".json")]
        log.info("sampled %d patches for %s", len(ps), unit.name)
    return outs


def _history_rows(unit: str, history: list[dict]) -> list[dict]:
    return [{"unit": unit, **h} for h in history]


HISTORY_COLUMNS = ["unit", "epoch", "train_loss", "heldout_recon", "heldout_cluster", "heldout_total"]


def stage_pretrain(run: Run) -> list[Path]:
    outs, rows = [], []
    for unit in pipeline.units(run.cfg):
        ps = load_patchset(run.require(run.file("patches", f"{unit.name}.vvol"), "sample"))
        res = pipeline.pretrain_unit(ps, unit, run.cfg)
        path = run.file("models", f"{unit.name}.pre.dcnw")
        nn.save_model(res.model, path)
        outs.append(path)
        rows += _history_rows(unit.name, res.history)
    hist = run.file("pretrain_history.csv")
    write_table(rows, hist, HISTORY_COLUMNS)
    return outs + [hist]


def stage_train(run: Run) -> list[Path]:
    outs, rows = [], []
    for unit in pipeline.units(run.cfg):
        ps = load_patchset(run.require(run.file("patches", f"{unit.name}.vvol"), "sample"))
        model = nn.load_model(run.require(run.file("models", f"{unit.name}.pre.dcnw"), "pretrain"))
        res = pipeline.train_unit(model, ps, unit, run.cfg)
        mpath, cpath = run.file("models", f"{unit.name}.dcnw"), run.file("models", f"{unit.name}.dcnc")
        nn.save_model(res.model, mpath)
        dcn.save_codebook(res.codebook, cpath)
        outs += [mpath, cpath]
        rows += _history_rows(unit.name, res.history)
    hist = run.file("train_history.csv")
    write_table(rows, hist, HISTORY_COLUMNS)
    return outs + [hist]


def _load_models(run: Run):
    models = {}
    for unit in pipeline.units(run.cfg):
        m = nn.load_model(run.require(run.file("models", f"{unit.name}.dcnw"), "train"))
        c = dcn.load_codebook(run.require(run.file("models", f"{unit.name}.dcnc"), "train"))
        models[unit.name] = (m, c)
    return models


def stage_encode(run: Run) -> list[Path]:
    subjects = run.subjects()
    maps = pipeline.encode_cohort(subjects, _load_models(run), run.cfg)
    outs = []
    for (sid, vid, uname), cmap in sorted(maps.items()):
        path = run.file("maps", f"{sid}_{vid}_{uname}.csv")
        write_cluster_map(cmap, path)
        outs.append(path)
    sigs = pipeline.visit_signatures(maps, run.cfg)
    path = run.file("signatures.csv")
    write_signatures([(s, v, sig) for (s, v), sig in sorted(sigs.items())], path)
    return outs + [path]


def _signatures(run: Run):
    rows = read_signatures(run.require(run.file("signatures.csv"), "encode"))
    return {(s, v): sig for s, v, sig in rows}


def stage_predict(run: Run) -> list[Path]:
    metrics, preds = pipeline.grade_prediction(_signatures(run), run.subjects(), run.cfg)
    a, b = run.file("grades.csv"), run.file("grade_predictions.csv")
    write_table(metrics, a, ["grade", "n", "n_high", "Acc", "PPV", "NPV", "Sens", "Spec"])
    write_table(preds, b, ["grade", "subject", "fold", "high", "p_high", "predicted"])
    return [a, b]


def stage_respond(run: Run) -> list[Path]:
    res = pipeline.response(_signatures(run), run.subjects(), run.cfg)
    pairs = [{"group_a": a, "group_b": b, **t.as_row()} for a, b, t in res.pairs]
    preds = [{"subject": s, "arm": arm, "dose": float(d), "fold": int(f), "predicted": float(p)}
             for s, arm, d, f, p in zip(res.subjects, res.arms, res.doses, res.folds, res.predicted)]
    lo, hi = float(np.min(res.predicted)), float(np.max(res.predicted))
    pad = 0.1 * (hi - lo) + 1e-9
    grid = np.linspace(lo - pad, hi + pad, 101)
    density = []
    for arm in sorted(set(res.arms), key=lambda a: (res.doses[res.arms.index(a)], a)):
        vals = res.predicted[np.asarray(res.arms) == arm]
        for x, dv in zip(grid, predicted_density(vals, grid)):
            density.append({"arm": arm, "x": float(x), "density": float(dv)})
    a, b, c = run.file("response.csv"), run.file("response_predictions.csv"), run.file("response_density.csv")
    write_table(pairs, a, ["group_a", "group_b", "statistic", "p", "p_corr", "n_a", "n_b", "method"])
    write_table(preds, b, ["subject", "arm", "dose", "fold", "predicted"])
    write_table(density, c, ["arm", "x", "density"])
    return [a, b, c]


def stage_transitions(run: Run) -> list[Path]:
    from .signatures import read_cluster_map

    cfg = run.cfg
    subjects = run.subjects()
    transforms: dict[str, RigidTransform] = {}
    if cfg.register:
        for s in subjects:
            if pipeline.BASELINE in s.visits and pipeline.FOLLOWUP in s.visits:
                transforms[s.subject_id] = pipeline.register_visits(s, cfg)
    models = {u.name: u for u in pipeline.units(cfg)}
    maps = {}
    for s in subjects:
        for vid in (pipeline.BASELINE, pipeline.FOLLOWUP):
            if vid not in s.visits:
                continue
            for uname, unit in models.items():
                path = run.require(run.file("maps", f"{s.subject_id}_{vid}_{uname}.csv"), "encode")
                maps[(s.subject_id, vid, uname)] = read_cluster_map(path, unit.K, uname, cfg.stride)
    per_unit = pipeline.subject_transitions(maps, subjects, cfg, transforms if cfg.register else None)
    rows = pipeline.transition_rows(per_unit, subjects, cfg)
    tpath, cpath = run.file("transforms.json"), run.file("transitions.csv")
    tpath.parent.mkdir(parents=True, exist_ok=True)
    tpath.write_text(json.dumps({k: v.as_dict() for k, v in sorted(transforms.items())}, indent=1,
                                sort_keys=True) + "\n")
    write_table(rows, cpath, ["seq", "group_a", "group_b", "i", "j", "prob_a", "prob_b", "pooled_a", "pooled_b",
                              "incidence_a", "incidence_b", "p", "p_corr"])
    return [tpath, cpath]


def stage_phenotypes(run: Run) -> list[Path]:
    assignment, assoc = pipeline.phenotypes(_signatures(run), run.subjects(), run.cfg)
    a, b = run.file("phenotypes.csv"), run.file("associations.csv")
    write_table([{"subject": s, "phenotype": int(p)} for s, p in zip(assignment.subjects, assignment.labels)],
                a, ["subject", "phenotype"])
    write_table(assoc, b, ["phenotype", "grade", "level", "a", "b", "c", "d", "odds_ratio", "p", "flag"])
    return [a, b]


def stage_gradcheck(run: Run) -> list[Path]:
    rows = gradcheck.run_all(run.cfg.seed)
    path = run.file("gradcheck.csv")
    write_table(rows, path, ["layer", "kind", "max_rel_err"])
    worst = max(r["max_rel_err"] for r in rows)
    log.info("worst relative gradient error %.3g", worst)
    return [path]


def stage_report(run: Run) -> list[Path]:
    records = {s: run.stage_record(s) for s in STAGES if s != "report"}
    present = {s: r for s, r in records.items() if r is not None}
    if not present:
        raise MissingArtifact(f"no stage records under {run.file('stages')}; run the pipeline first")
    hashes = {r["config_hash"] for r in present.values()}
    if len(hashes) > 1 or run.hash not in hashes:
        detail = ", ".join(f"{s}={r['config_hash']}" for s, r in sorted(present.items()))
        raise ConfigInvalid(f"stage outputs come from different configs ({detail}; current {run.hash}); "
                            "rerun the stale stages")
    lines = [f"# Run report", "", f"config hash: `{run.hash}`", f"seed: {run.cfg.seed}", ""]
    lines += ["| stage | outputs |", "|---|---|"]
    for s in STAGES[:-1]:
        r = present.get(s)
        lines.append(f"| {s} | {len(r['outputs']) if r else 'not run'} |")
    for name, title in (("grades.csv", "Grade prediction"), ("response.csv", "Treatment response"),
                        ("gradcheck.csv", "Gradient check")):
        p = run.file(name)
        if p.exists():
            lines += ["", f"## {title}", "", "```", p.read_text().replace("\r\n", "\n").rstrip(), "```"]
    path = run.file("report.md")
    path.write_text("\n".join(lines) + "\n")
    return [path]


HANDLERS: dict[str, Callable[[Run], list[Path]]] = {
    "synth": stage_synth, "sample": stage_sample, "pretrain": stage_pretrain, "train": stage_train,
    "encode": stage_encode, "predict": stage_predict, "respond": stage_respond,
    "transitions": stage_transitions, "phenotypes": stage_phenotypes, "gradcheck": stage_gradcheck,
    "report": stage_report,
}

HELP = {
    "synth": "generate the synthetic cohort", "sample": "draw training patches",
    "pretrain": "pretrain the autoencoders", "train": "joint autoencoder + k-means training",
    "encode": "cluster maps and signatures", "predict": "cross-validated grade prediction",
    "respond": "treatment-response regression and pairwise tests",
    "transitions": "baseline to follow-up transition matrices and tests",
    "phenotypes": "signature phenotypes and grade associations", "gradcheck": "finite-difference gradient check",
    "report": "summarise a run (refuses mixed configs)",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="flat TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--threads", type=int, help=f"thread cap (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="tissue-vocab", description="Tissue vocabularies from multi-sequence volumes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def _thread_limit(n: int):
    return threadpool_limits(limits=n)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = parse_overrides(args.overrides)
        if args.threads is not None:
            overrides["threads"] = args.threads
        cfg = load_config(args.config, overrides)
        run = Run(cfg)
        with _thread_limit(cfg.threads):
            outputs = HANDLERS[args.command](run)
        run.record(args.command, outputs)
        print(f"{args.command}: wrote {len(outputs)} file(s) under {run.out} [config {run.hash}]")
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UserError, TissueVocabError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
