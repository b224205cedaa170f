"""Grade-prediction accuracy across cluster counts and fusion modes on a synthetic cohort."""
from __future__ import annotations

import argparse
import logging
import tempfile
from dataclasses import replace

from tissuevocab import pipeline, synth
from tissuevocab.config import RunConfig
from tissuevocab.volume_store import load_manifest

log = logging.getLogger("ablation")


def signatures(subjects, cfg: RunConfig):
    models = {}
    for unit in pipeline.units(cfg):
        ps = pipeline.sample_unit(subjects, unit, cfg)
        res = pipeline.train_unit(pipeline.pretrain_unit(ps, unit, cfg).model, ps, unit, cfg)
        models[unit.name] = (res.model, res.codebook)
    return pipeline.visit_signatures(pipeline.encode_cohort(subjects, models, cfg), cfg)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--per-arm", type=int, default=16)
    ap.add_argument("--dims", type=int, nargs=3, default=[64, 64, 16])
    ap.add_argument("--clusters", type=int, nargs="+", default=[3, 5, 8])
    ap.add_argument("--fused", type=int, nargs="+", default=[20])
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = RunConfig(patch_size=16, stride=8, n_patches=3000, pretrain_epochs=args.epochs, epochs=args.epochs,
                     batch_size=16, lr=1e-3, n_trees=200, seed=args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        spec = synth.default_spec(n_per_arm=args.per_arm, dims=tuple(args.dims), n_regions=48, seed=args.seed)
        subjects = load_manifest(synth.write_cohort(spec, tmp))
        runs = [("SF", replace(base, clusters=k)) for k in args.clusters]
        runs += [("IF", replace(base, fusion="IF", clusters_fused=k)) for k in args.fused]
        print("fusion,K,grade,Acc")
        for fusion, cfg in runs:
            metrics, _ = pipeline.grade_prediction(signatures(subjects, cfg), subjects, cfg)
            K = cfg.clusters if fusion == "SF" else cfg.clusters_fused
            for m in metrics:
                print(f"{fusion},{K},{m['grade']},{m['Acc']:.3f}", flush=True)


if __name__ == "__main__":
    main()
