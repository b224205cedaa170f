"""Planted-texture recovery: how well does the joint model find known classes?"""
from __future__ import annotations

import argparse
import logging
import time

from tissuevocab import dcn, nn, synth
from tissuevocab.evaluation import adjusted_rand_index

log = logging.getLogger("dcn_recovery")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--pretrain-epochs", type=int, default=6)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--lam", type=float, nargs="+", default=[0.0, 0.5, 2.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    textures = synth.default_spec().sequences[0].classes
    cfg = dcn.TrainConfig(batch_size=16, lr=1e-3)
    print("seed,lam,ari_pretrain_kmeans,ari_joint,seconds")
    for seed in args.seeds:
        X, y = synth.planted_texture_patches(args.n, textures, s=args.size, seed=seed)
        t0 = time.perf_counter()
        pre = dcn.pretrain(nn.ConvAutoencoder(nn.Architecture(1, args.size), seed=seed), X,
                           args.pretrain_epochs, seed, cfg)
        base = dcn.kmeans(nn.encode(pre.model, X), len(textures), seed=seed, n_init=cfg.kmeans_restarts)
        ari0 = adjusted_rand_index(y, base[1])
        for lam in args.lam:
            res = dcn.train_dcn(pre.model, X, len(textures), lam, args.epochs, seed, cfg)
            ari = adjusted_rand_index(y, dcn.predict_clusters(res.model, res.codebook, X))
            print(f"{seed},{lam},{ari0:.4f},{ari:.4f},{time.perf_counter() - t0:.1f}", flush=True)


if __name__ == "__main__":
    main()
