"""Calibration sweep: likelihood learning rate vs toy graph recovery."""
import time
import warnings

import numpy as np

import mcd.datagen as dg
import mcd.metrics as mt
import mcd.mixture as mx

GRID = [
    # (batch, growth, matrix_lr, like_lr, init_p, outers, inners)
    (128, 3.0, 1e-2, 1e-3, 0.3, 25, 1000),
    (128, 3.0, 1e-2, 3e-3, 0.3, 25, 1000),
    (128, 10.0, 1e-2, 1e-3, 0.3, 18, 1500),
    (128, 3.0, 1e-2, 1e-3, 0.1, 25, 1000),
]
for combo in GRID:
    batch, growth, mlr, llr, ip, outers, inners = combo
    f1s, clus, times, hs = [], [], [], []
    for seed in range(4):
        rng = np.random.default_rng(100 + seed)
        ds = dg.toy_example(400, 50, rng, seed=100 + seed)
        cfg = mx.TrainConfig(
            k=2, lag=1, variant="linear", outer_steps=outers,
            inner_steps=inners, batch_size=batch, seed=seed,
            sparsity_lambda=5.0, log_interval=10**9, rho_growth=growth,
            matrix_lr=mlr, likelihood_lr=llr, init_edge_prob=ip)
        t0 = time.time()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = mx.train(ds, cfg)
        rep = mt.evaluate_run(state, ds)
        f1s.append(round(min(m["f1"] for m in rep.per_component), 2))
        clus.append(round(rep.cluster_acc, 2))
        times.append(time.time() - t0)
        hs.append(state.dag_converged)
    print(f"b={batch} g={growth} mlr={mlr} llr={llr} p0={ip} "
          f"{outers}x{inners}: minF1={f1s} clus={clus} conv={hs} "
          f"t={np.mean(times):.0f}s", flush=True)
