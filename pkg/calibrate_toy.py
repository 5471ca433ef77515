"""Calibration sweep for the toy-mixture training schedule (scratch)."""
import itertools
import time
import warnings

import numpy as np

import mcd.datagen as dg
import mcd.metrics as mt
import mcd.mixture as mx

GRID = [
    # (batch, warmup, growth, matrix_lr, init_p, temp, outers, inners)
    (320, 0, 2.0, 1e-2, 0.1, 0.25, 50, 220),
    (320, 4, 2.0, 1e-2, 0.3, 0.25, 50, 220),
    (128, 4, 2.0, 1e-2, 0.1, 0.25, 50, 250),
    (320, 0, 2.0, 1e-2, 0.3, 0.5, 50, 220),
    (320, 4, 3.0, 2e-2, 0.1, 0.25, 45, 220),
    (128, 0, 3.0, 1e-2, 0.3, 0.25, 45, 250),
]

for combo in GRID:
    batch, warm, growth, mlr, ip, temp, outers, inners = combo
    f1s, clus, times = [], [], []
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        ds = dg.toy_example(400, 50, rng, seed=100 + seed)
        cfg = mx.TrainConfig(
            k=2, lag=1, variant="linear", outer_steps=outers,
            inner_steps=inners, batch_size=batch, seed=seed,
            sparsity_lambda=5.0, log_interval=10 ** 9, rho_growth=growth,
            warmup_outers=warm, matrix_lr=mlr, init_edge_prob=ip,
            gumbel_temperature=temp)
        t0 = time.time()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = mx.train(ds, cfg)
        rep = mt.evaluate_run(state, ds)
        per = min(m["f1"] for m in rep.per_component)
        f1s.append(per)
        clus.append(rep.cluster_acc)
        times.append(time.time() - t0)
    print(f"batch={batch} warm={warm} g={growth} mlr={mlr} p0={ip} "
          f"temp={temp} {outers}x{inners}: minF1={[round(f,2) for f in f1s]} "
          f"clus={[round(c,2) for c in clus]} t={np.mean(times):.0f}s",
          flush=True)
