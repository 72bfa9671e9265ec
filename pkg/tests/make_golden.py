"""Regenerate the golden envelope profile (fixed seed, 1e6 samples).

Run from the repository root after an intentional change to the density
pipeline, then commit the refreshed file:

    python3 tests/make_golden.py
"""
import json
from pathlib import Path

import numpy as np

from expfbm import density as dn
from expfbm import functional as fn
from expfbm import kernel as kn
from expfbm.functional import ModelParams
from expfbm.kernel import HurstParams

SEED = 20240901


def main():
    params = ModelParams(a=0.0, sigma=1.0, hurst=HurstParams(0.7, 1.0))
    table = kn.build_kernel_table(0.7, 1.0, 256)
    centering = fn.estimate_mean_lnF(params, table, 100_000, seed=SEED)
    batch = dn.sample_X_batch(params, table, 1_000_000, SEED, centering)
    dens = dn.kde_log_domain(batch.X, seed=SEED)
    reports = dn.verify_envelopes(dens, params, centering,
                                  sample_mean_F=float(batch.F.mean()),
                                  sample_var_F=float(batch.F.var(ddof=1)))
    by_id = {r.bound_id: r for r in reports}
    profile = {}
    for side in ("left_envelope", "right_envelope"):
        r = by_id[side]
        res = ~r.inconclusive
        profile[side] = {"points": np.asarray(r.points)[res].tolist(),
                         "implied_c": np.asarray(r.implied_constant)[res].tolist()}
    profile["meta"] = {"seed": SEED, "n_samples": 1_000_000, "grid_n": 256,
                       "hurst_H": 0.7, "horizon_T": 1.0, "drift_a": 0.0,
                       "sigma_vol": 1.0,
                       "centering_mean_lnF": centering.value}
    out = Path(__file__).parent / "golden" / "envelope_profile.json"
    out.parent.mkdir(exist_ok=True)
    out.write_text(json.dumps(profile, indent=1) + "\n")
    print(f"wrote {out} ({len(profile['left_envelope']['points'])} left, "
          f"{len(profile['right_envelope']['points'])} right points)")


if __name__ == "__main__":
    main()
