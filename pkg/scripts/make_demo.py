"""Regenerate the bundled demo panel, parameter file and config."""
import json
from pathlib import Path

import numpy as np

from tpmixqr import MixtureParams, PanelDataset, QuantileConfig, UnitRecord, simulate

OUT = Path(__file__).resolve().parents[1] / "src" / "tpmixqr" / "demo"
N, T = 120, 4

rng = np.random.default_rng(20240611)
units = []
for i in range(N):
    age = np.full(T, rng.uniform(20, 70)) + np.arange(T)
    female = np.full(T, float(rng.random() < 0.5))
    income = rng.lognormal(3.0, 0.4, T)
    cov = np.column_stack([age, female, income])
    units.append(UnitRecord(f"u{i:03d}", np.arange(1, T + 1), np.ones(T), cov, cov))
names = ["age", "female", "income"]
template = PanelDataset(units, names, names)

payload = {"tau": 0.5, "gamma": [0.4, -0.3, 0.0], "beta": [0.3, 0.2, -0.25], "sigma": 0.25,
        "b0": [-1.5, 0.0], "b1": [0.5, 3.0], "pi": [0.4, 0.6],
        "binary_covariates": names, "positive_covariates": names, "standardized": True}
params = MixtureParams.from_dict(payload)
sim = simulate(params, template, QuantileConfig(payload["tau"]), seed=7)
sim.to_frame().to_csv(OUT / "demo_panel.csv", index=False, float_format="%.6f")
with open(OUT / "demo_params.json", "w") as fh:
    json.dump(payload, fh, indent=2)
    fh.write("\n")
(OUT / "demo_config.toml").write_text('''data_path = "demo_panel.csv"
output_dir = "tpmixqr_demo_out"
seed = 1
taus = [0.25, 0.5, 0.75]
G_range = [1, 2, 3]

[columns]
unit = "unit_id"
time = "time"
y = "y"
binary = ["age", "female", "income"]
positive = ["age", "female", "income"]

[penalty]
mode = "off"

[bootstrap]
n_replicates = 50

[fit]
n_starts = 5
''')
