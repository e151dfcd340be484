"""End-to-end pipeline at demonstration scale: synth, calibrate, train,
estimate, compare.

Uses a small geometry (l=16, p=64) so the whole run finishes in a couple of
minutes; the acceptance suite runs the full-scale version.  Outputs land in
./demo_out: the cube, ground truth, schedule, weights, per-method estimates,
traces, report CSV, and heat maps.
"""

from covdiff.config import load_config
from covdiff.evalreport import read_report_csv
from covdiff.pipeline import (
    cmd_calibrate,
    cmd_compare,
    cmd_estimate,
    cmd_synth,
    cmd_train,
)

cfg = load_config(
    overrides=[
        "out_dir=demo_out",
        "data.l=16",
        "data.rows=32",
        "data.cols=16",
        "sensing.m=6",
        "sensing.p=64",
        "diffusion.calibration_instances=12",
        "denoiser.records=1200",
        "denoiser.steps=500",
        "solver.max_iters=150",
        "eval.seeds=3",
    ]
)

print("1/5 synthesizing the cube ...")
out = cmd_synth(cfg)
print("   ", out["cube"])

print("2/5 calibrating the noise schedule ...")
out = cmd_calibrate(cfg)
stats = out["stats"]
print("    levels:", list(stats.partitions))
print("    stds  :", [f"{s:.2f}" for s in stats.stds])

print("3/5 training the gradient denoiser (takes a minute) ...")
out = cmd_train(cfg)
print(f"    validation loss {out['val_loss']:.3f} vs zero-predictor "
      f"{out['zero_loss']:.3f}")

print("4/5 single estimation run with the raw gradient ...")
out = cmd_estimate(cfg, method="identity")
print("   ", out["estimate"])

print("5/5 paired three-way comparison ...")
out = cmd_compare(cfg)
report = read_report_csv(out["files"]["report"])
for method in report.methods():
    mses = report.metric(method, "mse")
    print(f"    {method:9s}: per-seed mse {[f'{v:.4f}' for v in mses]}")
for num in ("diffusion", "gaussian"):
    print(f"    median mse ratio {num}/identity = "
          f"{report.median_mse_ratio(num, 'identity'):.3f}")
