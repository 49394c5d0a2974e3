"""Drive a small sweep from an INI config, the same way the CLI does.

    noisylab sweep-main --config configs/smoke.ini --out runs/smoke
"""
from pathlib import Path

from noisylab.experiments import ExperimentConfig, aggregate, run_main_sweep, write_runs_csv, write_summary_csv
from noisylab.plots import accuracy_vs_eta

cfg = ExperimentConfig.load(Path(__file__).resolve().parent.parent / "configs" / "smoke.ini")
out = Path(cfg.out_dir)
records = run_main_sweep(cfg)
out.mkdir(parents=True, exist_ok=True)
write_runs_csv(records, out / "runs.csv")
rows = aggregate(records)
write_summary_csv(rows, out / "summary.csv")
accuracy_vs_eta(rows, out / "accuracy_vs_eta.svg")
for r in rows:
    print(f"{r['method']:8s} eta {r['eta']:.1f}: accuracy {r['accuracy_mean']:.1f} +/- {r['accuracy_se']:.1f}, F1 {r['f1_mean']:.3f}")
