from pathlib import Path

from ctxmhe.config import load_config
from ctxmhe.harness import compute_metrics, prepare_models, run_episode
from ctxmhe.trajectory import Environment, make_trajectory

if __name__ == "__main__":
    # Small configuration: short horizon, one training episode per context
    config = load_config(Path.cwd() / "resources" / "quick.json")

    # Train in three contexts chosen by the acquisition and print the performance table
    models = prepare_models(config, budget=3)
    print("Selected contexts:", ", ".join(models.order))
    print(f"Aggregate loss V: {models.table.get_total_loss():.4f}")

    # Fly the hover trajectory through environment 1 with the baseline and the learned estimator
    exp = config.experiment
    env = Environment.from_layout("1", exp.layouts["1"], config.pool())
    hover = make_trajectory("hover", exp.speed, exp.rise, exp.hover_hold)

    print("\n--- Hover in environment 1 ---")
    for kind in ("base", "budget"):
        record = run_episode(env, hover, kind, models, seed=0, config=config)
        if record.aborted:
            print(f"{kind}: aborted at step {record.metadata['step']}")
            continue
        metrics = compute_metrics(record)
        print(f"{kind}: RMSE APE {metrics.rmse:.4f} m, max APE {metrics.max:.4f} m")
