"""How much does adapting a keyword spotter cost on a microcontroller?

Prints parameters, inference ops, training FLOPs, peak memory and energy for the
three model sizes under each update strategy, then which memory level of the
Vega profile each one fits in.

    python demos/cost_budget.py
"""
from userkws.cost import VEGA, UpdateStrategy, cost_report, fits_on, format_reports
from userkws.model import ModelConfig

reports = []
for size in "SML":
    for policy in ("full", "classifier-only", "embedding-only"):
        reports.append(cost_report(ModelConfig(size, 10, "mul"), UpdateStrategy(policy, samples=40, batch_size=10)))

print(format_reports(reports))

# Full training of even the small model needs megabytes of activations; the
# embedding row only needs the pooled vectors of one batch.
for r in reports:
    print(f"{r.size} {r.policy:16s} {r.peak_memory_bytes / 1e3:10.1f} kB  -> {fits_on(VEGA, r)}")

full, emb = reports[0], reports[2]
print(f"\nS: embedding-only saves {full.training_flops / emb.training_flops:,.0f}x FLOPs "
      f"and {full.energy_joules / emb.energy_joules:,.0f}x energy over full training")
