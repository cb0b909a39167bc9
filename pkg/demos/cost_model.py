"""
Analytic parameter and MAC counting
===================================

The cost model walks the architecture without running it, so budgets for
any variant, resolution, or attention flavor come back instantly.
"""

import dataclasses

from mvt2.model import VARIANTS, count

# deploy-form budgets for the three variants at 224
print(f"{'variant':8} {'params':>12} {'MACs':>14}")
for name, config in VARIANTS.items():
    report = count(config, mode="deploy")
    print(f"{name:8} {report.total_params:12,} {report.total_macs:14,}")

# train form carries the extra branches and batch norms
for mode in ("train", "deploy"):
    report = count(VARIANTS["s1"], mode=mode)
    print(f"s1 {mode:6} params {report.total_params:,}")

# MACs scale with resolution, parameters do not
for res in (224, 112):
    config = dataclasses.replace(VARIANTS["s1"], input_resolution=res)
    report = count(config, mode="deploy")
    print(f"s1 @ {res}: params {report.total_params:,}  MACs {report.total_macs:,}")

# where does the s1 budget go?
report = count(VARIANTS["s1"], mode="deploy")
for prefix in ("stem", "stage1", "stage2", "stage3", "head"):
    params, macs = report.subtotal(prefix)
    share = macs / report.total_macs
    print(f"{prefix:8} {params:10,} params {macs:12,} MACs ({share:5.1%})")

# swapping the attention flavor in stage 3 raises the bill
sdta = count(VARIANTS["s2"], mode="train")
mdta = count(dataclasses.replace(VARIANTS["s2"], attention="mdta"), mode="train")
print(f"s2 stage-3 attention swap: {sdta.total_macs:,} -> {mdta.total_macs:,} MACs")
