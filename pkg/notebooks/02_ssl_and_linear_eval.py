# %% [markdown]
# # Self-supervised pretraining and linear evaluation
#
# Short SimCLR runs for the channel-independent encoder and the early-fusion
# baseline, followed by a linear probe on frozen embeddings. The numbers here
# use a reduced budget; the acceptance suite runs the full 500 iterations.

# %%
import numpy as np
from threadpoolctl import threadpool_limits

from cimlite.data import default_config, make_dataset
from cimlite.evaluation import compare_reports, linear_eval
from cimlite.model import CimConfig, build_cim, build_earlyfusion_baseline
from cimlite.ssl import SslRunConfig, pretrain

threadpool_limits(1)
bundle = make_dataset(default_config(n_cells=2000))
run = SslRunConfig(iterations=100, batch_size=64, seed=0)

# %%
reports = []
for name, model in (("cim", build_cim(CimConfig.cim_s(8))), ("earlyfusion", build_earlyfusion_baseline(8))):
    trained, losses = pretrain(bundle, model, run)
    print(f"{name}: loss {np.mean(losses[:10]):.3f} -> {np.mean(losses[-10:]):.3f}")
    report, _, _ = linear_eval(bundle, trained, name=name)
    print(report.table())
    reports.append(report)

# %%
compare_reports(reports)["balanced_accuracy"]

# %% [markdown]
# VICReg is a drop-in alternative objective. It uses a lower default
# learning rate than SimCLR.

# %%
trained, losses = pretrain(bundle, build_cim(CimConfig.cim_s(8)), SslRunConfig(objective="vicreg", iterations=50, seed=0))
print(f"vicreg loss {losses[0]:.2f} -> {losses[-1]:.2f}")
