"""
From random initialization to a fused deployment file
=====================================================

Build the smallest variant, check that fusing every block preserves the
network function, and compare the train-form and deploy-form weight files.
"""

import os
import tempfile

import numpy as np

from mvt2 import weights
from mvt2.model import VARIANTS, build, count, deploy, forward

model = build(VARIANTS["s1"], seed=0)
print("built s1, train form,", count(model).total_params, "parameters")

fused = deploy(model)
print("deploy form,", count(fused).total_params, "parameters")

# the two forms compute the same function up to float32 rounding
rng = np.random.default_rng(1)
x = rng.standard_normal((2, 3, 224, 224)).astype(np.float32)
diff = float(np.max(np.abs(forward(model, x) - forward(fused, x))))
print("max output difference on random 224x224 input:", diff)

# serialize both and compare on disk
with tempfile.TemporaryDirectory() as tmp:
    train_path = os.path.join(tmp, "s1_train.mvt2")
    deploy_path = os.path.join(tmp, "s1_deploy.mvt2")
    weights.save(model, train_path)
    weights.save(fused, deploy_path)
    print("train file:", os.path.getsize(train_path), "bytes")
    print("deploy file:", os.path.getsize(deploy_path), "bytes")

    # loading reproduces the model bit for bit
    loaded = weights.load(deploy_path)
    same = forward(loaded, x).tobytes() == forward(fused, x).tobytes()
    print("reloaded model output bit-identical:", same)

    header = weights.read_header(deploy_path)
    print("header mode:", header["mode"])
    print("preprocessing recipe:", header["preprocessing"])
