"""
A short training run end to end
===============================

Generate a small synthetic dataset, train the localization U-Net on
harvested pseudo labels for a handful of epochs, then infer and evaluate on
the test split. The desk-scale run uses the same calls with the default
config (650 images, 30 epochs).
"""
import tempfile
from pathlib import Path

import numpy as np

from dips.config import RunConfig
from dips.data import ManifestDataset, SyntheticDatasetSpec, generate_synthetic_dataset
from dips.pipeline import run_experiment
from dips.plotting import plot_maps

OUT = Path(__file__).with_suffix(".png")

work = Path(tempfile.mkdtemp(prefix="dips_nb_"))
data = work / "data"
generate_synthetic_dataset(SyntheticDatasetSpec(num_images=200, seed=3), data)

###############################################################################
# Eight epochs with the learning rate decayed after the sixth.
cfg = RunConfig().updated({"data.root": str(data), "optim.epochs": 8, "optim.decay_epoch": 6,
                           "train.val_every": 4})
result = run_experiment(cfg, work / "run")
for k in ("pxap", "new_maxboxacc", "top1_loc"):
    print(f"{k}: {result[k]:.3f}")

###############################################################################
# Predicted foreground maps for the first test images, with their boxes.
test = ManifestDataset(data, "test")
samples = [test[i] for i in range(6)]
maps = [np.load(work / "run" / "predictions" / f"{s.image_id}.npy") for s in samples]
plot_maps([s.image for s in samples], maps, OUT, boxes=[s.boxes for s in samples])
print("wrote", OUT, "and", work / "run" / "eval" / "sweep_maxboxacc.png")
