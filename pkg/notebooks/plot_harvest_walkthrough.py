"""
From attention heads to sparse pseudo labels
============================================

One synthetic image goes through the label side of the pipeline: the
attention stack, Otsu regions, classifier-scored proposals and the
foreground/background pixel draws that supervise the localization net.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dips.backbones import AttentionContext
from dips.config import RunConfig
from dips.data import SyntheticDatasetSpec, render_sample
from dips.harvest import harvest_proposals, otsu_binarize
from dips.pipeline import build_attention_provider, build_classifier, harvest_config, sampler_config
from dips.sampling import build_pseudo_labels

OUT = Path(__file__).with_suffix(".png")

###############################################################################
# Render an image whose target is class 2, plus up to two smaller distractors.
spec = SyntheticDatasetSpec()
rng = np.random.default_rng(7)
image, instances = render_sample(spec, 2, rng)

cfg = RunConfig()
meta = {"num_classes": spec.num_classes, "class_colors": spec.class_colors}
provider = build_attention_provider(cfg)
classifier = build_classifier(cfg, meta)

###############################################################################
# The stack holds the selected heads and the all-head mean as the last map.
stack = provider.get_attention_stack(image, AttentionContext(instances, seed=(0, 1)))
binary = [otsu_binarize(m) for m in stack.maps]

###############################################################################
# Every region of every map is scored by blurring outside its box and asking
# the frozen classifier for the target class.
hcfg = harvest_config(cfg, spec.num_classes)
harvest = harvest_proposals(image, stack, 2, hcfg, classifier, rng=np.random.default_rng(1))
for p in harvest.top_p:
    print(f"map {p.map_index} box {p.bbox} score {p.score:.3f}")
sel = harvest.selected
print("selected", sel.bbox, "from map", sel.map_index)

###############################################################################
# Sample a few foreground pixels inside the box and background pixels from
# the weakest activations.
pseudo = build_pseudo_labels(stack.maps[sel.map_index], sel, sampler_config(cfg), rng=np.random.default_rng(2))

n = len(stack)
fig, axes = plt.subplots(3, n, figsize=(2.0 * n, 6.2))
for i in range(n):
    axes[0, i].imshow(stack.maps[i], cmap="jet")
    axes[0, i].set_title("mean" if i == n - 1 else f"head {i}", fontsize=8)
    axes[1, i].imshow(binary[i], cmap="gray")
    axes[2, i].axis("off")
axes[2, 0].imshow(image)
x0, y0, x1, y1 = sel.bbox
axes[2, 0].add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, fill=False, color="lime"))
axes[2, 0].scatter(pseudo.fg_pixels[:, 1], pseudo.fg_pixels[:, 0], c="red", s=12)
axes[2, 0].scatter(pseudo.bg_pixels[:, 1], pseudo.bg_pixels[:, 0], c="cyan", s=12)
axes[2, 0].set_title("proposal + labels", fontsize=8)
axes[2, 1].imshow(instances, cmap="tab10", interpolation="nearest")
axes[2, 1].set_title("instances", fontsize=8)
for ax in axes[:2].ravel():
    ax.set_xticks([])
    ax.set_yticks([])
fig.tight_layout()
fig.savefig(OUT, dpi=100)
print("wrote", OUT)
