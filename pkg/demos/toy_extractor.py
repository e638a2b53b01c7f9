"""Train the degradation extractor on the toy world and measure how well it separates classes.

Run:  python demos/toy_extractor.py [steps]
With the default 3000 steps this takes about two minutes on one core.
"""
import sys
from pathlib import Path

import numpy as np

from ddsr.config import TrainConfig
from ddsr.data import synthetic_pool
from ddsr.evaluation import embed_dataset, separability_score
from ddsr.extractor import ContrastState
from ddsr.training import RunManifest, _rngs, load_extractor, run_stage1

root = Path(__file__).resolve().parents[1]
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
cfg = TrainConfig.load(root / "configs" / "toy_world.cfg").with_overrides(steps_stage1=steps)
out = Path("demo_extractor")

with RunManifest(out, cfg) as manifest:
    result = run_stage1(cfg, out, None, manifest)
blur_loss = manifest.series(1, "cl_blur")
noise_loss = manifest.series(1, "cl_noise")
window = max(1, min(100, steps // 10))
for i in range(0, steps, max(1, steps // 10)):
    print(f"step {i:5d}  blur {blur_loss[i:i + window].mean():.3f}  noise {noise_loss[i:i + window].mean():.3f}")

held_out = synthetic_pool(10, 64, seed=4242)


def margins(extractor):
    rows = embed_dataset(extractor, held_out, cfg.toy_kernel_list, cfg.toy_noise_list, cfg.scale,
                         seed=11, per_class=2, kernel_size=cfg.kernel_size)
    return separability_score(rows)


untrained = ContrastState.create(cfg, _rngs(cfg, 1)[0]).online
trained = load_extractor(result.checkpoint)[0].online

for label, ext in (("untrained", untrained), ("trained", trained)):
    for branch, rep in margins(ext).items():
        print(f"{label:>9} {branch:>5}: within {rep.within:.3f}  between {rep.between:.3f}  margin {rep.margin:.3f}")
print("checkpoint:", result.checkpoint, " mean blur loss last 100:", np.round(blur_loss[-100:].mean(), 3))
