# Checkpoint format and inference io walk-through: build a model, save it to
# the .swft named-tensor archive, reload it bit-exactly, fold batch norms,
# and push a P6 PPM image through to a P5 PGM class map.
#
# Run:  python demos/demo_checkpoint_and_infer.py

import os
import tempfile

import numpy as np

import swiftseg as ss
from swiftseg.data import normalize_image, read_pgm, write_ppm
from swiftseg.graph import read_entries
from swiftseg.seghead import fuse_bn

work = tempfile.mkdtemp(prefix="swiftseg_demo_")
spec = ss.ModelSpec(width_mult=0.25, decoder_width=32, spp_grids=(1, 2), num_classes=4)
model = ss.build(spec, seed=0)

# --- checkpoint round trip ---------------------------------------------------
path = os.path.join(work, "model.swft")
ss.save(model, path)
print(f"saved {os.path.getsize(path):,} bytes to {path}")

entries = read_entries(path)
print(f"{len(entries)} named tensors; first few names:")
for name in list(entries)[:4]:
    print(f"  {name}  {entries[name].shape}")

twin = ss.build(spec, seed=123)          # different init on purpose
ss.load(twin, path)
same = all(np.array_equal(a, b) for (_, a), (_, b)
           in zip(model.state().items(), twin.state().items()))
print(f"round trip bit-exact: {same}")

# loading into an incompatible spec reports the offending tensor by name
try:
    ss.load(ss.build(ss.ModelSpec(**{**spec.to_dict(), "decoder_width": 16})), path)
except ss.CheckpointError as e:
    print(f"mismatch detected as expected:\n  {str(e)[:100]}...")
print()

# --- inference io ------------------------------------------------------------
rng = np.random.default_rng(7)
scene = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
ppm_path = os.path.join(work, "scene.ppm")
write_ppm(ppm_path, scene)

fused = fuse_bn(model)                   # inference-ready: BN folded away
x = normalize_image(scene, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
pred = fused.predict(x)[0].astype(np.uint8)

from swiftseg.data import write_pgm
pgm_path = os.path.join(work, "scene_pred.pgm")
write_pgm(pgm_path, pred)
back = read_pgm(pgm_path)
print(f"prediction {back.shape}, classes present: {sorted(np.unique(back).tolist())}")
print(f"artifacts under {work}")
