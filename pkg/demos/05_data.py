"""Synthetic tiles, the manifest, normalization, patches and augmentation."""
import os
import tempfile

import numpy as np

from fusenet import data as D

root = tempfile.mkdtemp()
manifest = D.synth_generate(root, n_tiles=4, tile_size=64, seed=7)
print(sorted(os.listdir(root))[:7], "...")
print("split:", manifest.split)

manifest = D.load_manifest(os.path.join(root, "manifest.json"))
tile = D.load_tile(manifest, "tile000")
for name, band in tile.bands.items():
    print("  %s %s range [%d, %d]" % (name, band.dtype, band.min(), band.max()))
print("label values:", np.unique(tile.label))

stats = D.compute_normalization(manifest, "train")
stacks = D.normalized_groups(tile, [["B5"], ["B1", "B2", "B3"]], stats)
print("group stacks:", [s.shape for s in stacks], "in [0, 1]:", all(s.min() >= 0 and s.max() <= 1 for s in stacks))

# edge-aligned grid: 70 is not a multiple of 32, so the last row/column overlaps
print("offsets on 70x70:", sorted({r for r, _ in D.extract_patches((70, 70), 32, 32)}))

sample = D.crop_sample(tile.id, stacks, tile.label, (0, 0), 32)
aug = D.augment(sample, seed=[7, 0, 0])
print("augmentation:", aug.augmentation)
print("ignore pixels after augmentation:", int((aug.label == 255).sum()))

small = D.PatchSample([np.array([[[1, 2], [3, 4]]])], np.array([[1, 2], [3, 4]], np.uint8))
print("clockwise turn:", D.augment(small, desc={"rot90": 1}).label.tolist())
